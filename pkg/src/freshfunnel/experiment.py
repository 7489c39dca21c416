"""A/B harness: user-corpus co-diversion, plain user diversion and twin runs.

Co-diversion hashes users and providers independently into share buckets, so
x% of users only ever see x% of the corpus and a treatment can never leak its
boosted items into the control arm. Plain user diversion shares the corpus and
exists to show that leak. Twin runs replay one world under several policies
with common random numbers, for low-noise policy comparisons.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import metrics as mx
from ._util import hash_unit
from .eventlog import EventLog
from .main_recsys import MainConfig
from .simulation import ArmPolicy, Simulation, SimulationResult
from .world import Provider, UserBase, WorldConfig, generate_world

log = logging.getLogger(__name__)

MODES = ("codivert", "user_divert", "twin")


class LeakageError(RuntimeError):
    """A user was served an item from another arm's corpus."""


@dataclass(frozen=True)
class ArmSpec:
    arm_id: str
    share: float  # percent of users (and, when co-diverted, of providers)
    policy: ArmPolicy = field(default_factory=ArmPolicy)


@dataclass(frozen=True)
class DivertedArm:
    arm_id: str
    user_ids: frozenset
    provider_ids: frozenset | None  # None: the corpus is shared
    policy: ArmPolicy | None = None

    @property
    def is_control(self) -> bool:
        return self.policy is None or self.policy.stack is None


def _ids(things) -> np.ndarray:
    if isinstance(things, UserBase):
        return things.ids.copy()
    out = []
    for t in things:
        if isinstance(t, Provider):
            out.append(t.provider_id)
        elif hasattr(t, "user_id"):
            out.append(t.user_id)
        else:
            out.append(int(t))
    return np.asarray(out, dtype=np.int64)


def _salt(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**62))
    return int(rng)


def _check_shares(shares: Sequence[float]) -> np.ndarray:
    s = np.asarray(list(shares), dtype=float)
    if s.size == 0:
        raise ValueError("shares must be non-empty")
    if np.any(s <= 0) or s.sum() > 100.0 + 1e-9:
        raise ValueError("shares must be positive percentages summing to at most 100")
    return s


def hash_buckets(ids, shares, salt: int, tag: str) -> np.ndarray:
    """Arm index per id (-1 for the unassigned remainder), stable under re-runs."""
    edges = np.cumsum(_check_shares(shares)) / 100.0
    u = np.array([hash_unit(salt, tag, int(i)) for i in ids], dtype=float)
    arm = np.searchsorted(edges, u, side="right")
    return np.where(arm < len(edges), arm, -1)


def codivert(users, providers, shares, rng, arm_ids=None, policies=None) -> list[DivertedArm]:
    """Independent user and provider hashing into matching share buckets."""
    s = _check_shares(shares)
    arm_ids = list(arm_ids) if arm_ids is not None else [f"arm{i}" for i in range(len(s))]
    salt = _salt(rng)
    uid, pid = _ids(users), _ids(providers)
    ua, pa = hash_buckets(uid, s, salt, "user"), hash_buckets(pid, s, salt, "provider")
    policies = list(policies) if policies is not None else [None] * len(s)
    return [
        DivertedArm(a, frozenset(uid[ua == i].tolist()), frozenset(pid[pa == i].tolist()), policies[i])
        for i, a in enumerate(arm_ids)
    ]


def user_divert(users, shares, rng, arm_ids=None, policies=None) -> list[DivertedArm]:
    """Users hashed into arms; every arm sees the whole corpus."""
    s = _check_shares(shares)
    arm_ids = list(arm_ids) if arm_ids is not None else [f"arm{i}" for i in range(len(s))]
    uid = _ids(users)
    ua = hash_buckets(uid, s, _salt(rng), "user")
    policies = list(policies) if policies is not None else [None] * len(s)
    return [DivertedArm(a, frozenset(uid[ua == i].tolist()), None, policies[i]) for i, a in enumerate(arm_ids)]


# --------------------------------------------------------------------------
# running


@dataclass
class ArmOutput:
    arm_id: str
    log: EventLog
    items: dict  # item table incl. provider ids and baseline counters
    user_ids: np.ndarray
    provider_ids: np.ndarray
    result: SimulationResult | None = None


@dataclass
class ExperimentResult:
    mode: str
    n_days: int
    arms: dict  # arm_id -> ArmOutput
    report: mx.MetricReport
    provider_table: dict
    leakage: dict = field(default_factory=dict)


def _item_table(res: SimulationResult) -> dict:
    t = res.corpus.table()
    t["positives"] = res.corpus.positives.copy()
    t["impressions"] = res.corpus.impressions.copy()
    return t


def _run_arm(args) -> SimulationResult:
    wc, providers, catalog, users, policies, user_policy, main, seed, key, id_base, days = args
    sim = Simulation(wc, providers, catalog, users, policies, user_policy, main=main, seed=seed,
                     stream_key=key, id_base=id_base)
    return sim.run(days)


def _map(fn, jobs: list, n_jobs: int) -> list:
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, jobs))


def check_codiverted(arm: DivertedArm, log: EventLog, items: dict) -> int:
    """Count events crossing arms; raises LeakageError on any."""
    c = log.columns
    if len(log) == 0:
        return 0
    ids = np.asarray(items["item_id"], dtype=np.int64)
    order = np.argsort(ids)
    pos = np.searchsorted(ids, c["item_id"], sorter=order)
    known = (pos < len(ids)) & (ids[order[np.minimum(pos, len(ids) - 1)]] == c["item_id"])
    prov = np.where(known, np.asarray(items["provider_id"])[order[np.minimum(pos, len(ids) - 1)]], -1)
    bad = ~known | ~np.isin(prov, np.fromiter(arm.provider_ids, dtype=np.int64))
    bad |= ~np.isin(c["user_id"], np.fromiter(arm.user_ids, dtype=np.int64))
    n_bad = int(bad.sum())
    if n_bad:
        raise LeakageError(f"arm {arm.arm_id}: {n_bad} events cross arms")
    return 0


def treatment_leakage(log: EventLog, items: dict, treatment_arm: int, control_arm: int) -> int:
    """Control-arm main-slot impressions of items the treatment arm bootstrapped.

    An item counts as treatment-bootstrapped when it was uploaded during the
    run and got dedicated-slot impressions in the treatment arm.
    """
    c = log.columns
    up = dict(zip(np.asarray(items["item_id"]).tolist(), np.asarray(items["upload_tick"]).tolist()))
    boot = np.unique(c["item_id"][(c["arm"] == treatment_arm) & (c["slot"] == 1)])
    boot = np.array([i for i in boot.tolist() if up.get(i, -1) >= 0], dtype=np.int64)
    leaked = (c["arm"] == control_arm) & (c["slot"] == 0) & np.isin(c["item_id"], boot)
    return int(leaked.sum())


def _provider_table(providers: Sequence[Provider], catalog) -> dict:
    pid = np.array([p.provider_id for p in providers], dtype=np.int64)
    base = {int(p): 0 for p in pid}
    for it in catalog:
        base[it.provider_id] += it.impressions
    return {"provider_id": pid, "historical_impressions": np.array([base[int(p)] for p in pid], dtype=np.int64)}


def run_experiment(
    world_config: WorldConfig,
    arms: Sequence[ArmSpec],
    duration_days: int,
    seed: int,
    *,
    mode: str = "codivert",
    main: MainConfig = MainConfig(),
    metric_params: mx.MetricParams = mx.MetricParams(),
    control: str | None = None,
    jobs: int = 1,
) -> ExperimentResult:
    """Simulate every arm for ``duration_days`` and compare arms against ``control``.

    ``codivert``: each arm gets its hashed users and providers and runs on its
    own substreams; any cross-arm event aborts. ``user_divert``: one shared
    corpus and main system, users hashed into arms. ``twin``: every arm replays
    the full world with the same random streams (shares are ignored).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not arms:
        raise ValueError("need at least one arm")
    if duration_days < 0:
        raise ValueError("duration_days must be >= 0")
    ids = [a.arm_id for a in arms]
    if len(set(ids)) != len(ids):
        raise ValueError("arm ids must be unique")
    world = generate_world(world_config, seed)
    ptable = _provider_table(world.providers, world.catalog)
    shares = [a.share for a in arms]
    outputs: dict[str, ArmOutput] = {}
    leakage: dict = {}

    if mode == "codivert":
        div = codivert(world.users, world.providers, shares, seed, ids, [a.policy for a in arms])
        jobs_args = []
        for i, (spec, d) in enumerate(zip(arms, div)):
            provs = [p for p in world.providers if p.provider_id in d.provider_ids]
            cat = [it for it in world.catalog if it.provider_id in d.provider_ids]
            rows = np.flatnonzero(np.isin(world.users.ids, np.fromiter(d.user_ids, dtype=np.int64)))
            jobs_args.append((world_config, provs, cat, world.users.subset(rows), [spec.policy], None, main, seed,
                              spec.arm_id, 10**9 * (i + 1), duration_days))
        results = _map(_run_arm, jobs_args, jobs)
        for spec, d, res in zip(arms, div, results):
            res.log.arm_ids = [spec.arm_id]
            items = _item_table(res)
            leakage[spec.arm_id] = check_codiverted(d, res.log, items)
            outputs[spec.arm_id] = ArmOutput(spec.arm_id, res.log, items, res.user_ids, res.provider_ids, res)
    elif mode == "user_divert":
        div = user_divert(world.users, shares, seed, ids, [a.policy for a in arms])
        arm_of = {u: i for i, d in enumerate(div) for u in d.user_ids}
        rows = np.array([r for r, u in enumerate(world.users.ids.tolist()) if u in arm_of], dtype=np.int64)
        users = world.users.subset(rows)
        upol = np.array([arm_of[int(u)] for u in users.ids], dtype=np.int64)
        res = _run_arm((world_config, world.providers, world.catalog, users, [a.policy for a in arms], upol, main,
                        seed, "shared", 10**9, duration_days))
        res.log.arm_ids = list(ids)
        items = _item_table(res)
        c = res.log.columns
        for i, spec in enumerate(arms):
            sub = res.log.select(c["arm"] == i)
            outputs[spec.arm_id] = ArmOutput(spec.arm_id, sub, items, users.ids[upol == i], res.provider_ids, res)
        ctrl = ids.index(control) if control is not None else 0
        for i, spec in enumerate(arms):
            if i != ctrl:
                leakage[spec.arm_id] = treatment_leakage(res.log, items, i, ctrl)
    else:
        jobs_args = [
            (world_config, world.providers, world.catalog, world.users.subset(np.arange(len(world.users))),
             [spec.policy], None, main, seed, "twin", 10**9, duration_days)
            for spec in arms
        ]
        results = _map(_run_arm, jobs_args, jobs)
        for spec, res in zip(arms, results):
            res.log.arm_ids = [spec.arm_id]
            outputs[spec.arm_id] = ArmOutput(spec.arm_id, res.log, _item_table(res), res.user_ids, res.provider_ids, res)

    report = mx.compute_report(
        {a: mx.ArmData(o.log, o.items) for a, o in outputs.items()},
        duration_days, metric_params, control=control, provider_table=ptable, seed=seed,
    )
    return ExperimentResult(mode, duration_days, outputs, report, ptable, leakage)


# --------------------------------------------------------------------------
# parameter sweeps

STACK_PARAMS = ("p_two_tower", "q_core_realtime", "n_low", "graduation_threshold", "contextual_mode")
TWO_TOWER_PARAMS = ("drop_id", "drop_popularity")


def point_label(point: dict) -> str:
    return ",".join(f"{k}={point[k]}" for k in point) or "base"


def apply_point(policy: ArmPolicy, point: dict) -> ArmPolicy:
    """Copy of ``policy`` with the swept stack / two-tower fields overridden."""
    stack_kw = {k: v for k, v in point.items() if k in STACK_PARAMS}
    tt_kw = {k: v for k, v in point.items() if k in TWO_TOWER_PARAMS}
    unknown = set(point) - set(stack_kw) - set(tt_kw)
    if unknown:
        raise ValueError(f"cannot sweep {sorted(unknown)}")
    if policy.stack is None:
        raise ValueError("sweeps need a policy with a fresh stack")
    return replace(
        policy,
        name=point_label(point),
        stack=replace(policy.stack, **stack_kw),
        two_tower=replace(policy.two_tower, **tt_kw),
    )


@dataclass
class SweepResult:
    points: list  # list of dicts
    baseline: dict
    report: mx.MetricReport
    tables: dict  # parameter -> list of row dicts
    arms: dict  # label -> ArmOutput


def sweep_tables(points: Sequence[dict], baseline: dict, report: mx.MetricReport, metrics: Sequence[tuple]) -> dict:
    """One table per swept parameter: that parameter varied, the rest at baseline.

    Each row carries the parameter value and, per metric, the percent change
    versus the baseline point with its bootstrap interval.
    """
    base_label = point_label(baseline)
    tables = {}
    for param in baseline:
        rows = []
        for pt in points:
            if any(pt[k] != baseline[k] for k in baseline if k != param):
                continue
            label = point_label(pt)
            row = {"value": pt[param], "is_baseline": label == base_label}
            for metric, params in metrics:
                key = f"{metric}[{params}]" if params else metric
                if label == base_label:
                    row[key] = {"pct_change": 0.0, "ci_low": 0.0, "ci_high": 0.0}
                else:
                    comp = report.comparison(label, metric, params)
                    row[key] = {k: comp[k] for k in ("pct_change", "ci_low", "ci_high")}
            rows.append(row)
        tables[param] = rows
    return tables


def default_sweep_metrics(params: mx.MetricParams) -> list[tuple]:
    out = [("duic", f"K={k}") for k in params.duic_ks]
    out += [("fresh_dwell", ""), ("overall_dwell", ""), ("small_provider_dwell", ""),
            ("discoverable_corpus", f"X={params.discover_x},Y={params.discover_y_days}"),
            ("good_ctr", "slot=dedicated")]
    return out


def run_sweep(
    world_config: WorldConfig,
    base_policy: ArmPolicy,
    points: Sequence[dict],
    baseline: dict,
    duration_days: int,
    seed: int,
    *,
    main: MainConfig = MainConfig(),
    metric_params: mx.MetricParams = mx.MetricParams(),
    common_random_numbers: bool = True,
    metrics: Sequence[tuple] | None = None,
    jobs: int = 1,
) -> SweepResult:
    """Run every sweep point on the full world and tabulate deltas vs. ``baseline``.

    With common random numbers every point replays the same random streams, so
    deltas reflect the policy change alone; otherwise each point gets its own
    derived stream key.
    """
    points = [dict(p) for p in points]
    labels = [point_label(p) for p in points]
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate sweep points")
    if point_label(baseline) not in labels:
        raise ValueError("the baseline point must be one of the sweep points")
    policies = [apply_point(base_policy, p) for p in points]
    world = generate_world(world_config, seed)
    ptable = _provider_table(world.providers, world.catalog)
    args = [
        (world_config, world.providers, world.catalog, world.users.subset(np.arange(len(world.users))), [pol], None,
         main, seed, "twin" if common_random_numbers else f"sweep:{lab}", 10**9, duration_days)
        for pol, lab in zip(policies, labels)
    ]
    outputs = {}
    for lab, res in zip(labels, _map(_run_arm, args, jobs)):
        res.log.arm_ids = [lab]
        outputs[lab] = ArmOutput(lab, res.log, _item_table(res), res.user_ids, res.provider_ids, res)
    report = mx.compute_report(
        {a: mx.ArmData(o.log, o.items) for a, o in outputs.items()},
        duration_days, metric_params, control=point_label(baseline), provider_table=ptable, seed=seed,
    )
    metrics = list(metrics) if metrics else default_sweep_metrics(metric_params)
    return SweepResult(points, dict(baseline), report, sweep_tables(points, baseline, report, metrics), outputs)
