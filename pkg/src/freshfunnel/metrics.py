"""Corpus and user metrics computed from event logs.

Everything here is a pure function of (log, item table, parameters). Items are
described by a plain table with at least ``item_id``, ``provider_id`` and
``upload_tick`` columns, so reports can be rebuilt from files alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .eventlog import SLOT_KINDS, EventLog
from .world import GOOD_CLICK_SECONDS, TICKS_PER_DAY

FRESH_DAYS = 7


def _day(ticks) -> np.ndarray:
    return np.asarray(ticks, dtype=np.int64) // TICKS_PER_DAY


def _slot_mask(c, slot: str | None) -> np.ndarray:
    if slot is None:
        return np.ones(len(c["tick"]), dtype=bool)
    return c["slot"] == SLOT_KINDS.index(slot)


def _good(c) -> np.ndarray:
    return c["clicked"] & (c["dwell_seconds"] >= GOOD_CLICK_SECONDS)


def _upload_ticks(log_items, items: Mapping[str, np.ndarray]) -> np.ndarray:
    """Upload tick for each logged item id, looked up in the item table."""
    ids = np.asarray(items["item_id"], dtype=np.int64)
    order = np.argsort(ids)
    pos = np.searchsorted(ids, log_items, sorter=order)
    pos = np.clip(pos, 0, max(len(ids) - 1, 0))
    if len(ids) == 0 or np.any(ids[order[pos]] != log_items):
        raise KeyError("log references items missing from the item table")
    return np.asarray(items["upload_tick"], dtype=np.int64)[order[pos]]


# --------------------------------------------------------------------------
# core metrics


def _day_item_counts(log: EventLog, n_days: int, keep) -> tuple[np.ndarray, np.ndarray]:
    """(day, impression count) for every distinct (day, item) pair among ``keep`` events."""
    c = log.columns
    day = _day(c["tick"][keep])
    item = c["item_id"][keep]
    ok = (day >= 0) & (day < n_days)
    day, item = day[ok], item[ok]
    if len(day) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    # pack (day, item) into one sortable key; far cheaper than a row-wise unique
    lo = int(item.min())
    span = int(item.max()) - lo + 1
    keys, counts = np.unique(day * span + (item - lo), return_counts=True)
    return keys // span, counts


def _duic_from_counts(days: np.ndarray, counts: np.ndarray, K: int, n_days: int) -> np.ndarray:
    return np.bincount(days[counts >= K], minlength=n_days)[:n_days].astype(np.int64)


def duic_by_day(log: EventLog, K: int, n_days: int, *, slot: str | None = None, item_mask=None) -> np.ndarray:
    """DUIC@K for days 0..n_days-1: distinct items with >= K impressions that day."""
    if K < 1:
        raise ValueError("K must be >= 1")
    c = log.columns
    keep = c["impressed"] & _slot_mask(c, slot)
    if item_mask is not None:
        keep &= np.asarray(item_mask, dtype=bool)
    return _duic_from_counts(*_day_item_counts(log, n_days, keep), K, n_days)


def duic(log: EventLog, K: int, day: int, *, slot: str | None = None) -> int:
    if K < 1:
        raise ValueError("K must be >= 1")
    if day < 0:
        return 0
    return int(duic_by_day(log, K, day + 1, slot=slot)[day])


def discoverable_by_cohort(log: EventLog, X: int, Y_days: int, items: Mapping[str, np.ndarray], n_days: int) -> np.ndarray:
    """Per upload day: items reaching X main-slot positives within Y days of upload.

    "Within Y days" includes the boundary tick upload + Y days, matching the
    freshness window. Only items uploaded during the run (upload_tick >= 0)
    are counted; the dedicated slot's positives never count.
    """
    if X < 1 or Y_days < 1:
        raise ValueError("X and Y_days must be >= 1")
    c = log.columns
    keep = c["impressed"] & _good(c) & (c["slot"] == SLOT_KINDS.index("main"))
    out = np.zeros(n_days, dtype=np.int64)
    if not keep.any():
        return out
    item = c["item_id"][keep]
    up = _upload_ticks(item, items)
    age = c["tick"][keep] - up
    ok = (up >= 0) & (age >= 0) & (age <= Y_days * TICKS_PER_DAY)
    ids, counts = np.unique(item[ok], return_counts=True)
    reached = ids[counts >= X]
    if len(reached):
        cohort = _day(_upload_ticks(reached, items))
        cohort = cohort[(cohort >= 0) & (cohort < n_days)]
        np.add.at(out, cohort, 1)
    return out


def discoverable_corpus(log: EventLog, X: int, Y_days: int, items: Mapping[str, np.ndarray] | None = None) -> int:
    """Items with >= X main-slot positives within Y days of upload.

    Without an item table every logged item is assumed uploaded at tick 0.
    """
    c = log.columns
    if items is None:
        ids = np.unique(c["item_id"])
        items = {"item_id": ids, "upload_tick": np.zeros(len(ids), dtype=np.int64)}
    n_days = int(_day(c["tick"].max()) + 1) if len(log) else 1
    n_days = max(n_days, int(_day(np.max(items["upload_tick"], initial=0))) + 1)
    return int(discoverable_by_cohort(log, X, Y_days, items, n_days).sum())


def good_ctr(log: EventLog, scope=None) -> float | None:
    """Good clicks over impressions in ``scope`` (a boolean event mask); None if empty."""
    c = log.columns
    m = c["impressed"].copy()
    if scope is not None:
        m &= np.asarray(scope, dtype=bool)
    n = int(m.sum())
    if n == 0:
        return None
    return float((_good(c) & m).sum() / n)


def good_ctr_by_day(log: EventLog, n_days: int, scope=None) -> np.ndarray:
    c = log.columns
    m = c["impressed"].copy()
    if scope is not None:
        m &= np.asarray(scope, dtype=bool)
    day = _day(c["tick"])
    ok = m & (day >= 0) & (day < n_days)
    imp = np.bincount(day[ok], minlength=n_days)
    good = np.bincount(day[ok & _good(c)], minlength=n_days)
    return np.divide(good, imp, out=np.full(n_days, np.nan), where=imp > 0)


def dwell_by_day(log: EventLog, n_days: int, scope=None) -> np.ndarray:
    c = log.columns
    m = np.ones(len(log), dtype=bool) if scope is None else np.asarray(scope, dtype=bool)
    day = _day(c["tick"])
    ok = m & (day >= 0) & (day < n_days)
    return np.bincount(day[ok], weights=c["dwell_seconds"][ok], minlength=n_days)


def fresh_mask(log: EventLog, items: Mapping[str, np.ndarray], fresh_days: int = FRESH_DAYS) -> np.ndarray:
    """Events on items at most ``fresh_days`` old (and uploaded during the run)."""
    c = log.columns
    if len(log) == 0:
        return np.zeros(0, dtype=bool)
    up = _upload_ticks(c["item_id"], items)
    age = c["tick"] - up
    return (up >= 0) & (age >= 0) & (age <= fresh_days * TICKS_PER_DAY)


def small_providers(provider_ids, historical_impressions, percentile: float = 80.0) -> np.ndarray:
    """Bottom ``percentile``% of providers by historical impressions (ties broken by id)."""
    provider_ids = np.asarray(provider_ids, dtype=np.int64)
    h = np.asarray(historical_impressions, dtype=float)
    order = np.lexsort((provider_ids, h))
    n_small = int(np.floor(len(provider_ids) * percentile / 100.0))
    return np.sort(provider_ids[order[:n_small]])


def dwell_aggregates(log: EventLog, items: Mapping[str, np.ndarray], small_provider_ids, scope=None) -> dict:
    """Total fresh, overall and small-provider dwell seconds within ``scope``."""
    c = log.columns
    m = np.ones(len(log), dtype=bool) if scope is None else np.asarray(scope, dtype=bool)
    d = c["dwell_seconds"]
    out = {"fresh_dwell": 0.0, "overall_dwell": float(d[m].sum()), "small_provider_dwell": 0.0}
    if len(log) == 0:
        return out
    out["fresh_dwell"] = float(d[m & fresh_mask(log, items)].sum())
    out["small_provider_dwell"] = float(d[m & _provider_in(log, items, small_provider_ids)].sum())
    return out


def _provider_in(log: EventLog, items: Mapping[str, np.ndarray], provider_ids) -> np.ndarray:
    c = log.columns
    ids = np.asarray(items["item_id"], dtype=np.int64)
    order = np.argsort(ids)
    pos = order[np.searchsorted(ids, c["item_id"], sorter=order)]
    prov = np.asarray(items["provider_id"], dtype=np.int64)[pos]
    return np.isin(prov, np.asarray(provider_ids, dtype=np.int64))


def gini(counts) -> float:
    """Gini coefficient of non-negative counts (sorted closed form)."""
    x = np.sort(np.asarray(counts, dtype=float))
    n = len(x)
    if n == 0:
        raise ValueError("gini needs at least one value")
    total = x.sum()
    if total == 0:
        return 0.0
    i = np.arange(1, n + 1)
    return float(np.sum((2 * i - n - 1) * x) / (n * total))


def impression_gini(log: EventLog, day_range: tuple[int, int] | None = None, *, slot: str | None = None) -> float:
    """Gini of per-item impression counts over items with at least one impression."""
    c = log.columns
    m = c["impressed"] & _slot_mask(c, slot)
    if day_range is not None:
        day = _day(c["tick"])
        m &= (day >= day_range[0]) & (day < day_range[1])
    if not m.any():
        raise ValueError("impression_gini needs at least one impression")
    _, counts = np.unique(c["item_id"][m], return_counts=True)
    return gini(counts)


def fresh_positives_by_day(log: EventLog, items: Mapping[str, np.ndarray], n_days: int) -> np.ndarray:
    c = log.columns
    m = c["impressed"] & _good(c)
    if len(log):
        m &= fresh_mask(log, items)
    day = _day(c["tick"][m])
    return np.bincount(day[(day >= 0) & (day < n_days)], minlength=n_days).astype(np.int64)


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MetricParams:
    duic_ks: tuple[int, ...] = (10, 50, 100, 1000)
    discover_x: int = 20
    discover_y_days: int = 7
    small_provider_percentile: float = 80.0
    bootstrap_resamples: int = 1000
    burn_in_days: int = 0
    ci_level: float = 95.0

    def __post_init__(self) -> None:
        if not self.duic_ks or min(self.duic_ks) < 1:
            raise ValueError("duic_ks must be non-empty and >= 1")
        if self.discover_x < 1 or self.discover_y_days < 1:
            raise ValueError("discover_x and discover_y_days must be >= 1")
        if self.bootstrap_resamples < 1:
            raise ValueError("bootstrap_resamples must be >= 1")


@dataclass
class ArmData:
    """What a report needs about one arm: its log and item table."""

    log: EventLog
    items: dict


@dataclass
class MetricReport:
    n_days: int
    arms: list[str]
    control: str | None
    daily: dict = field(default_factory=dict)  # (metric, params) -> {arm: per-day array}
    totals: dict = field(default_factory=dict)  # (metric, params) -> {arm: scalar}
    comparisons: dict = field(default_factory=dict)  # (arm, metric, params) -> dict

    def rows(self) -> list[tuple]:
        """(date, arm, metric, params, value) rows, deterministic order."""
        out = []
        for (metric, params), per_arm in self.daily.items():
            for arm in self.arms:
                for d, v in enumerate(per_arm[arm]):
                    out.append((d, arm, metric, params, float(v)))
        return out

    def summary(self) -> dict:
        metrics = {}
        for (metric, params), per_arm in self.totals.items():
            label = metric if not params else f"{metric}[{params}]"
            metrics[label] = {arm: _json_float(v) for arm, v in per_arm.items()}
        comps: dict = {}
        for (arm, metric, params), comp in self.comparisons.items():
            label = metric if not params else f"{metric}[{params}]"
            comps.setdefault(f"{arm}_vs_{self.control}", {})[label] = {k: _json_float(v) for k, v in comp.items()}
        return {"n_days": self.n_days, "arms": list(self.arms), "control": self.control,
                "metrics": metrics, "comparisons": comps}

    def comparison(self, arm: str, metric: str, params: str = "") -> dict:
        return self.comparisons[(arm, metric, params)]


def _json_float(v):
    if v is None:
        return None
    v = float(v)
    return v if np.isfinite(v) else None


def pct_change(treatment: float, control: float) -> float:
    """(treatment - control) / control, in percent."""
    if control == 0:
        return float("nan")
    return 100.0 * (treatment - control) / control


def bootstrap_pct_change(t_daily, c_daily, n_resamples: int, seed: int, level: float = 95.0):
    """Percentile CI of the percent change in day-means, resampling days in pairs."""
    t = np.asarray(t_daily, dtype=float)
    c = np.asarray(c_daily, dtype=float)
    ok = np.isfinite(t) & np.isfinite(c)
    t, c = t[ok], c[ok]
    if len(t) == 0:
        return float("nan"), float("nan")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(t), size=(n_resamples, len(t)))
    ct = c[idx].mean(axis=1)
    tt = t[idx].mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        stats = 100.0 * (tt - ct) / ct
    stats = stats[np.isfinite(stats)]
    if len(stats) == 0:
        return float("nan"), float("nan")
    a = (100.0 - level) / 2.0
    lo, hi = np.percentile(stats, [a, 100.0 - a])
    return float(lo), float(hi)


def arm_daily_metrics(arm: ArmData, n_days: int, params: MetricParams, small_ids) -> dict:
    """(metric, params) -> per-day series for one arm."""
    log, items = arm.log, arm.items
    c = log.columns
    out = {}
    fresh = fresh_mask(log, items) if len(log) else np.zeros(0, dtype=bool)
    all_counts = _day_item_counts(log, n_days, c["impressed"])
    fresh_counts = _day_item_counts(log, n_days, c["impressed"] & fresh)
    for K in params.duic_ks:
        out[("duic", f"K={K}")] = _duic_from_counts(*all_counts, K, n_days)
        out[("fresh_duic", f"K={K}")] = _duic_from_counts(*fresh_counts, K, n_days)
    x, y = params.discover_x, params.discover_y_days
    out[("discoverable_corpus", f"X={x},Y={y}")] = discoverable_by_cohort(log, x, y, items, n_days)
    ded = c["slot"] == SLOT_KINDS.index("dedicated")
    out[("good_ctr", "slot=all")] = good_ctr_by_day(log, n_days)
    out[("good_ctr", "slot=main")] = good_ctr_by_day(log, n_days, ~ded)
    out[("good_ctr", "slot=dedicated")] = good_ctr_by_day(log, n_days, ded)
    out[("overall_dwell", "")] = dwell_by_day(log, n_days)
    out[("fresh_dwell", "")] = dwell_by_day(log, n_days, fresh)
    small = _provider_in(log, items, small_ids) if len(log) else np.zeros(0, dtype=bool)
    out[("small_provider_dwell", "")] = dwell_by_day(log, n_days, small)
    out[("fresh_positives_7d", "")] = fresh_positives_by_day(log, items, n_days)
    up = _day(np.asarray(items["upload_tick"], dtype=np.int64))
    out[("uploads", "")] = np.bincount(up[(up >= 0) & (up < n_days)], minlength=n_days).astype(np.int64)
    out[("impressions", "")] = np.bincount(_day(c["tick"][c["impressed"]]), minlength=n_days)[:n_days].astype(np.int64)
    return out


def _total(metric: str, series: np.ndarray, burn_in_days: int) -> float:
    s = series[burn_in_days:]
    if metric == "discoverable_corpus":
        return float(np.sum(s))
    s = s[np.isfinite(s)]
    return float(np.mean(s)) if len(s) else float("nan")


def compute_report(
    arms: Mapping[str, ArmData],
    n_days: int,
    params: MetricParams = MetricParams(),
    *,
    control: str | None = None,
    provider_table: Mapping[str, np.ndarray] | None = None,
    seed: int = 0,
) -> MetricReport:
    """Daily series, run totals and (vs. control) percent changes with bootstrap CIs.

    ``provider_table`` has ``provider_id`` and ``historical_impressions``; the
    small-provider set is its bottom percentile. Without it, providers are
    ranked by their items' ``base_impressions``.
    """
    names = list(arms)
    if control is None and names:
        control = names[0]
    if control is not None and control not in arms:
        raise KeyError(f"unknown control arm {control!r}")
    if provider_table is None:
        pid = np.concatenate([np.asarray(a.items["provider_id"], dtype=np.int64) for a in arms.values()] or [np.zeros(0, np.int64)])
        base = np.concatenate([np.asarray(a.items.get("base_impressions", np.zeros(len(a.items["provider_id"]))), dtype=float)
                               for a in arms.values()] or [np.zeros(0)])
        uniq, inv = np.unique(pid, return_inverse=True)
        provider_table = {"provider_id": uniq, "historical_impressions": np.bincount(inv, weights=base, minlength=len(uniq))}
    small_ids = small_providers(provider_table["provider_id"], provider_table["historical_impressions"],
                                params.small_provider_percentile)

    report = MetricReport(n_days, names, control)
    for name in names:
        for key, series in arm_daily_metrics(arms[name], n_days, params, small_ids).items():
            report.daily.setdefault(key, {})[name] = series
    for key, per_arm in report.daily.items():
        report.totals[key] = {a: _total(key[0], s, params.burn_in_days) for a, s in per_arm.items()}
    # whole-run impression Gini (not a daily quantity)
    report.totals[("impression_gini", "")] = {
        a: (impression_gini(arms[a].log, (params.burn_in_days, n_days)) if _has_impressions(arms[a].log, params, n_days) else float("nan"))
        for a in names
    }
    if control is None:
        return report
    for name in names:
        if name == control:
            continue
        for key, per_arm in report.daily.items():
            metric, p = key
            t_tot, c_tot = report.totals[key][name], report.totals[key][control]
            t_s = per_arm[name][params.burn_in_days :]
            c_s = per_arm[control][params.burn_in_days :]
            if metric == "discoverable_corpus":
                # only cohorts whose whole window fits in the run
                full = max(0, n_days - params.burn_in_days - params.discover_y_days + 1)
                t_s, c_s = t_s[:full], c_s[:full]
            lo, hi = bootstrap_pct_change(t_s, c_s, params.bootstrap_resamples, seed, params.ci_level)
            report.comparisons[(name, metric, p)] = {
                "treatment": t_tot,
                "control": c_tot,
                "pct_change": pct_change(t_tot, c_tot),
                "ci_low": lo,
                "ci_high": hi,
            }
        g = ("impression_gini", "")
        report.comparisons[(name, *g)] = {
            "treatment": report.totals[g][name],
            "control": report.totals[g][control],
            "pct_change": pct_change(report.totals[g][name], report.totals[g][control]),
            "ci_low": float("nan"),
            "ci_high": float("nan"),
        }
    return report


def _has_impressions(log: EventLog, params: MetricParams, n_days: int) -> bool:
    c = log.columns
    day = _day(c["tick"])
    return bool((c["impressed"] & (day >= params.burn_in_days) & (day < n_days)).any())
