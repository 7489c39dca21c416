"""Run configuration: a YAML document mapped onto frozen dataclasses.

Unknown keys are rejected at every level, and every block is validated by
its dataclass before anything runs.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .experiment import MODES, ArmSpec
from .main_recsys import MainConfig
from .metrics import MetricParams
from .realtime import RealtimeConfig
from .simulation import ArmPolicy, BanditConfig
from .stack import StackConfig
from .two_tower import TwoTowerConfig
from .world import WorldConfig

SWEEP_STACK_KEYS = ("p_two_tower", "q_core_realtime", "n_low", "graduation_threshold")
SWEEP_TT_KEYS = ("drop_id", "drop_popularity")
SWEEP_KEYS = SWEEP_STACK_KEYS + SWEEP_TT_KEYS


class ConfigError(ValueError):
    pass


def _build(cls, data: Any, where: str):
    """Instantiate dataclass ``cls`` from a mapping, refusing unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class SweepConfig:
    base_arm: str | None = None
    values: dict = field(default_factory=dict)  # parameter -> tuple of values
    baseline: dict = field(default_factory=dict)  # parameter -> baseline value
    common_random_numbers: bool = True
    table_metrics: tuple[str, ...] = ()

    def points(self) -> list[dict]:
        keys = [k for k in SWEEP_KEYS if k in self.values]
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.values[k] for k in keys))]

    def baseline_point(self, base_policy: ArmPolicy) -> dict:
        out = {}
        for k, vals in self.values.items():
            if k in self.baseline:
                out[k] = self.baseline[k]
                continue
            current = getattr(base_policy.two_tower if k in SWEEP_TT_KEYS else base_policy.stack, k)
            out[k] = current if current in vals else vals[-1]
        return out


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    world: WorldConfig = field(default_factory=WorldConfig)
    main: MainConfig = field(default_factory=MainConfig)
    mode: str = "codivert"
    duration_days: int = 30
    control: str | None = None
    arms: tuple[ArmSpec, ...] = ()
    metrics: MetricParams = field(default_factory=MetricParams)
    sweep: SweepConfig | None = None

    def base_arm(self) -> ArmSpec:
        name = self.sweep.base_arm if self.sweep and self.sweep.base_arm else None
        for a in self.arms:
            if (name is None and a.policy.stack is not None) or a.arm_id == name:
                return a
        raise ConfigError("sweep needs a base arm with a fresh stack")


def _arm(data: Any, where: str) -> ArmSpec:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    allowed = {"arm_id", "share", "stack", "two_tower", "realtime", "bandit"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    if "arm_id" not in data:
        raise ConfigError(f"{where}: arm_id is required")
    arm_id = str(data["arm_id"])
    share = data.get("share", 100.0)
    if not isinstance(share, (int, float)) or isinstance(share, bool):
        raise ConfigError(f"{where}.share: must be a number")
    stack = None if data.get("stack", {}) is None else _build(StackConfig, data.get("stack"), f"{where}.stack")
    policy = ArmPolicy(
        name=arm_id,
        stack=stack,
        two_tower=_build(TwoTowerConfig, data.get("two_tower"), f"{where}.two_tower"),
        realtime=_build(RealtimeConfig, data.get("realtime"), f"{where}.realtime"),
        bandit=_build(BanditConfig, data.get("bandit"), f"{where}.bandit"),
    )
    return ArmSpec(arm_id, float(share), policy)


def _sweep(data: Any) -> SweepConfig | None:
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError("sweep: expected a mapping")
    meta = {"base_arm", "baseline", "common_random_numbers", "table_metrics"}
    unknown = sorted(set(data) - meta - set(SWEEP_KEYS))
    if unknown:
        raise ConfigError(f"sweep: unknown keys {unknown}")
    values = {}
    for k in SWEEP_KEYS:
        if k in data:
            v = data[k]
            if not isinstance(v, list) or not v:
                raise ConfigError(f"sweep.{k}: needs a non-empty list of values")
            values[k] = tuple(v)
    if not values:
        raise ConfigError("sweep: no parameter has values to sweep")
    baseline = data.get("baseline") or {}
    if not isinstance(baseline, dict) or set(baseline) - set(values):
        raise ConfigError("sweep.baseline: must map swept parameters to values")
    for k, v in baseline.items():
        if v not in values[k]:
            raise ConfigError(f"sweep.baseline.{k}: {v!r} is not among the swept values")
    return SweepConfig(
        data.get("base_arm"), values, dict(baseline), bool(data.get("common_random_numbers", True)),
        tuple(data.get("table_metrics") or ()),
    )


def parse_config(doc: Any) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    allowed = {"seed", "output_dir", "world", "main", "experiment", "metrics", "sweep"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    exp = doc.get("experiment") or {}
    if not isinstance(exp, dict):
        raise ConfigError("experiment: expected a mapping")
    unknown = sorted(set(exp) - {"mode", "duration_days", "control", "arms"})
    if unknown:
        raise ConfigError(f"experiment: unknown keys {unknown}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    mode = exp.get("mode", "codivert")
    if mode not in MODES:
        raise ConfigError(f"experiment.mode must be one of {MODES}")
    days = exp.get("duration_days", 30)
    if not isinstance(days, int) or isinstance(days, bool) or days < 0:
        raise ConfigError("experiment.duration_days must be a non-negative integer")
    raw_arms = exp.get("arms")
    if not raw_arms:
        raw_arms = [{"arm_id": "control", "share": 5.0, "stack": None}, {"arm_id": "treatment", "share": 5.0}]
    if not isinstance(raw_arms, list):
        raise ConfigError("experiment.arms must be a list")
    arms = tuple(_arm(a, f"experiment.arms[{i}]") for i, a in enumerate(raw_arms))
    ids = [a.arm_id for a in arms]
    if len(set(ids)) != len(ids):
        raise ConfigError("experiment.arms: arm ids must be unique")
    if mode != "twin":
        total = sum(a.share for a in arms)
        if any(a.share <= 0 for a in arms) or total > 100.0 + 1e-9:
            raise ConfigError("experiment.arms: shares must be positive and sum to at most 100")
    control = exp.get("control")
    if control is not None and control not in ids:
        raise ConfigError(f"experiment.control: unknown arm {control!r}")
    cfg = RunConfig(
        seed=seed,
        output_dir=str(doc.get("output_dir", "out")),
        world=_build(WorldConfig, doc.get("world"), "world"),
        main=_build(MainConfig, doc.get("main"), "main"),
        mode=mode,
        duration_days=days,
        control=control,
        arms=arms,
        metrics=_build(MetricParams, doc.get("metrics"), "metrics"),
        sweep=_sweep(doc.get("sweep")),
    )
    if cfg.sweep is not None:
        cfg.base_arm()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return parse_config(doc)
