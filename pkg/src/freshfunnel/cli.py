"""Command line entry point: run, sweep, report and validate.

Exit codes: 0 success, 2 invalid configuration or unusable input path,
3 runtime failure (including a corrupt event log).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as mx
from .config import ConfigError, RunConfig, load_config
from .eventlog import CorruptLogError, EventLog
from .experiment import ExperimentResult, SweepResult, run_experiment, run_sweep

log = logging.getLogger("freshfunnel")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class InputError(Exception):
    """Missing or empty input path."""


# --------------------------------------------------------------------------
# serialisation


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def write_table_jsonl(path: Path, table: dict) -> None:
    keys = list(table)
    cols = [np.asarray(table[k]).tolist() for k in keys]
    with open(path, "w", encoding="utf-8") as fh:
        for row in zip(*cols):
            fh.write(json.dumps(dict(zip(keys, row))) + "\n")


ITEM_COLUMNS = ("item_id", "provider_id", "upload_tick", "topic_id", "base_positives", "base_impressions",
                "positives", "impressions")
PROVIDER_COLUMNS = ("provider_id", "historical_impressions")


def read_table_jsonl(path: Path, columns: tuple[str, ...] = ()) -> dict:
    """Column arrays from a JSON-lines table; an empty file gives empty ``columns``."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except ValueError as exc:
                raise CorruptLogError(path, line_no, f"unparseable row ({exc})") from None
    if not rows:
        return {k: np.zeros(0, dtype=np.int64) for k in columns}
    keys = list(rows[0])
    try:
        return {k: np.asarray([r[k] for r in rows]) for k in keys}
    except KeyError as exc:
        raise CorruptLogError(path, len(rows), f"missing column {exc}") from None


def write_metrics_csv(path: Path, report: mx.MetricReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "arm", "metric", "params", "value"])
        for date, arm, metric, params, value in report.rows():
            w.writerow([date, arm, metric, params, repr(value)])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_plain) + "\n", encoding="utf-8")


def _config_echo(cfg: RunConfig) -> dict:
    def conv(o):
        if dataclasses.is_dataclass(o):
            return {f.name: conv(getattr(o, f.name)) for f in dataclasses.fields(o)}
        if isinstance(o, (list, tuple)):
            return [conv(x) for x in o]
        if isinstance(o, dict):
            return {str(k): conv(v) for k, v in o.items()}
        return _plain(o)

    return conv(cfg)


def write_run(out: Path, cfg: RunConfig, res: ExperimentResult) -> None:
    (out / "events").mkdir(parents=True, exist_ok=True)
    (out / "items").mkdir(parents=True, exist_ok=True)
    for arm_id, arm in res.arms.items():
        arm.log.write_jsonl(out / "events" / f"{arm_id}.jsonl")
        write_table_jsonl(out / "items" / f"{arm_id}.jsonl", arm.items)
    write_table_jsonl(out / "providers.jsonl", res.provider_table)
    write_metrics_csv(out / "metrics.csv", res.report)
    _write_json(out / "summary.json", {**res.report.summary(), "leakage": res.leakage, "mode": res.mode})
    _write_json(out / "manifest.json", {
        "version": __version__,
        "mode": res.mode,
        "n_days": res.n_days,
        "seed": cfg.seed,
        "arms": list(res.arms),
        "control": res.report.control,
        "metric_params": _config_echo(cfg.metrics),
        "config": _config_echo(cfg),
    })


def write_sweep(out: Path, cfg: RunConfig, res: SweepResult) -> None:
    (out / "sweep").mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", res.report)
    _write_json(out / "summary.json", res.report.summary())
    _write_json(out / "sweep" / "tables.json", {"baseline": res.baseline, "tables": res.tables})
    for param, rows in res.tables.items():
        metric_keys = [k for k in rows[0] if k not in ("value", "is_baseline")] if rows else []
        with open(out / "sweep" / f"{param}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([param, "is_baseline"] + [f"{m} {s}" for m in metric_keys for s in ("pct_change", "ci_low", "ci_high")])
            for r in rows:
                w.writerow([r["value"], r["is_baseline"]] + [repr(_plain(r[m][s])) for m in metric_keys
                                                              for s in ("pct_change", "ci_low", "ci_high")])
    _write_json(out / "manifest.json", {
        "version": __version__,
        "mode": "sweep",
        "n_days": cfg.duration_days,
        "seed": cfg.seed,
        "points": res.points,
        "baseline": res.baseline,
        "config": _config_echo(cfg),
    })


# --------------------------------------------------------------------------
# commands


def _effective(cfg: RunConfig, args) -> RunConfig:
    if args.seed_override is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed_override)
    return cfg


def _out_dir(cfg: RunConfig, args) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir)


def cmd_run(args) -> int:
    cfg = _effective(load_config(args.config), args)
    out = _out_dir(cfg, args)
    log.info("run: mode=%s days=%d arms=%s -> %s", cfg.mode, cfg.duration_days, [a.arm_id for a in cfg.arms], out)
    res = run_experiment(cfg.world, cfg.arms, cfg.duration_days, cfg.seed, mode=cfg.mode, main=cfg.main,
                         metric_params=cfg.metrics, control=cfg.control, jobs=args.jobs)
    write_run(out, cfg, res)
    log.info("run: wrote %s", out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _effective(load_config(args.config), args)
    if cfg.sweep is None:
        raise ConfigError("config has no sweep block")
    base = cfg.base_arm().policy
    points = cfg.sweep.points()
    baseline = cfg.sweep.baseline_point(base)
    metrics = [tuple(m.split("|", 1)) if "|" in m else (m, "") for m in cfg.sweep.table_metrics] or None
    out = _out_dir(cfg, args)
    log.info("sweep: %d points, baseline %s -> %s", len(points), baseline, out)
    res = run_sweep(cfg.world, base, points, baseline, cfg.duration_days, cfg.seed, main=cfg.main,
                    metric_params=cfg.metrics, common_random_numbers=cfg.sweep.common_random_numbers,
                    metrics=metrics, jobs=args.jobs)
    write_sweep(out, cfg, res)
    return EXIT_OK


def load_run(logs_dir) -> tuple[dict, dict, dict]:
    """Read a run directory back into (manifest, arms, provider table)."""
    logs_dir = Path(logs_dir)
    if not logs_dir.is_dir():
        raise InputError(f"no such directory: {logs_dir}")
    events = sorted((logs_dir / "events").glob("*.jsonl")) if (logs_dir / "events").is_dir() else []
    if not events:
        raise InputError(f"no event logs under {logs_dir / 'events'}")
    manifest_path = logs_dir / "manifest.json"
    if not manifest_path.is_file():
        raise InputError(f"missing {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CorruptLogError(manifest_path, 1, f"unparseable manifest ({exc})") from None
    arms = {}
    for arm_id in manifest.get("arms") or [p.stem for p in events]:
        ev_path = logs_dir / "events" / f"{arm_id}.jsonl"
        it_path = logs_dir / "items" / f"{arm_id}.jsonl"
        if not ev_path.is_file() or not it_path.is_file():
            raise InputError(f"missing log or item table for arm {arm_id!r}")
        elog = EventLog.read_jsonl(ev_path)
        elog.arm_ids = [arm_id]
        arms[arm_id] = mx.ArmData(elog, read_table_jsonl(it_path, ITEM_COLUMNS))
    prov_path = logs_dir / "providers.jsonl"
    providers = read_table_jsonl(prov_path, PROVIDER_COLUMNS) if prov_path.is_file() else None
    return manifest, arms, providers


def cmd_report(args) -> int:
    manifest, arms, providers = load_run(args.logs_dir)
    mp = manifest.get("metric_params") or {}
    params = mx.MetricParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in mp.items()})
    report = mx.compute_report(arms, int(manifest["n_days"]), params, control=manifest.get("control"),
                               provider_table=providers, seed=int(manifest.get("seed", 0)))
    out = Path(args.out) if args.out else Path(args.logs_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", report)
    _write_json(out / "summary.json", report.summary())
    log.info("report: wrote %s", out)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    print(f"ok: {len(cfg.arms)} arms, mode {cfg.mode}, {cfg.duration_days} days")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freshfunnel", description="Multi-funnel fresh content recommender simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        if needs_config:
            sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--out", help="output directory (defaults to the config's output_dir)")

    sp = sub.add_parser("run", help="simulate the configured experiment")
    common(sp)
    sp.add_argument("--seed-override", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run the sweep block and write comparison tables")
    common(sp)
    sp.add_argument("--seed-override", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="recompute metrics from a run directory")
    sp.add_argument("logs_dir")
    common(sp, needs_config=False)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("validate", help="check a configuration without running it")
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("FRESHFUNNEL_LOG_LEVEL", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CorruptLogError as exc:
        print(f"error: corrupt log at {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime fault: report and fail with a distinct code
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
