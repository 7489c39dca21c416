import csv
import json

import pytest
import yaml

from freshfunnel.cli import main

MINIMAL = {
    "seed": 3,
    "world": {"n_users": 10, "n_providers": 2},
    "experiment": {
        "mode": "codivert",
        "duration_days": 1,
        "control": "control",
        "arms": [{"arm_id": "control", "share": 50, "stack": None}, {"arm_id": "treatment", "share": 50}],
    },
}


def write_config(path, doc):
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def minimal_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "min.yaml", MINIMAL)
    assert main(["run", "--config", cfg, "--out", str(root / "a")]) == 0
    return root, cfg


def test_missing_config_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert main(["run", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("doc", [
    {**MINIMAL, "colour": 1},
    {**MINIMAL, "world": {"n_users": 10, "bogus": 2}},
    {**MINIMAL, "experiment": {**MINIMAL["experiment"], "mode": "sideways"}},
    {**MINIMAL, "seed": -1},
    "just a string",
])
def test_invalid_config_exits_2(tmp_path, doc):
    assert main(["validate", "--config", write_config(tmp_path / "bad.yaml", doc)]) == 2


def test_validate_ok(tmp_path, capsys):
    assert main(["validate", "--config", write_config(tmp_path / "ok.yaml", MINIMAL)]) == 0
    assert "2 arms" in capsys.readouterr().out


def test_jobs_must_be_positive(minimal_run):
    _, cfg = minimal_run
    assert main(["run", "--config", cfg, "--jobs", "0"]) == 2


def test_minimal_run_outputs_parse(minimal_run):
    root, _ = minimal_run
    out = root / "a"
    for arm in ("control", "treatment"):
        for sub in ("events", "items"):
            for line in (out / sub / f"{arm}.jsonl").read_text().splitlines():
                json.loads(line)
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert rows and set(rows[0]) == {"date", "arm", "metric", "params", "value"}
    summary = json.loads((out / "summary.json").read_text())
    assert summary["leakage"] == {"control": 0, "treatment": 0}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["arms"] == ["control", "treatment"] and manifest["n_days"] == 1


def test_rerun_gives_byte_identical_metrics(minimal_run):
    root, cfg = minimal_run
    assert main(["run", "--config", cfg, "--out", str(root / "b")]) == 0
    assert (root / "a" / "metrics.csv").read_bytes() == (root / "b" / "metrics.csv").read_bytes()
    assert (root / "a" / "summary.json").read_bytes() == (root / "b" / "summary.json").read_bytes()


def test_seed_override_changes_the_run(minimal_run):
    root, cfg = minimal_run
    assert main(["run", "--config", cfg, "--out", str(root / "c"), "--seed-override", "4"]) == 0
    assert json.loads((root / "c" / "manifest.json").read_text())["seed"] == 4


def test_report_reproduces_run_metrics(minimal_run):
    root, _ = minimal_run
    assert main(["report", str(root / "a"), "--out", str(root / "rep")]) == 0
    assert (root / "rep" / "metrics.csv").read_bytes() == (root / "a" / "metrics.csv").read_bytes()
    run_summary = json.loads((root / "a" / "summary.json").read_text())
    rep_summary = json.loads((root / "rep" / "summary.json").read_text())
    assert {k: v for k, v in run_summary.items() if k not in ("leakage", "mode")} == rep_summary


def test_report_on_empty_dir_exits_2(tmp_path):
    assert main(["report", str(tmp_path)]) == 2
    assert main(["report", str(tmp_path / "missing")]) == 2


def test_report_on_truncated_log_exits_3(tmp_path, capsys):
    # big enough, with a low recall bar, that the main slot actually serves events
    doc = {**MINIMAL, "world": {"n_users": 60, "n_providers": 4}, "main": {"min_interactions_for_recall": 1}}
    broken = tmp_path / "broken"
    assert main(["run", "--config", write_config(tmp_path / "c.yaml", doc), "--out", str(broken)]) == 0
    path = max((broken / "events").glob("*.jsonl"), key=lambda p: p.stat().st_size)
    text = path.read_text()
    assert text.count("\n") >= 2
    path.write_text(text[: len(text) - 20])
    assert main(["report", str(broken)]) == 3
    n_lines = text.count("\n")
    assert f"{path}:{n_lines}" in capsys.readouterr().err


def sweep_doc(values, **extra):
    return {
        **MINIMAL,
        "world": {"n_users": 40, "n_providers": 4},
        "experiment": {"mode": "twin", "duration_days": 1, "arms": [
            {"arm_id": "base", "stack": {"graduation_threshold": 20, "n_low": 5}}]},
        "metrics": {"bootstrap_resamples": 100},
        "sweep": {"p_two_tower": values, **extra},
    }


def test_empty_sweep_values_exit_2(tmp_path):
    assert main(["sweep", "--config", write_config(tmp_path / "s.yaml", sweep_doc([]))]) == 2
    doc = sweep_doc([70, 100], baseline={"p_two_tower": 90})
    assert main(["sweep", "--config", write_config(tmp_path / "s2.yaml", doc)]) == 2


def test_sweep_writes_one_table_per_parameter(tmp_path):
    doc = sweep_doc([70, 100], baseline={"p_two_tower": 100}, n_low=[3, 5])
    out = tmp_path / "sw"
    assert main(["sweep", "--config", write_config(tmp_path / "s.yaml", doc), "--out", str(out)]) == 0
    tables = json.loads((out / "sweep" / "tables.json").read_text())
    assert tables["baseline"] == {"p_two_tower": 100, "n_low": 5}
    p_rows = tables["tables"]["p_two_tower"]
    assert [r["value"] for r in p_rows] == [70, 100] and [r["is_baseline"] for r in p_rows] == [False, True]
    assert all({"pct_change", "ci_low", "ci_high"} <= set(v) for r in p_rows for k, v in r.items()
               if isinstance(v, dict))
    with open(out / "sweep" / "n_low.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["n_low", "is_baseline"] and len(rows) == 3
