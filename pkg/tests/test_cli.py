import csv
import json

import pytest
from _oracles import brute_force_frontier
from conftest import tiny_config

from prunekit.checkpoint import load_checkpoint
from prunekit.cli import SUMMARY_COLUMNS, main
from prunekit.config import parse_config
from prunekit.experiments import enumerate_mixtures, point_from_report
from prunekit.pruning import param_fraction


def _cfg(tmp_path, name="cfg.json", **kw):
    p = tmp_path / name
    p.write_text(json.dumps(tiny_config(**kw)))
    return p


def test_run_writes_report_and_checkpoint(tmp_path):
    cfg = _cfg(tmp_path, prune={"final_density": 0.2})
    out = tmp_path / "run"
    assert main(["--quiet", "run", str(cfg), "--output", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert json.loads((out / "timing.json").read_text())["wall_clock_s"] > 0
    model = load_checkpoint(out / "checkpoint")
    frac = param_fraction(model.prunable_layers())
    assert frac == report["final"]["param_fraction"]
    assert abs(frac - 0.2) <= max((m + n) / (m * n) for m, n in (l.shape for l in model.prunable_layers()))


def test_run_seed_flag_is_reproducible(tmp_path):
    cfg = _cfg(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--quiet", "run", "--config", str(cfg), "--seed", "7", "--output", str(a)]) == 0
    assert main(["--quiet", "run", str(cfg), "--seed", "7", "--output", str(b)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert json.loads((a / "report.json").read_text())["seed"] == 7


def test_malformed_config_exit_2_no_output(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    out = tmp_path / "out"
    assert main(["run", str(bad), "--output", str(out)]) == 2
    assert not out.exists()
    assert "bogus" in capsys.readouterr().err


def test_numerical_failure_exit_3(tmp_path, monkeypatch):
    from prunekit import cli
    from prunekit.errors import NumericalFailure

    def boom(cfg, progress=None):
        raise NumericalFailure("loss became nan", {"failure": {"last_good_epoch": 1}})

    monkeypatch.setattr(cli, "run_experiment", boom)
    out = tmp_path / "out"
    assert main(["--quiet", "run", str(_cfg(tmp_path)), "--output", str(out)]) == 3
    assert not (out / "report.json").exists()
    assert json.loads((out / "failure.json").read_text())["failure"]["last_good_epoch"] == 1


def test_sweep_rows_per_setting(tmp_path):
    cfg = _cfg(tmp_path, tasks=[{"id": "a", "train_size": 32, "seed": 1}],
               prune={"epochs": 3, "warmup_epochs": 1, "cooldown_epochs": 1})
    out = tmp_path / "sweep"
    assert main(["--quiet", "sweep", str(cfg), "--densities", "0.4", "--output", str(out), "--jobs", "2"]) == 0
    rows = list(csv.DictReader((out / "summary.csv").open()))
    assert len(rows) == 8
    assert list(rows[0]) == SUMMARY_COLUMNS
    assert len({(r["selector"], r["structure"], r["scope"]) for r in rows}) == 8


def test_pareto_matches_oracle(tmp_path):
    runs = tmp_path / "runs"
    base = dict(prune={"epochs": 3, "warmup_epochs": 1, "cooldown_epochs": 1})
    tasks = [{"id": t, "train_size": 32, "seed": s} for t, s in (("a", 1), ("b", 2))]
    for t in tasks:
        for d in (0.2, 0.5):
            p = _cfg(tmp_path, f"{t['id']}{d}.json", tasks=[t], **{"prune": {**base["prune"], "final_density": d}})
            assert main(["--quiet", "run", str(p), "--output", str(runs / f"{t['id']}_{d}")]) == 0
    for d in (0.2, 0.5):
        p = _cfg(tmp_path, f"mt{d}.json", tasks=tasks, **{"prune": {**base["prune"], "final_density": d}})
        assert main(["--quiet", "run", str(p), "--output", str(runs / f"mt_{d}")]) == 0
    out = tmp_path / "pareto"
    assert main(["--quiet", "pareto", str(runs), "--output", str(out)]) == 0
    by_task = {}
    for d in sorted(runs.iterdir()):
        if d.name.startswith("mt"):
            continue
        p = point_from_report(json.loads((d / "report.json").read_text()), d.name)
        (task, metric), = p.per_task
        by_task.setdefault(task, []).append((d.name, p.size, metric))
    oracle = brute_force_frontier(enumerate_mixtures(by_task))
    frontier = list(csv.DictReader((out / "frontier.csv").open()))
    assert len(frontier) == len(oracle)
    assert [float(r["size"]) for r in frontier] == pytest.approx([p.size for p in oracle])
    compare = list(csv.DictReader((out / "compare.csv").open()))
    assert len(compare) == 2

    figs = tmp_path / "figs"
    assert main(["--quiet", "figdata", str(runs), "--output", str(figs)]) == 0
    fig1 = list(csv.DictReader((figs / "fig1.csv").open()))
    assert len(fig1) == 8
    fig2 = list(csv.DictReader((figs / "fig2.csv").open()))
    assert {r["series"] for r in fig2} == {"mixture", "multitask"}


def test_missing_and_empty_inputs(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["figdata", str(empty)]) == 2
    assert main(["pareto", str(tmp_path / "nope")]) == 2
    assert "nope" in capsys.readouterr().err


def test_default_config_round_trip(tmp_path, capsys):
    assert main(["default-config"]) == 0
    text = capsys.readouterr().out
    parse_config(json.loads(text))
    target = tmp_path / "d.json"
    assert main(["default-config", "--output", str(target)]) == 0
    assert target.read_text() == text


def test_bench_command(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["--quiet", "bench", "--shapes", "32x48x8", "--ranks", "1,0.25", "--output", str(out)]) == 0
    assert len(list(csv.DictReader(out.open()))) == 2
    assert main(["bench", "--shapes", "32x48", "--output", str(out)]) == 2


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for cmd in ("run", "sweep", "pareto", "bench", "figdata", "default-config"):
        assert cmd in text
