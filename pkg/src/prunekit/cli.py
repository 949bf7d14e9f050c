"""Command-line entry point: ``prunekit {run,sweep,pareto,bench,figdata,default-config}``.

Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import bench
from ._fs import atomic_write_json, atomic_write_text, dumps_json
from .checkpoint import save_checkpoint
from .config import default_config, load_config, parse_config
from .errors import ConfigError, ContractViolation, NumericalFailure
from .experiments import budget_compare, enumerate_mixtures, pareto_frontier, point_from_report, run_experiment
from .pruning import SCOPES, SELECTORS, STRUCTURES

log = logging.getLogger("prunekit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SUMMARY_COLUMNS = [
    "run_id", "selector", "structure", "scope", "final_density", "task_id",
    "dev_metric", "macro", "param_fraction", "seed", "wall_clock_s",
]
ALL_SETTINGS = [(s, st, sc) for s in SELECTORS for st in STRUCTURES for sc in SCOPES]


class InputError(Exception):
    """Missing or unusable input paths (exit code 2)."""


def _csv(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def run_id_for(cfg):
    p = cfg.prune
    tasks = "-".join(t.id for t in cfg.tasks)
    return f"{tasks}_{p.selector}-{p.structure}-{p.scope}_d{p.final_density:g}_s{cfg.training.seed}"


def write_run(result, cfg, out_dir):
    out_dir = Path(out_dir)
    save_checkpoint(result.model, out_dir / "checkpoint", cfg.prune_config())
    atomic_write_json(out_dir / "timing.json", {"wall_clock_s": result.wall_clock_s})
    atomic_write_json(out_dir / "report.json", result.report)


def _execute(cfg, out_dir, quiet=True):
    progress = None
    if not quiet:
        progress = lambda e: log.info("epoch %d density %.4f params %.4f dev %s", e["epoch"], e["density"],
                                      e["param_fraction"], {k: round(v, 4) for k, v in e["dev_metric"].items()})
    try:
        result = run_experiment(cfg, progress=progress)
    except NumericalFailure as exc:
        if exc.report is not None:
            atomic_write_json(Path(out_dir) / "failure.json", exc.report)
        raise
    write_run(result, cfg, out_dir)
    return result


def cmd_run(args):
    cfg = load_config(args.config_path or args.config, seed=args.seed)
    out_dir = Path(args.output or cfg.output_dir)
    result = _execute(cfg, out_dir, args.quiet)
    final = result.report["final"]
    print(f"{out_dir / 'report.json'}: macro={final['macro']:.4f} param_fraction={final['param_fraction']:.4f}")
    return EXIT_OK


def _sweep_job(job):
    cfg_dict, out_dir = job
    cfg = parse_config(cfg_dict)
    result = _execute(cfg, out_dir)
    return result.report, result.wall_clock_s


def summary_rows(run_id, report, wall_clock_s):
    p = report["config"]["prune"]
    final = report["final"]
    rows = []
    for task_id, metric in sorted(final["dev_metric"].items()):
        rows.append({
            "run_id": run_id, "selector": p["selector"], "structure": p["structure"], "scope": p["scope"],
            "final_density": p["final_density"], "task_id": task_id, "dev_metric": metric,
            "macro": final["macro"], "param_fraction": final["param_fraction"], "seed": report["seed"],
            "wall_clock_s": wall_clock_s,
        })
    return rows


def cmd_sweep(args):
    base = load_config(args.config_path or args.config, seed=args.seed)
    densities = _floats(args.densities) if args.densities else [base.prune.final_density]
    seeds = _ints(args.seeds) if args.seeds else [base.training.seed]
    settings = ALL_SETTINGS
    if args.settings:
        settings = [tuple(s.split("-")) for s in args.settings.split(",")]
        for s in settings:
            if s not in ALL_SETTINGS:
                raise ConfigError(f"unknown setting {'-'.join(s)!r}")
    out = Path(args.output or base.output_dir)
    jobs = []
    for selector, structure, scope in settings:
        for d in densities:
            for seed in seeds:
                data = base.canonical()
                data["prune"].update(selector=selector, structure=structure, scope=scope, final_density=d)
                data["training"]["seed"] = seed
                if selector == "magnitude":
                    data["mask_mode"] = "shared"
                cfg = parse_config(data)
                rid = run_id_for(cfg)
                jobs.append((rid, (cfg.canonical(), str(out / "runs" / rid))))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_job, [j for _, j in jobs]))
    else:
        results = [_sweep_job(j) for _, j in jobs]
    rows = []
    for (rid, _), (report, wall) in zip(jobs, results):
        rows.extend(summary_rows(rid, report, wall))
    atomic_write_text(out / "summary.csv", _csv(rows, SUMMARY_COLUMNS))
    print(f"{out / 'summary.csv'}: {len(rows)} rows from {len(jobs)} runs")
    return EXIT_OK


def find_reports(paths):
    """Every report.json under the given paths (a run dir or a tree of them)."""
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise InputError("missing run paths: " + ", ".join(missing))
    found = []
    for p in paths:
        p = Path(p)
        found.extend([p] if p.is_file() else sorted(p.rglob("report.json")))
    if not found:
        raise InputError("no report.json found under: " + ", ".join(str(p) for p in paths))
    reports = []
    for f in found:
        try:
            reports.append((f.parent.name, json.loads(f.read_text())))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"unreadable report {f}: {exc}") from None
    return reports


def split_runs(reports):
    """(single-task runs grouped by task, multitask budget points)."""
    by_task, multitask = {}, []
    for run_id, rep in reports:
        point = point_from_report(rep, run_id)
        if point.kind == "single":
            (task_id, metric), = point.per_task
            by_task.setdefault(task_id, []).append((run_id, point.size, metric))
        else:
            multitask.append(point)
    return by_task, multitask


def pareto_tables(reports):
    by_task, multitask = split_runs(reports)
    if not by_task:
        raise InputError("no single-task runs to build mixtures from")
    if multitask:
        tasks = sorted(multitask[0].per_task_dict())
        missing = [t for t in tasks if t not in by_task]
        if missing:
            raise InputError("no single-task runs for tasks: " + ", ".join(missing))
        by_task = {t: by_task[t] for t in tasks}
    mixtures = enumerate_mixtures(by_task)
    frontier = pareto_frontier(mixtures)
    compare = budget_compare(multitask, frontier) if multitask else []
    return mixtures, frontier, compare


def _point_row(p):
    row = {"size": p.size, "metric": p.metric, "runs": ";".join(p.provenance)}
    row.update({f"task:{t}": m for t, m in p.per_task})
    return row


def cmd_pareto(args):
    reports = find_reports(args.runs)
    mixtures, frontier, compare = pareto_tables(reports)
    out = Path(args.output or "pareto")
    task_cols = [f"task:{t}" for t, _ in frontier[0].per_task]
    atomic_write_text(out / "frontier.csv", _csv([_point_row(p) for p in frontier], ["size", "metric", "runs"] + task_cols))
    rows = []
    for r in compare:
        row = {k: r.get(k) for k in ("budget", "multitask_run", "multitask_macro", "mixture_size", "mixture_macro", "delta", "flagged")}
        row.update({f"delta:{t}": d for t, d in r.get("per_task_delta", {}).items()})
        rows.append(row)
    cols = ["budget", "multitask_run", "multitask_macro", "mixture_size", "mixture_macro", "delta", "flagged"]
    cols += [f"delta:{t}" for t, _ in frontier[0].per_task]
    atomic_write_text(out / "compare.csv", _csv(rows, cols))
    print(f"{len(mixtures)} mixtures, {len(frontier)} on the frontier, {len(compare)} multitask comparisons -> {out}")
    return EXIT_OK


def cmd_figdata(args):
    reports = find_reports(args.runs)
    out = Path(args.output or "figdata")
    fig1 = []
    for run_id, rep in reports:
        final = rep["final"]
        for task_id, metric in sorted(final["dev_metric"].items()):
            fig1.append({"setting": rep["setting"], "task_id": task_id, "density": rep["config"]["prune"]["final_density"],
                         "param_fraction": final["param_fraction"], "metric": metric, "seed": rep["seed"], "run_id": run_id})
    fig1.sort(key=lambda r: (r["setting"], r["task_id"], r["density"], r["seed"]))
    atomic_write_text(out / "fig1.csv", _csv(fig1, ["setting", "task_id", "density", "param_fraction", "metric", "seed", "run_id"]))
    fig2 = []
    by_task, multitask = split_runs(reports)
    if by_task and multitask:
        _, frontier, _ = pareto_tables(reports)
        fig2 += [{"series": "mixture", "budget": p.size, "macro": p.metric} for p in frontier]
    fig2 += [{"series": "multitask", "budget": p.size, "macro": p.metric} for p in sorted(multitask, key=lambda p: p.size)]
    atomic_write_text(out / "fig2.csv", _csv(fig2, ["series", "budget", "macro"]))
    print(f"fig1.csv: {len(fig1)} rows, fig2.csv: {len(fig2)} rows -> {out}")
    return EXIT_OK


def _shape(text):
    try:
        m, n, l = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"shape must look like MxNxL, got {text!r}") from None
    return m, n, l


def cmd_bench(args):
    shapes = [_shape(s) for s in args.shapes.split(",")]
    fractions = _floats(args.ranks)
    try:
        results = bench.bench_grid(shapes, fractions, reps=args.reps, warmup=args.warmup, threads=args.threads)
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from None
    text = bench.to_csv(results)
    if args.output:
        atomic_write_text(args.output, text)
    else:
        sys.stdout.write(text)
    if not args.quiet:
        for m, n, l in shapes:
            ctrl = bench.dense_control(m, n, l, reps=args.reps, warmup=args.warmup, threads=args.threads)
            print(f"# dense control {m}x{n}x{l}: relative {ctrl:.3f} (float32)", file=sys.stderr)
    return EXIT_OK


def cmd_default_config(args):
    text = dumps_json(default_config().canonical())
    if args.output:
        atomic_write_text(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="prunekit", description=__doc__.splitlines()[0])
    parser.add_argument("--quiet", action="store_true", help="only print the final summary line")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("config_path", nargs="?", help="experiment config (JSON)")
        p.add_argument("--config", help="experiment config (JSON), same as the positional argument")
        p.add_argument("--seed", type=int, help="override training seed (beats PRUNEKIT_SEED and the file)")
        p.add_argument("--output", help="output directory (default: config output_dir)")
        p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("run", help="train one pruned model, write report.json + checkpoint")
    config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run every pruning setting over densities and seeds; write summary.csv")
    config_args(p)
    p.add_argument("--densities", help="comma-separated final densities (default: config value)")
    p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    p.add_argument("--settings", help="comma-separated selector-structure-scope triples (default: all 8)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pareto", help="mixture Pareto frontier and multitask budget comparison")
    p.add_argument("runs", nargs="+", help="run directories (searched recursively for report.json)")
    p.add_argument("--output", help="output directory (default: ./pareto)")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("bench", help="dense vs. factored latency grid (CSV)")
    p.add_argument("--shapes", default="768x3072x128", help="comma-separated MxNxL shapes")
    p.add_argument("--ranks", default="1.0,0.9,0.75,0.6,0.45,0.3,0.2,0.1,0.05", help="retained-rank fractions")
    p.add_argument("--reps", type=int, default=bench.MIN_REPS)
    p.add_argument("--warmup", type=int, default=bench.MIN_WARMUP)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--output", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("figdata", help="per-figure CSVs: density-vs-metric and budget-vs-macro series")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--output", help="output directory (default: ./figdata)")
    p.set_defaults(func=cmd_figdata)

    p = sub.add_parser("default-config", help="print the default (3-task) experiment config")
    p.add_argument("--output", help="write to this path instead of stdout")
    p.set_defaults(func=cmd_default_config)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    if args.command in ("run", "sweep") and not (args.config_path or args.config):
        parser.error(f"{args.command} needs a config file")
    try:
        return args.func(args)
    except (ConfigError, InputError, ContractViolation) as exc:
        print(f"prunekit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"prunekit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
