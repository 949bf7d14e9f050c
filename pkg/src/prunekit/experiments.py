"""Training runs with iterative pruning, mixtures of single-task runs, Pareto analysis."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericalFailure
from .multitask import BatchSource, TaskRegistry, multitask_step
from .nn import Adam, Encoder, predict
from .pruning import apply_prune_step, init_scores, param_fraction, schedule_density
from .tasks import cached_generate, generate_task, macro_average, task_metric

log = logging.getLogger(__name__)

METRIC_NOTE = "classification tasks report plain accuracy (not averaged F1); regression tasks report Pearson r"


def fingerprint(cfg):
    payload = cfg.canonical()
    payload.pop("output_dir", None)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def build_datasets(cfg, cache_dir=None):
    teacher = cfg.teacher_model()
    out = {}
    for spec in cfg.task_specs():
        if cache_dir is None:
            out[spec.task_id] = generate_task(spec, teacher, n_dev=cfg.training.dev_size)
        else:
            out[spec.task_id] = cached_generate(cache_dir, spec, teacher, n_dev=cfg.training.dev_size)
    return out


def build_model(cfg):
    prune = cfg.prune_config()
    model = Encoder.init(cfg.encoder_config(), prune.structure)
    model.update_masked_weights = prune.update_masked_weights
    for i, spec in enumerate(cfg.task_specs()):
        model.add_head(spec.task_id, spec.num_outputs, spec.kind, index=i)
    init_scores(model, prune, cfg.mask_mode, [t.id for t in cfg.tasks])
    return model


def evaluate(model, datasets, split="dev"):
    metrics = {}
    for task_id, pair in datasets.items():
        ds = pair[1] if split == "dev" else pair[0]
        metrics[task_id] = task_metric(ds.kind, predict(model, ds.inputs, task_id), ds.labels)
    return metrics


@dataclass
class RunResult:
    report: dict
    model: Encoder
    wall_clock_s: float = 0.0
    extra: dict = field(default_factory=dict)


def run_experiment(cfg, datasets=None, cache_dir=None, progress=None):
    """Train with iterative pruning and return a ``RunResult``.

    One epoch is ``sum(ceil(train_size / batch_size))`` steps; each step
    samples a task uniformly. Masks are refreshed every ``prune_every`` steps
    and at every epoch end, with the kept fraction taken from the cubic
    schedule. The report holds no timing so it is byte-reproducible; wall
    clock time is returned separately.
    """
    start = time.perf_counter()
    prune = cfg.prune_config()
    tr = cfg.training
    if datasets is None:
        datasets = build_datasets(cfg, cache_dir)
    registry = TaskRegistry(cfg.task_specs())
    model = build_model(cfg)
    optimizer = Adam()
    lr_map = {"weights": tr.lr_weights, "heads": tr.lr_heads, "sigma": prune.sigma_lr, "scores": tr.lr_scores}
    batches = BatchSource({t: datasets[t][0] for t in registry.task_ids}, tr.batch_size, tr.seed)
    rng = np.random.default_rng([tr.seed, 8])
    sched = prune.schedule
    steps_per_epoch = sum(-(-datasets[t][0].inputs.shape[0] // tr.batch_size) for t in registry.task_ids)
    total = prune.epochs * steps_per_epoch
    _, cooldown_start = sched.boundaries(total)
    layers = model.prunable_layers()

    def prune_to(t):
        k = schedule_density(sched, t, total)
        compact = prune.structure == "rank" and t >= cooldown_start
        apply_prune_step(model, prune, k, cfg.mask_mode, compact=compact, optimizer=optimizer)
        return k

    report = {
        "fingerprint": fingerprint(cfg),
        "config": cfg.canonical(),
        "setting": prune.setting,
        "seed": tr.seed,
        "metric_note": METRIC_NOTE,
        "steps_per_epoch": steps_per_epoch,
        "epochs": [],
    }
    step = 0
    for epoch in range(prune.epochs):
        losses = {t: [] for t in registry.task_ids}
        for _ in range(steps_per_epoch):
            if step % tr.prune_every == 0:
                prune_to(step)
            try:
                task_id, loss, _ = multitask_step(model, registry, batches, optimizer, lr_map, rng)
            except NumericalFailure as exc:
                report["failure"] = {"epoch": epoch, "step": step, "message": str(exc),
                                     "last_good_epoch": epoch - 1}
                raise NumericalFailure(str(exc), report) from None
            losses[task_id].append(loss)
            step += 1
        k = prune_to(step)
        dev = evaluate(model, datasets)
        report["epochs"].append(
            {
                "epoch": epoch + 1,
                "step": step,
                "density": k,
                "param_fraction": param_fraction(layers),
                "train_loss": {t: (float(np.mean(v)) if v else None) for t, v in losses.items()},
                "dev_metric": dev,
            }
        )
        if progress is not None:
            progress(report["epochs"][-1])
    final = report["epochs"][-1]
    report["final"] = {
        "param_fraction": final["param_fraction"],
        "density": final["density"],
        "dev_metric": final["dev_metric"],
        "macro": macro_average(final["dev_metric"]),
        "retained_ranks": {l.name: l.retained_rank for l in layers} if prune.structure == "rank" else None,
        "seed": tr.seed,
    }
    return RunResult(report=report, model=model, wall_clock_s=time.perf_counter() - start)


@dataclass(frozen=True)
class BudgetPoint:
    """A (size, metric) point: one multitask run or a mixture of single-task runs.

    ``size`` is a fraction of one dense encoder's prunable parameters, so a
    mixture can exceed 1. ``per_task`` maps each task to the metric used for it.
    """

    size: float
    metric: float
    provenance: tuple = ()
    kind: str = "mixture"
    per_task: tuple = ()

    def per_task_dict(self):
        return dict(self.per_task)


def point_from_report(report, run_id=None):
    final = report["final"]
    per_task = tuple(sorted(final["dev_metric"].items()))
    kind = "multitask" if len(per_task) > 1 else "single"
    return BudgetPoint(final["param_fraction"], final["macro"], (run_id or report["fingerprint"],), kind, per_task)


def enumerate_mixtures(runs_by_task):
    """Every way of picking one single-task run per task.

    ``runs_by_task`` maps task id to a list of ``(run_id, size, own_metric)``.
    Mixture size is the sum of member sizes and its metric the unweighted mean
    of each member's metric on its own task.
    """
    if not runs_by_task:
        raise ContractViolation("no tasks given")
    tasks = sorted(runs_by_task)
    for t in tasks:
        if not runs_by_task[t]:
            raise ContractViolation(f"task {t!r} has no runs")
    points = []
    for combo in itertools.product(*(runs_by_task[t] for t in tasks)):
        size = float(sum(c[1] for c in combo))
        metric = float(np.mean([c[2] for c in combo]))
        per_task = tuple((t, float(c[2])) for t, c in zip(tasks, combo))
        points.append(BudgetPoint(size, metric, tuple(c[0] for c in combo), "mixture", per_task))
    return points


def dominates(a, b):
    return a.size <= b.size and a.metric >= b.metric and (a.size < b.size or a.metric > b.metric)


def pareto_frontier(points):
    """Non-dominated points sorted by size; exact (size, metric) duplicates keep the first."""
    points = list(points)
    if not points:
        raise ContractViolation("empty input")
    order = sorted(range(len(points)), key=lambda i: (points[i].size, -points[i].metric, i))
    frontier, best = [], -np.inf
    for i in order:
        p = points[i]
        if p.metric > best:
            frontier.append(p)
            best = p.metric
    return frontier


def budget_compare(multitask_points, frontier, tol=0.0):
    """Pair each multitask point with the best frontier mixture of size <= its budget.

    Rows whose budget is below every mixture are flagged rather than raising.
    """
    multitask_points = list(multitask_points)
    frontier = sorted(frontier, key=lambda p: (p.size, -p.metric))
    if not multitask_points or not frontier:
        raise ContractViolation("empty input")
    rows = []
    for mt in sorted(multitask_points, key=lambda p: p.size):
        fits = [p for p in frontier if p.size <= mt.size + tol]
        row = {"budget": mt.size, "multitask_macro": mt.metric, "multitask_run": mt.provenance[0] if mt.provenance else None}
        if not fits:
            row.update(flagged=True, mixture_size=None, mixture_macro=None, delta=None, per_task_delta={})
        else:
            best = max(fits, key=lambda p: (p.metric, -p.size))
            mine, theirs = mt.per_task_dict(), best.per_task_dict()
            row.update(
                flagged=False,
                mixture_size=best.size,
                mixture_macro=best.metric,
                mixture_runs=list(best.provenance),
                delta=mt.metric - best.metric,
                per_task_delta={t: mine[t] - theirs[t] for t in sorted(mine) if t in theirs},
            )
        rows.append(row)
    return rows
