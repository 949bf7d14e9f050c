"""Selection heuristics, sparsity schedule, top-k masks and rank pruning.

Layers are duck-typed: anything with ``structure`` ("element" or "rank"),
``mask``, ``scores`` and the weight tensors defined in :mod:`prunekit.nn`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractViolation

SELECTORS = ("magnitude", "movement")
STRUCTURES = ("element", "rank")
SCOPES = ("global", "local")
MASK_MODES = ("shared", "separate", "hybrid")


@dataclass(frozen=True)
class PruneConfig:
    selector: str = "magnitude"
    structure: str = "rank"
    scope: str = "local"
    final_density: float = 0.15
    epochs: int = 8
    warmup_epochs: int = 2
    cooldown_epochs: int = 2
    sigma_lr: float = 5e-3
    update_masked_weights: bool = False

    def __post_init__(self):
        if self.selector not in SELECTORS:
            raise ContractViolation(f"selector must be one of {SELECTORS}")
        if self.structure not in STRUCTURES:
            raise ContractViolation(f"structure must be one of {STRUCTURES}")
        if self.scope not in SCOPES:
            raise ContractViolation(f"scope must be one of {SCOPES}")
        if not 0.0 < self.final_density <= 1.0:
            raise ContractViolation("final_density must be in (0, 1]")
        if self.epochs < 1 or self.warmup_epochs < 0 or self.cooldown_epochs < 0:
            raise ContractViolation("epoch counts must be non-negative (epochs positive)")
        if self.warmup_epochs + self.cooldown_epochs >= self.epochs:
            raise ContractViolation("warmup_epochs + cooldown_epochs must be < epochs")

    @property
    def setting(self):
        return f"{self.selector}-{self.structure}-{self.scope}"

    @property
    def schedule(self):
        return SparsitySchedule(self.final_density, self.epochs, self.warmup_epochs, self.cooldown_epochs)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SparsitySchedule:
    k_final: float
    total_epochs: int
    warmup_epochs: int
    cooldown_epochs: int
    k_initial: float = 1.0

    def boundaries(self, total_steps):
        """(warmup end, cooldown start) in steps."""
        tw = self.warmup_epochs * total_steps / self.total_epochs
        tc = self.cooldown_epochs * total_steps / self.total_epochs
        return tw, total_steps - tc


def schedule_density(sched, t, total_steps):
    """Cubic ramp from 1 down to ``k_final`` between warmup end and cooldown start."""
    tw, tc_start = sched.boundaries(total_steps)
    span = tc_start - tw
    if span <= 0:
        p = 1.0 if t >= tw else 0.0
    else:
        p = min(max((t - tw) / span, 0.0), 1.0)
    if p >= 1.0:
        return sched.k_final
    return sched.k_final + (sched.k_initial - sched.k_final) * (1.0 - p) ** 3


def kept_count(k, n):
    """max(1, round(k * n)) with halves rounded up."""
    return max(1, int(math.floor(k * n + 0.5)))


def magnitude_scores(layer):
    if layer.structure == "rank":
        return np.abs(layer.sigma)
    return np.abs(layer.weight)


def _top_indices(flat, count):
    # stable sort on the negated scores: equal scores keep ascending index order
    return np.argsort(-flat, kind="stable")[:count]


def topk_mask(scores, k, scope="local"):
    """Binary masks keeping the top ``max(1, round(k*N))`` entries per pool.

    ``scores`` is one array or a list of arrays. Local scope pools each array
    on its own; global scope pools all of them. Ties go to the smallest flat
    index (in concatenation order for the global pool).
    """
    single = isinstance(scores, np.ndarray)
    tensors = [np.asarray(scores, dtype=np.float64)] if single else [np.asarray(s, dtype=np.float64) for s in scores]
    if not 0.0 < k <= 1.0:
        raise ContractViolation("kept fraction k must be in (0, 1]")
    if not tensors or sum(t.size for t in tensors) == 0:
        raise ContractViolation("empty pool")
    if scope == "local":
        masks = []
        for t in tensors:
            if t.size == 0:
                raise ContractViolation("empty pool")
            flat = np.zeros(t.size)
            flat[_top_indices(t.ravel(), kept_count(k, t.size))] = 1.0
            masks.append(flat.reshape(t.shape))
    elif scope == "global":
        pool = np.concatenate([t.ravel() for t in tensors])
        flat = np.zeros(pool.size)
        flat[_top_indices(pool, kept_count(k, pool.size))] = 1.0
        masks, start = [], 0
        for t in tensors:
            masks.append(flat[start : start + t.size].reshape(t.shape))
            start += t.size
    else:
        raise ContractViolation(f"unknown scope {scope!r}")
    return masks[0] if single else masks


def ste_backward(grad_wrt_masked, layer, task=None):
    """Straight-through gradients for ``W * M`` with ``M = TopK(S)``.

    The top-k is treated as the identity, so the score gradient is
    ``grad * W``. The weight gradient flows through the product: ``grad * M``.
    """
    g = np.asarray(grad_wrt_masked, dtype=np.float64)
    if g.shape != layer.weight.shape:
        raise ContractViolation(f"gradient shape {g.shape} != weight shape {layer.weight.shape}")
    return g * layer.mask_for(task), g * layer.weight


def factored_cost(m, n, rank):
    """Parameters needed to store a rank-``rank`` m x n layer, unfactorizing when cheaper."""
    return min(m * n, rank * (m + n))


def effective_param_count(layer):
    """Prunable parameters a layer really needs.

    Element-wise: kept entries. Rank: ``min(m*n, k'(m+n))``. With per-task
    masks the union over tasks is counted, since all of it must be stored.
    """
    mask = stored_mask(layer)
    if layer.structure == "rank":
        m, n = layer.shape
        return factored_cost(m, n, int(mask.sum()))
    return int(mask.sum())


def stored_mask(layer):
    masks = [layer.mask] + list(layer.task_masks.values())
    if len(masks) == 1:
        return layer.mask
    return np.maximum.reduce(masks)


def param_fraction(layers):
    dense = sum(l.dense_params for l in layers)
    return sum(effective_param_count(l) for l in layers) / dense


def rank_budget_local(layer, k):
    """Largest retained rank whose storage stays within ``k`` of the dense layer."""
    m, n = layer.shape
    full = layer.rank
    budget = k * m * n
    if budget >= m * n - 1e-9:
        return full
    return int(min(full, max(1, math.floor(budget / (m + n) + 1e-9))))


def rank_masks(layers, scores, k, scope):
    """Rank-dimension masks meeting a parameter budget of ``k`` per pool.

    Local: each layer keeps its top ``rank_budget_local`` dimensions. Global:
    every layer keeps its best dimension, then dimensions are admitted in
    descending score order (ties by pooled index) whenever the total
    effective parameter count stays within ``k`` of the dense total.
    """
    if scope == "local":
        out = []
        for layer, s in zip(layers, scores):
            mask = np.zeros(s.shape[0])
            mask[_top_indices(np.asarray(s, dtype=np.float64), rank_budget_local(layer, k))] = 1.0
            out.append(mask)
        return out
    if scope != "global":
        raise ContractViolation(f"unknown scope {scope!r}")
    shapes = [l.shape for l in layers]
    budget = k * sum(m * n for m, n in shapes) + 1e-9
    ranks = [0] * len(layers)
    masks = [np.zeros(np.asarray(s).shape[0]) for s in scores]
    owner = np.concatenate([np.full(len(s), i) for i, s in enumerate(scores)])
    local = np.concatenate([np.arange(len(s)) for s in scores])
    pool = np.concatenate([np.asarray(s, dtype=np.float64) for s in scores])
    order = np.argsort(-pool, kind="stable")
    for pos in order:
        i = owner[pos]
        if ranks[i] == 0:
            masks[i][local[pos]] = 1.0
            ranks[i] = 1
    total = sum(factored_cost(m, n, r) for (m, n), r in zip(shapes, ranks))
    for pos in order:
        i, j = owner[pos], local[pos]
        if masks[i][j]:
            continue
        m, n = shapes[i]
        extra = factored_cost(m, n, ranks[i] + 1) - factored_cost(m, n, ranks[i])
        if total + extra <= budget:
            masks[i][j] = 1.0
            ranks[i] += 1
            total += extra
    return masks


def select_masks(layers, scores, k, scope):
    if not layers:
        raise ContractViolation("empty pool")
    if layers[0].structure == "rank":
        return rank_masks(layers, scores, k, scope)
    return topk_mask(list(scores), k, scope)


def rank_prune(layer, keep, scores=None):
    """Compact a factored layer to its ``keep`` top-scored rank dimensions.

    Scores default to the singular-value magnitudes. Kept dimensions keep
    their relative order.
    """
    if keep < 1:
        raise ContractViolation("must keep at least one rank dimension")
    if keep > layer.rank:
        raise ContractViolation(f"cannot keep {keep} of {layer.rank} rank dimensions")
    s = magnitude_scores(layer) if scores is None else np.asarray(scores, dtype=np.float64)
    layer.compact(np.sort(_top_indices(s, keep)))
    return layer


def selection_scores(layer, selector, task=None):
    if selector == "magnitude":
        return magnitude_scores(layer)
    if task is not None:
        return layer.task_scores[task]
    return layer.scores


def init_scores(model, config, mask_mode="shared", task_ids=()):
    """Attach learnable scores for movement selection.

    Element-wise scores start at zero; rank scores start at the singular values.
    """
    if config.selector == "magnitude":
        if mask_mode != "shared":
            raise ContractViolation("separate/hybrid masks need movement selection")
        return
    for layer in model.prunable_layers():
        init = layer.sigma.copy() if layer.structure == "rank" else np.zeros_like(layer.weight)
        layer.scores = init.copy() if mask_mode in ("shared", "hybrid") else None
        if mask_mode in ("separate", "hybrid"):
            layer.task_scores = {t: init.copy() for t in task_ids}


def apply_prune_step(model, config, k, mask_mode="shared", compact=False, optimizer=None):
    """Recompute every mask for kept fraction ``k``.

    Element-wise masks are recomputed from scratch each call, so entries can
    come back. Rank masks are soft until ``compact`` is set, at which point
    pruned dimensions are dropped (and their optimizer moments with them);
    compacted layers are left alone afterwards.
    """
    layers = model.prunable_layers()
    if config.structure == "rank" and all(getattr(l, "compacted", False) for l in layers):
        return
    if mask_mode in ("shared", "hybrid"):
        shared = select_masks(layers, [selection_scores(l, config.selector) for l in layers], k, config.scope)
        for layer, mask in zip(layers, shared):
            layer.mask = mask
    if mask_mode in ("separate", "hybrid"):
        task_ids = list(layers[0].task_scores)
        for t in task_ids:
            own = select_masks(layers, [l.task_scores[t] for l in layers], k, config.scope)
            for layer, mask in zip(layers, own):
                layer.task_masks[t] = mask if mask_mode == "separate" else np.maximum(layer.mask, mask)
        if mask_mode == "separate":
            for layer in layers:
                layer.mask = np.maximum.reduce(list(layer.task_masks.values()))
    if compact and config.structure == "rank":
        for layer in layers:
            keep = np.flatnonzero(stored_mask(layer) > 0)
            layer.compact(keep)
            if optimizer is not None:
                for pname, axis in (("u", 1), ("sigma", 0), ("v", 0), ("scores", 0)):
                    optimizer.select(f"{layer.name}.{pname}", keep, axis)
                for t in layer.task_scores:
                    optimizer.select(f"{layer.name}.scores@{t}", keep, 0)

