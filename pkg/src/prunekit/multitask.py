"""Task registry, uniform task sampling, mask modes and the multitask training step."""
from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .nn import loss_and_backward
from .pruning import MASK_MODES, topk_mask


class TaskRegistry:
    """Ordered collection of ``TaskSpec`` objects with unique ids."""

    def __init__(self, specs=()):
        self._specs = {}
        for s in specs:
            self.add(s)

    def add(self, spec):
        if spec.task_id in self._specs:
            raise ContractViolation(f"duplicate task_id {spec.task_id!r}")
        self._specs[spec.task_id] = spec

    @property
    def task_ids(self):
        return list(self._specs)

    def __getitem__(self, task_id):
        return self._specs[task_id]

    def __iter__(self):
        return iter(self._specs.values())

    def __len__(self):
        return len(self._specs)


def sample_task(registry, rng):
    """Pick one task id uniformly at random."""
    ids = registry.task_ids if isinstance(registry, TaskRegistry) else list(registry)
    if not ids:
        raise ContractViolation("empty registry")
    return ids[int(rng.integers(len(ids)))]


def task_mask(mode, shared_scores, task_scores, k, scope="local"):
    """Binary mask for one task under the shared, separate or hybrid mode.

    Hybrid takes the entrywise max (union) of the shared and the task's own
    top-k masks, each computed at the same kept fraction ``k``.
    """
    if mode not in MASK_MODES:
        raise ContractViolation(f"unknown mask mode {mode!r}")
    if mode == "shared":
        return topk_mask(shared_scores, k, scope)
    if task_scores is None:
        raise ContractViolation(f"{mode} mode needs task scores")
    own = topk_mask(task_scores, k, scope)
    if mode == "separate":
        return own
    shared = topk_mask(shared_scores, k, scope)
    if isinstance(shared, list):
        return [np.maximum(a, b) for a, b in zip(shared, own)]
    return np.maximum(shared, own)


class BatchSource:
    """Per-task mini-batches drawn from reshuffled passes over each training set."""

    def __init__(self, datasets, batch_size, seed):
        self.datasets = datasets
        self.batch_size = batch_size
        self._rngs = {t: np.random.default_rng([seed, 7, i]) for i, t in enumerate(datasets)}
        self._order = {t: np.empty(0, dtype=int) for t in datasets}

    def next_batch(self, task_id):
        ds = self.datasets[task_id]
        order = self._order[task_id]
        if order.size == 0:
            order = self._rngs[task_id].permutation(len(ds))
        idx, self._order[task_id] = order[: self.batch_size], order[self.batch_size :]
        return ds.inputs[idx], ds.labels[idx]


def multitask_step(model, registry, batches, optimizer, lr_map, rng):
    """Sample a task, take one optimizer step on its loss. Returns (task_id, loss, grads).

    Only the sampled task's head (and its own scores, in separate/hybrid
    modes) receive gradients; the shared encoder always does.
    """
    task_id = sample_task(registry, rng)
    if task_id not in model.heads:
        raise ContractViolation(f"model has no head for task {task_id!r}")
    loss, grads = loss_and_backward(model, batches.next_batch(task_id), task_id)
    optimizer.step(model, grads, lr_map)
    return task_id, loss, grads
