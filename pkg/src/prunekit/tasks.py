"""Seeded synthetic tasks labeled by a planted teacher, plus metrics.

The teacher computes a latent feature vector from each input sequence,
``z = mean_s relu(x_s @ A)`` (standardized), where ``A`` has orthonormal
columns. A task mixes the shared latent with a private one according to its
``shared_fraction`` and reads labels off evenly spaced class directions in a
random plane of latent space. Per-class offsets are calibrated on a seeded
sample so that classes come out balanced.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._fs import atomic_write_json
from .errors import ContractViolation
from .linalg import read_matrix, write_matrix

KINDS = ("classification", "regression")
_RELU_MEAN = 1.0 / np.sqrt(2.0 * np.pi)
_RELU_VAR = 0.5 - 1.0 / (2.0 * np.pi)
CALIBRATION_SIZE = 20000


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: str = "classification"
    num_classes: int = 3
    train_size: int = 4096
    seed: int = 0
    shared_fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"task kind must be one of {KINDS}")
        if self.kind == "classification" and self.num_classes < 2:
            raise ContractViolation("classification tasks need at least 2 classes")
        if self.train_size < 1:
            raise ContractViolation("train_size must be positive")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ContractViolation("shared_fraction must be in [0, 1]")

    @property
    def num_outputs(self):
        return self.num_classes if self.kind == "classification" else 1

    def to_dict(self):
        return asdict(self)


def _orthonormal(rng, d, r):
    if r > d:
        raise ContractViolation(f"latent_dim {r} exceeds model_dim {d}")
    q, _ = np.linalg.qr(rng.standard_normal((d, r)))
    return q


@dataclass
class PlantedTeacher:
    model_dim: int
    seq_len: int
    latent_dim: int = 6
    noise_level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_level < 0:
            raise ContractViolation("noise_level must be non-negative")
        self.shared_weights = _orthonormal(np.random.default_rng([self.seed, 3]), self.model_dim, self.latent_dim)
        self._private = {}

    def private_weights(self, spec):
        """(private feature map, readout, per-output offsets) for a task."""
        if spec not in self._private:
            rng = np.random.default_rng([spec.seed, 2])
            a = _orthonormal(rng, self.model_dim, self.latent_dim)
            plane = _orthonormal(rng, self.latent_dim, 2)
            if spec.kind == "regression":
                readout = plane[:, :1]
            else:
                angles = 2.0 * np.pi * np.arange(spec.num_classes) / spec.num_classes
                readout = plane[:, :1] * np.cos(angles) + plane[:, 1:] * np.sin(angles)
            self._private[spec] = (a, readout, np.zeros(readout.shape[1]))
            if spec.kind == "classification":
                self._private[spec] = (a, readout, self._calibrate(spec))
        return self._private[spec]

    def _calibrate(self, spec, n=CALIBRATION_SIZE, iters=300):
        x = np.random.default_rng([spec.seed, 5]).standard_normal((n, self.seq_len, self.model_dim))
        out = self.task_outputs(x, spec)
        c = out.shape[1]
        offsets = np.zeros(c)
        for _ in range(iters):
            freq = np.bincount(np.argmax(out + offsets, axis=1), minlength=c) / n
            offsets -= 0.5 * (freq - 1.0 / c)
        return offsets

    def _latent(self, x, a):
        z = np.maximum(x @ a, 0.0).mean(axis=1)
        return (z - _RELU_MEAN) / np.sqrt(_RELU_VAR / self.seq_len)

    def task_outputs(self, x, spec):
        """Noise-free teacher logits (classification) or targets (regression)."""
        a_priv, readout, offsets = self.private_weights(spec)
        f = spec.shared_fraction
        z = np.sqrt(f) * self._latent(x, self.shared_weights)
        if f < 1.0:
            z = z + np.sqrt(1.0 - f) * self._latent(x, a_priv)
        return z @ readout + offsets

    def label(self, x, spec, noise=None):
        out = self.task_outputs(x, spec)
        if noise is not None:
            out = out + self.noise_level * noise.reshape(out.shape)
        if spec.kind == "regression":
            return out[:, 0]
        return np.argmax(out, axis=1)


@dataclass
class SyntheticDataset:
    task_id: str
    kind: str
    split: str
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


def _split(spec, teacher, n, split_idx, split):
    rng = np.random.default_rng([spec.seed, 10 + split_idx])
    x = rng.standard_normal((n, teacher.seq_len, teacher.model_dim))
    noise = np.random.default_rng([spec.seed, 20 + split_idx]).standard_normal((n, spec.num_outputs))
    y = teacher.label(x, spec, noise)
    return SyntheticDataset(spec.task_id, spec.kind, split, x, y)


def generate_task(spec, teacher, n_train=None, n_dev=1024):
    """(train, dev) datasets for one task; train and dev use separate seed streams."""
    n_train = spec.train_size if n_train is None else n_train
    if n_train < 1 or n_dev < 1:
        raise ContractViolation("dataset sizes must be positive")
    return _split(spec, teacher, n_train, 0, "train"), _split(spec, teacher, n_dev, 1, "dev")


def cache_key(spec, teacher, n_train, n_dev):
    payload = {
        "spec": spec.to_dict(),
        "teacher": [teacher.model_dim, teacher.seq_len, teacher.latent_dim, teacher.noise_level, teacher.seed],
        "sizes": [n_train, n_dev],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def save_dataset(directory, ds):
    directory = Path(directory)
    n = len(ds)
    write_matrix(directory / f"{ds.split}_inputs.pkmx", ds.inputs.reshape(n, -1))
    labels = ds.labels.tolist()
    atomic_write_json(directory / f"{ds.split}_labels.json", {"task_id": ds.task_id, "kind": ds.kind, "labels": labels})


def load_dataset(directory, split, seq_len, model_dim):
    directory = Path(directory)
    x = read_matrix(directory / f"{split}_inputs.pkmx").reshape(-1, seq_len, model_dim)
    meta = json.loads((directory / f"{split}_labels.json").read_text())
    dtype = np.int64 if meta["kind"] == "classification" else np.float64
    return SyntheticDataset(meta["task_id"], meta["kind"], split, x, np.asarray(meta["labels"], dtype=dtype))


def cached_generate(cache_dir, spec, teacher, n_train=None, n_dev=1024):
    """Like ``generate_task`` but reuses datasets stored under ``cache_dir``."""
    n_train = spec.train_size if n_train is None else n_train
    directory = Path(cache_dir) / cache_key(spec, teacher, n_train, n_dev)
    try:
        return tuple(load_dataset(directory, s, teacher.seq_len, teacher.model_dim) for s in ("train", "dev"))
    except (FileNotFoundError, ContractViolation, ValueError):
        pass
    pair = generate_task(spec, teacher, n_train, n_dev)
    for ds in pair:
        save_dataset(directory, ds)
    return pair


def accuracy(preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0:
        raise ContractViolation("empty input")
    if preds.shape != labels.shape:
        raise ContractViolation("preds and labels differ in length")
    return float(np.mean(preds == labels))


def pearson(preds, labels):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.size == 0:
        raise ContractViolation("empty input")
    if preds.shape != labels.shape:
        raise ContractViolation("preds and labels differ in length")
    if preds.std() == 0 or labels.std() == 0:
        return 0.0
    return float(np.corrcoef(preds, labels)[0, 1])


def task_metric(kind, preds, labels):
    return pearson(preds, labels) if kind == "regression" else accuracy(preds, labels)


def macro_average(metrics):
    values = list(metrics.values()) if isinstance(metrics, dict) else list(metrics)
    if not values:
        raise ContractViolation("empty input")
    return float(np.mean(values))
