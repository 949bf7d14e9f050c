"""Experiment configuration: strict JSON schema, presets and seed precedence."""
from __future__ import annotations

import json
import os
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, ContractViolation
from .nn import EncoderConfig
from .pruning import PruneConfig
from .tasks import PlantedTeacher, TaskSpec

SEED_ENV = "PRUNEKIT_SEED"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    num_layers: int = Field(2, ge=1)
    model_dim: int = Field(64, ge=1)
    ffn_dim: int = Field(128, ge=1)
    num_heads: int = Field(4, ge=1)
    seq_len: int = Field(16, ge=1)

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.model_dim % self.num_heads:
            raise ValueError("num_heads must divide model_dim")
        return self


class PruneSection(_Strict):
    selector: Literal["magnitude", "movement"] = "magnitude"
    structure: Literal["element", "rank"] = "rank"
    scope: Literal["global", "local"] = "local"
    final_density: float = Field(0.15, gt=0.0, le=1.0)
    epochs: int = Field(8, ge=1)
    warmup_epochs: int = Field(2, ge=0)
    cooldown_epochs: int = Field(2, ge=0)
    sigma_lr: float = Field(5e-3, gt=0.0)
    update_masked_weights: bool = False

    @model_validator(mode="after")
    def _schedule_fits(self):
        if self.warmup_epochs + self.cooldown_epochs >= self.epochs:
            raise ValueError("warmup_epochs + cooldown_epochs must be < epochs")
        return self


class TaskSection(_Strict):
    id: str
    kind: Literal["classification", "regression"] = "classification"
    num_classes: int = Field(3, ge=1)
    train_size: int = Field(4096, ge=1)
    seed: int = Field(0, ge=0)
    shared_fraction: float = Field(1.0, ge=0.0, le=1.0)


class TeacherSection(_Strict):
    latent_dim: int = Field(6, ge=1)
    noise_level: float = Field(0.0, ge=0.0)
    seed: int = Field(0, ge=0)


class TrainingSection(_Strict):
    batch_size: int = Field(32, ge=1)
    lr_weights: float = Field(1e-3, gt=0.0)
    lr_scores: float = Field(1e-2, gt=0.0)
    lr_heads: float = Field(1e-3, gt=0.0)
    seed: int = Field(0, ge=0)
    epochs: Optional[int] = Field(None, ge=1)
    dev_size: int = Field(1024, ge=1)
    prune_every: int = Field(8, ge=1)


class ExperimentConfig(_Strict):
    model: ModelSection = ModelSection()
    prune: PruneSection = PruneSection()
    tasks: List[TaskSection] = Field(default_factory=lambda: [TaskSection(id="a")], min_length=1)
    teacher: TeacherSection = TeacherSection()
    mask_mode: Literal["shared", "separate", "hybrid"] = "shared"
    training: TrainingSection = TrainingSection()
    output_dir: str = "runs/run"

    @model_validator(mode="after")
    def _consistent(self):
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique")
        for t in self.tasks:
            if t.kind == "classification" and t.num_classes < 2:
                raise ValueError(f"task {t.id!r}: classification needs num_classes >= 2")
        if self.mask_mode != "shared" and self.prune.selector == "magnitude":
            raise ValueError("separate/hybrid mask modes need the movement selector")
        if self.teacher.latent_dim > self.model.model_dim:
            raise ValueError("teacher latent_dim exceeds model_dim")
        if self.training.epochs is not None and self.prune.warmup_epochs + self.prune.cooldown_epochs >= self.training.epochs:
            raise ValueError("training.epochs override leaves no room for the pruning ramp")
        return self

    # conversions to the core types

    def encoder_config(self):
        return EncoderConfig(seed=self.training.seed, **self.model.model_dump())

    def prune_config(self):
        d = self.prune.model_dump()
        if self.training.epochs is not None:
            d["epochs"] = self.training.epochs
        return PruneConfig(**d)

    def task_specs(self):
        return [
            TaskSpec(t.id, t.kind, t.num_classes, t.train_size, t.seed, t.shared_fraction)
            for t in self.tasks
        ]

    def teacher_model(self):
        return PlantedTeacher(self.model.model_dim, self.model.seq_len, **self.teacher.model_dump())

    def canonical(self):
        return self.model_dump(mode="json")

    def with_seed(self, seed):
        return self.model_copy(update={"training": self.training.model_copy(update={"seed": int(seed)})})


def parse_config(data):
    """Validate a config mapping; raises ``ConfigError`` with a readable message."""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, seed=None, env=None):
    """Read a JSON config and apply seed precedence: flag > PRUNEKIT_SEED > file."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    cfg = parse_config(data)
    env = os.environ if env is None else env
    if seed is None and env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    if seed is not None:
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg = cfg.with_seed(seed)
    return cfg


def three_task_preset(seed=0, final_density=0.15, shared_fraction=1.0, train_size=4096, **prune):
    """Three 3-class tasks sharing one planted teacher."""
    return parse_config(
        {
            "prune": {"final_density": final_density, **prune},
            "tasks": [
                {"id": f"t{i}", "train_size": train_size, "seed": 1000 * seed + 11 * i + 1, "shared_fraction": shared_fraction}
                for i in range(3)
            ],
            "teacher": {"seed": seed},
            "training": {"seed": seed},
            "output_dir": f"runs/three_task_s{seed}",
        }
    )


def nine_task_preset(seed=0, final_density=0.15, **prune):
    """Nine tasks with a skewed size mix: two low-resource, one binary, one regression."""
    sizes = [4096, 2048, 4096, 2048, 1536, 256, 512, 256, 768]
    kinds = ["classification"] * 6 + ["regression"] + ["classification"] * 2
    classes = [3, 3, 2, 2, 2, 2, 1, 2, 2]
    tasks = []
    for i, (n, kind, c) in enumerate(zip(sizes, kinds, classes)):
        tasks.append({"id": f"t{i}", "kind": kind, "num_classes": c if kind == "classification" else 1,
                      "train_size": n, "seed": 1000 * seed + 11 * i + 1})
    return parse_config(
        {
            "prune": {"final_density": final_density, **prune},
            "tasks": tasks,
            "teacher": {"seed": seed},
            "training": {"seed": seed},
            "output_dir": f"runs/nine_task_s{seed}",
        }
    )


def single_task(cfg, task_id, final_density=None):
    """The same experiment restricted to one task (a mixture member)."""
    tasks = [t for t in cfg.tasks if t.id == task_id]
    if not tasks:
        raise ContractViolation(f"unknown task {task_id!r}")
    prune = cfg.prune if final_density is None else cfg.prune.model_copy(update={"final_density": final_density})
    return cfg.model_copy(update={"tasks": tasks, "prune": prune, "mask_mode": "shared"})


def default_config():
    return three_task_preset()
