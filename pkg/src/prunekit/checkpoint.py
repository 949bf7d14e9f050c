"""Model checkpoints: one PKMX file per tensor plus a JSON manifest."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ._fs import atomic_write_json
from .errors import ContractViolation
from .linalg import read_matrix, write_matrix
from .nn import FAMILIES, Block, Encoder, EncoderConfig, FactoredLayer, PrunableLayer, TaskHead

MANIFEST = "manifest.json"


def _file_name(name):
    return name.replace("@", "__task__") + ".pkmx"


def _as_2d(a):
    return a.reshape(1, -1) if a.ndim == 1 else a


def save_checkpoint(model, directory, prune_config=None):
    directory = Path(directory)
    tensors = []

    def put(name, arr, group):
        write_matrix(directory / _file_name(name), _as_2d(arr))
        tensors.append({"name": name, "file": _file_name(name), "shape": list(arr.shape), "group": group})

    for name, arr, group in model.parameters():
        put(name, arr, group)
    layers = []
    for layer in model.prunable_layers():
        put(f"{layer.name}.mask", layer.mask, "mask")
        for t, mk in layer.task_masks.items():
            put(f"{layer.name}.mask@{t}", mk, "mask")
        entry = {"name": layer.name, "family": layer.family, "structure": layer.structure, "shape": list(layer.shape)}
        if layer.structure == "rank":
            entry.update(retained_rank=layer.retained_rank, stored_rank=layer.rank,
                         original_rank=layer.original_rank, compacted=layer.compacted)
        layers.append(entry)
    manifest = {
        "format": "prunekit-checkpoint/1",
        "encoder": model.config.to_dict(),
        "structure": model.structure,
        "update_masked_weights": model.update_masked_weights,
        "prune": None if prune_config is None else prune_config.to_dict(),
        "heads": [{"task_id": h.task_id, "kind": h.kind, "num_outputs": h.num_outputs} for h in model.heads.values()],
        "layers": layers,
        "tensors": tensors,
    }
    atomic_write_json(directory / MANIFEST, manifest)
    return directory


def load_checkpoint(directory):
    """Rebuild an ``Encoder`` (masks, scores and factors included) from disk."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except FileNotFoundError:
        raise ContractViolation(f"no checkpoint manifest in {directory}") from None
    tensors = {}
    for t in manifest["tensors"]:
        tensors[t["name"]] = read_matrix(directory / t["file"]).reshape(t["shape"]).astype(np.float64)
    cfg = EncoderConfig(**manifest["encoder"])
    info = {l["name"]: l for l in manifest["layers"]}
    blocks = []
    for i in range(cfg.num_layers):
        layers = {}
        for fam in FAMILIES:
            name = f"layers.{i}.{fam}"
            if info[name]["structure"] == "rank":
                layer = FactoredLayer(tensors[f"{name}.u"], tensors[f"{name}.sigma"], tensors[f"{name}.v"],
                                      tensors[f"{name}.bias"], fam, name)
                layer.original_shape = tuple(info[name]["shape"])
                layer.original_rank = info[name]["original_rank"]
                layer.compacted = info[name]["compacted"]
            else:
                layer = PrunableLayer(tensors[f"{name}.weight"], tensors[f"{name}.bias"], fam, name)
            layer.mask = tensors[f"{name}.mask"]
            layer.scores = tensors.get(f"{name}.scores")
            for key, arr in tensors.items():
                if key.startswith(f"{name}.scores@"):
                    layer.task_scores[key.split("@", 1)[1]] = arr
                elif key.startswith(f"{name}.mask@"):
                    layer.task_masks[key.split("@", 1)[1]] = arr
            layers[fam] = layer
        p = f"layers.{i}."
        blocks.append(Block(layers, tensors[p + "ln1_gamma"], tensors[p + "ln1_beta"],
                            tensors[p + "ln2_gamma"], tensors[p + "ln2_beta"]))
    model = Encoder(cfg, blocks, structure=manifest["structure"],
                    update_masked_weights=manifest["update_masked_weights"])
    for h in manifest["heads"]:
        t = h["task_id"]
        model.heads[t] = TaskHead(t, tensors[f"heads.{t}.weight"], tensors[f"heads.{t}.bias"], h["kind"])
    return model
