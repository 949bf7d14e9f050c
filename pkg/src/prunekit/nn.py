"""A small post-LN transformer encoder with hand-written backward pass.

Weights are stored ``(out, in)`` so a layer maps column vectors as ``W @ x``;
inside the encoder activations are rows, so the batched product is
``X @ W.T``. Every attention projection and both feedforward weights are
prunable layers; biases, layer norms and task heads are not.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation, NumericalFailure
from .linalg import svd
from .pruning import ste_backward

ATTN_FAMILIES = ("query", "key", "value", "output")
FFN_FAMILIES = ("ffn_in", "ffn_out")
FAMILIES = ATTN_FAMILIES + FFN_FAMILIES
LN_EPS = 1e-5

GROUPS = ("weights", "sigma", "scores", "heads")


@dataclass
class EncoderConfig:
    num_layers: int = 2
    model_dim: int = 64
    ffn_dim: int = 128
    num_heads: int = 4
    seq_len: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "model_dim", "ffn_dim", "num_heads", "seq_len"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive")
        if self.model_dim % self.num_heads:
            raise ContractViolation("num_heads must divide model_dim")

    def family_shape(self, family):
        d, f = self.model_dim, self.ffn_dim
        return {"ffn_in": (f, d), "ffn_out": (d, f)}.get(family, (d, d))

    def to_dict(self):
        return asdict(self)


class PrunableLayer:
    """Element-wise prunable linear map: ``y = (W * M) @ x + b``.

    ``scores`` is present only under movement selection; ``task_scores`` and
    ``task_masks`` hold per-task state for the separate/hybrid mask modes.
    """

    structure = "element"

    def __init__(self, weight, bias=None, family="", name=""):
        self.weight = np.array(weight, dtype=np.float64)
        m, n = self.weight.shape
        self.bias = np.zeros(m) if bias is None else np.array(bias, dtype=np.float64)
        self.mask = np.ones_like(self.weight)
        self.scores = None
        self.task_scores = {}
        self.task_masks = {}
        self.family = family
        self.name = name

    @property
    def shape(self):
        return self.weight.shape

    @property
    def dense_params(self):
        m, n = self.shape
        return m * n

    def mask_for(self, task=None):
        return self.task_masks.get(task, self.mask)

    def dense_weight(self, task=None):
        return self.weight * self.mask_for(task)

    def forward_rows(self, x, task=None):
        w = self.dense_weight(task)
        return x @ w.T + self.bias, (x, w)

    def backward_rows(self, g, cache, task=None, update_masked=False):
        x, w = cache
        g_eff = g.T @ x
        g_weight, score_grad = ste_backward(g_eff, self, task)
        grads = {"bias": g.sum(axis=0), "weight": g_eff if update_masked else g_weight}
        if self.scores is not None:
            grads["scores"] = score_grad
        if task in self.task_scores:
            grads[f"scores@{task}"] = score_grad
        return g @ w, grads

    def param_items(self):
        yield "weight", self.weight, "weights"
        yield "bias", self.bias, "weights"
        if self.scores is not None:
            yield "scores", self.scores, "scores"
        for t, s in self.task_scores.items():
            yield f"scores@{t}", s, "scores"


class FactoredLayer:
    """Rank-structured linear map ``y = U diag(sigma * mask) V x + b``.

    Before compaction all ``min(m, n)`` rank dimensions are stored and pruned
    ones are soft-masked. ``compact`` drops them for good; afterwards the layer
    holds ``U' Sigma'`` and ``V'`` with ``k'`` rank dimensions.
    """

    structure = "rank"

    def __init__(self, u, sigma, v, bias=None, family="", name=""):
        self.u = np.array(u, dtype=np.float64)
        self.sigma = np.array(sigma, dtype=np.float64)
        self.v = np.array(v, dtype=np.float64)
        m, k = self.u.shape
        if self.v.shape[0] != k or self.sigma.shape != (k,):
            raise ContractViolation("inconsistent factor shapes")
        if k < 1:
            raise ContractViolation("retained rank must be at least 1")
        self.original_shape = (m, self.v.shape[1])
        self.original_rank = min(self.original_shape)
        self.bias = np.zeros(m) if bias is None else np.array(bias, dtype=np.float64)
        self.mask = np.ones(k)
        self.scores = None
        self.task_scores = {}
        self.task_masks = {}
        self.compacted = False
        self.family = family
        self.name = name

    @classmethod
    def from_dense(cls, weight, bias=None, family="", name=""):
        t = svd(weight)
        return cls(t.u, t.sigma, t.v, bias=bias, family=family, name=name)

    @property
    def shape(self):
        return self.original_shape

    @property
    def dense_params(self):
        m, n = self.original_shape
        return m * n

    @property
    def rank(self):
        return self.sigma.shape[0]

    @property
    def retained_rank(self):
        return int(self.mask.sum())

    @property
    def us(self):
        return self.u * self.sigma

    def mask_for(self, task=None):
        return self.task_masks.get(task, self.mask)

    def dense_weight(self, task=None):
        return (self.u * (self.sigma * self.mask_for(task))) @ self.v

    def _factored_route(self):
        m, n = self.original_shape
        return self.compacted and self.rank * (m + n) < m * n

    def forward_rows(self, x, task=None):
        d = self.sigma * self.mask_for(task)
        if self._factored_route():
            h = x @ self.v.T
            h2 = h * d
            return h2 @ self.u.T + self.bias, (x, d, h, h2)
        w = (self.u * d) @ self.v
        return x @ w.T + self.bias, (x, d, w)

    def backward_rows(self, g, cache, task=None, update_masked=False):
        x, d = cache[0], cache[1]
        mask = self.mask_for(task)
        if len(cache) == 4:
            h, h2 = cache[2], cache[3]
            gh2 = g @ self.u
            gd = np.einsum("rk,rk->k", gh2, h)
            gh = gh2 * d
            gu, gv, gx = g.T @ h2, gh.T @ x, gh @ self.v
        else:
            w = cache[2]
            gw = g.T @ x
            gwv = gw @ self.v.T
            gd = np.einsum("mk,mk->k", self.u, gwv)
            gu = gwv * d
            gv = d[:, None] * (self.u.T @ gw)
            gx = g @ w
        grads = {
            "bias": g.sum(axis=0),
            "u": gu,
            "v": gv,
            "sigma": gd if update_masked else gd * mask,
        }
        score_grad = gd * self.sigma
        if self.scores is not None:
            grads["scores"] = score_grad
        if task in self.task_scores:
            grads[f"scores@{task}"] = score_grad
        return gx, grads

    def compact(self, keep=None):
        """Drop rank dimensions outside ``keep`` (default: the current mask). Returns kept indices."""
        if keep is None:
            keep = np.flatnonzero(self.mask > 0)
        keep = np.sort(np.asarray(keep, dtype=int))
        if keep.size < 1:
            raise ContractViolation("cannot compact to rank 0")
        self.u = self.u[:, keep].copy()
        self.sigma = self.sigma[keep].copy()
        self.v = self.v[keep].copy()
        self.mask = np.ones(keep.size)
        if self.scores is not None:
            self.scores = self.scores[keep].copy()
        self.task_scores = {t: s[keep].copy() for t, s in self.task_scores.items()}
        self.task_masks = {t: mk[keep].copy() for t, mk in self.task_masks.items()}
        self.compacted = True
        return keep

    def param_items(self):
        yield "u", self.u, "weights"
        yield "sigma", self.sigma, "sigma"
        yield "v", self.v, "weights"
        yield "bias", self.bias, "weights"
        if self.scores is not None:
            yield "scores", self.scores, "scores"
        for t, s in self.task_scores.items():
            yield f"scores@{t}", s, "scores"


def forward_masked(layer, x):
    """``(W * M) @ x + bias`` for column-vector input ``x`` (n x l)."""
    if layer.structure != "element":
        raise ContractViolation("forward_masked needs an element-wise layer")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != layer.shape[1]:
        raise ContractViolation(f"input has {x.shape[0]} rows, layer expects {layer.shape[1]}")
    return layer.dense_weight() @ x + layer.bias[:, None]


def forward_factored(layer, x):
    """``US @ (V @ x)`` without forming the m x n matrix; bias is not added."""
    if layer.rank < 1 or layer.retained_rank < 1:
        raise ContractViolation("retained rank must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != layer.v.shape[1]:
        raise ContractViolation(f"input has {x.shape[0]} rows, layer expects {layer.v.shape[1]}")
    return (layer.u * (layer.sigma * layer.mask)) @ (layer.v @ x)


@dataclass
class TaskHead:
    task_id: str
    weight: np.ndarray
    bias: np.ndarray
    kind: str = "classification"

    @property
    def num_outputs(self):
        return self.weight.shape[1]


@dataclass
class Block:
    layers: dict
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


def _layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _layer_norm_backward(g, cache, gamma):
    xhat, inv = cache
    dxhat = g * gamma
    n = xhat.shape[-1]
    dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Encoder:
    """Stacked attention/feedforward blocks plus one unpruned head per task."""

    config: EncoderConfig
    blocks: list
    heads: dict = field(default_factory=dict)
    structure: str = "element"
    update_masked_weights: bool = False

    @classmethod
    def init(cls, config, structure="element"):
        if structure not in ("element", "rank"):
            raise ContractViolation(f"unknown structure {structure!r}")
        rng = np.random.default_rng([config.seed, 0])
        d = config.model_dim
        blocks = []
        for i in range(config.num_layers):
            layers = {}
            for fam in FAMILIES:
                m, n = config.family_shape(fam)
                w = rng.standard_normal((m, n)) / np.sqrt(n)
                name = f"layers.{i}.{fam}"
                if structure == "element":
                    layers[fam] = PrunableLayer(w, family=fam, name=name)
                else:
                    layers[fam] = FactoredLayer.from_dense(w, family=fam, name=name)
            blocks.append(Block(layers, np.ones(d), np.zeros(d), np.ones(d), np.zeros(d)))
        return cls(config=config, blocks=blocks, structure=structure)

    def add_head(self, task_id, num_outputs, kind="classification", index=0):
        rng = np.random.default_rng([self.config.seed, 1, index])
        d = self.config.model_dim
        w = rng.standard_normal((d, num_outputs)) / np.sqrt(d)
        self.heads[task_id] = TaskHead(task_id, w, np.zeros(num_outputs), kind)
        return self.heads[task_id]

    def prunable_layers(self):
        return [b.layers[f] for b in self.blocks for f in FAMILIES]

    def parameters(self):
        """Yield ``(name, array, group)`` for every trainable tensor."""
        for i, b in enumerate(self.blocks):
            for fam in FAMILIES:
                for pname, arr, group in b.layers[fam].param_items():
                    yield f"layers.{i}.{fam}.{pname}", arr, group
            for ln in ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
                yield f"layers.{i}.{ln}", getattr(b, ln), "weights"
        for t, h in self.heads.items():
            yield f"heads.{t}.weight", h.weight, "heads"
            yield f"heads.{t}.bias", h.bias, "heads"

    def param_dict(self):
        return {name: arr for name, arr, _ in self.parameters()}

    def forward(self, x, task=None):
        """Run the encoder on ``x`` of shape (batch, seq_len, model_dim).

        Returns the pooled representation and a cache for ``backward``.
        """
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.model_dim):
            raise ContractViolation(f"batch shape {x.shape} does not match (*, {cfg.seq_len}, {cfg.model_dim})")
        b, seq, d = x.shape
        nh = cfg.num_heads
        dh = d // nh
        h = x.reshape(b * seq, d)
        caches = []
        for blk in self.blocks:
            L = blk.layers
            c = {}
            q, c["query"] = L["query"].forward_rows(h, task)
            k, c["key"] = L["key"].forward_rows(h, task)
            v, c["value"] = L["value"].forward_rows(h, task)
            qh = q.reshape(b, seq, nh, dh).transpose(0, 2, 1, 3)
            kh = k.reshape(b, seq, nh, dh).transpose(0, 2, 1, 3)
            vh = v.reshape(b, seq, nh, dh).transpose(0, 2, 1, 3)
            att = _softmax(qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh))
            ctx = (att @ vh).transpose(0, 2, 1, 3).reshape(b * seq, d)
            o, c["output"] = L["output"].forward_rows(ctx, task)
            h1, c["ln1"] = _layer_norm(h + o, blk.ln1_gamma, blk.ln1_beta)
            f1, c["ffn_in"] = L["ffn_in"].forward_rows(h1, task)
            r = np.maximum(f1, 0.0)
            f2, c["ffn_out"] = L["ffn_out"].forward_rows(r, task)
            h, c["ln2"] = _layer_norm(h1 + f2, blk.ln2_gamma, blk.ln2_beta)
            c.update(qh=qh, kh=kh, vh=vh, att=att, relu=f1 > 0)
            caches.append(c)
        pooled = h.reshape(b, seq, d).mean(axis=1)
        return pooled, {"blocks": caches, "shape": (b, seq, d)}

    def logits(self, x, task):
        head = self._head(task)
        pooled, cache = self.forward(x, task)
        return pooled @ head.weight + head.bias, pooled, cache

    def _head(self, task):
        try:
            return self.heads[task]
        except KeyError:
            raise ContractViolation(f"unknown task_id {task!r}") from None

    def backward(self, g_pooled, cache, task=None):
        """Gradients of every encoder tensor given d(loss)/d(pooled)."""
        b, seq, d = cache["shape"]
        nh = self.config.num_heads
        dh = d // nh
        grads = {}
        g = np.repeat(g_pooled[:, None, :] / seq, seq, axis=1).reshape(b * seq, d)
        upd = self.update_masked_weights
        for i in range(len(self.blocks) - 1, -1, -1):
            blk, c = self.blocks[i], cache["blocks"][i]
            L = blk.layers
            pre = f"layers.{i}."
            g, grads[pre + "ln2_gamma"], grads[pre + "ln2_beta"] = _layer_norm_backward(g, c["ln2"], blk.ln2_gamma)
            g_h1 = g
            g_r, lg = L["ffn_out"].backward_rows(g, c["ffn_out"], task, upd)
            self._collect(grads, pre + "ffn_out.", lg)
            g_f1 = g_r * c["relu"]
            g_in, lg = L["ffn_in"].backward_rows(g_f1, c["ffn_in"], task, upd)
            self._collect(grads, pre + "ffn_in.", lg)
            g_h1 = g_h1 + g_in
            g, grads[pre + "ln1_gamma"], grads[pre + "ln1_beta"] = _layer_norm_backward(g_h1, c["ln1"], blk.ln1_gamma)
            g_h = g
            g_ctx, lg = L["output"].backward_rows(g, c["output"], task, upd)
            self._collect(grads, pre + "output.", lg)
            g_ctx = g_ctx.reshape(b, seq, nh, dh).transpose(0, 2, 1, 3)
            att = c["att"]
            g_att = g_ctx @ c["vh"].transpose(0, 1, 3, 2)
            g_vh = att.transpose(0, 1, 3, 2) @ g_ctx
            g_s = att * (g_att - (g_att * att).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
            g_qh = g_s @ c["kh"]
            g_kh = g_s.transpose(0, 1, 3, 2) @ c["qh"]
            for fam, gh in (("query", g_qh), ("key", g_kh), ("value", g_vh)):
                gh = gh.transpose(0, 2, 1, 3).reshape(b * seq, d)
                gx, lg = L[fam].backward_rows(gh, c[fam], task, upd)
                self._collect(grads, f"{pre}{fam}.", lg)
                g_h = g_h + gx
            g = g_h
        return grads

    @staticmethod
    def _collect(grads, prefix, layer_grads):
        for k, val in layer_grads.items():
            grads[prefix + k] = val


def loss_and_backward(model, batch, task_id):
    """Mean loss over the batch and gradients of every tensor it touches.

    Classification heads use softmax cross-entropy; regression heads (one
    output) use mean squared error. Only ``task_id``'s head gets gradients.
    """
    x, y = batch
    head = model._head(task_id)
    logits, pooled, cache = model.logits(x, task_id)
    n = logits.shape[0]
    if head.kind == "regression":
        y = np.asarray(y, dtype=np.float64).reshape(n)
        resid = logits[:, 0] - y
        loss = float(np.mean(resid * resid))
        g_logits = (2.0 / n) * resid[:, None]
    else:
        y = np.asarray(y, dtype=np.int64).reshape(n)
        if y.min() < 0 or y.max() >= head.num_outputs:
            raise ContractViolation("labels out of range")
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(n), y].mean())
        g_logits = np.exp(logp)
        g_logits[np.arange(n), y] -= 1.0
        g_logits /= n
    if not np.isfinite(loss):
        raise NumericalFailure(f"non-finite loss on task {task_id!r}")
    grads = {
        f"heads.{task_id}.weight": pooled.T @ g_logits,
        f"heads.{task_id}.bias": g_logits.sum(axis=0),
    }
    grads.update(model.backward(g_logits @ head.weight.T, cache, task_id))
    return loss, grads


def predict(model, x, task_id, batch_size=256):
    """Class indices (classification) or real predictions (regression)."""
    head = model._head(task_id)
    outs = []
    for start in range(0, len(x), batch_size):
        logits, _, _ = model.logits(x[start : start + batch_size], task_id)
        outs.append(logits[:, 0] if head.kind == "regression" else np.argmax(logits, axis=1))
    return np.concatenate(outs)


class Adam:
    """Adam with per-group learning rates and per-tensor step counts.

    Tensors without a gradient in a step are left untouched, so a head that
    was not sampled keeps bit-identical parameters.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}

    def step(self, model, grads, lr_map):
        for name, arr, group in model.parameters():
            if group not in lr_map:
                raise ContractViolation(f"lr_map has no rate for group {group!r}")
            g = grads.get(name)
            if g is None:
                continue
            m, v, t = self.state.get(name, (np.zeros_like(arr), np.zeros_like(arr), 0))
            t += 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            arr -= lr_map[group] * mhat / (np.sqrt(vhat) + self.eps)
            self.state[name] = (m, v, t)

    def select(self, name, index, axis=0):
        """Keep only ``index`` along ``axis`` of a tensor's moment estimates."""
        if name in self.state:
            m, v, t = self.state[name]
            self.state[name] = (np.take(m, index, axis=axis), np.take(v, index, axis=axis), t)


def optimizer_step(optimizer, model, grads, lr_map):
    optimizer.step(model, grads, lr_map)
