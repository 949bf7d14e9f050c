import math

import numpy as np
import pytest
from _oracles import gradient_check, reference_logits, tiny_encoder
from hypothesis import given, settings
from hypothesis import strategies as st

from prunekit.errors import ContractViolation, NumericalFailure
from prunekit.nn import (
    Adam,
    EncoderConfig,
    FactoredLayer,
    PrunableLayer,
    forward_factored,
    forward_masked,
    loss_and_backward,
    predict,
)
from prunekit.pruning import rank_prune


def _batch(model, n=3, seed=5, classes=3):
    cfg = model.config
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, cfg.seq_len, cfg.model_dim)), rng.integers(0, classes, n)


def test_forward_masked_examples():
    layer = PrunableLayer([[1.0, 2.0], [3.0, 4.0]])
    x = np.array([1.0, 1.0])
    assert np.allclose(forward_masked(layer, x), [[3], [7]])
    layer.mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(forward_masked(layer, x), [[1], [4]])
    layer.bias = np.array([0.5, -1.0])
    layer.mask = np.zeros((2, 2))
    assert np.allclose(forward_masked(layer, np.ones((2, 3))), np.tile([[0.5], [-1.0]], 3))


def test_forward_masked_shape_error():
    with pytest.raises(ContractViolation):
        forward_masked(PrunableLayer(np.ones((2, 3))), np.ones(2))


def test_forward_factored_examples():
    layer = FactoredLayer([[1.0], [0.0]], [1.0], [[1.0, 1.0]])
    assert np.allclose(forward_factored(layer, [1.0, 1.0]), [[2], [0]])
    w = np.random.default_rng(0).standard_normal((5, 7))
    x = np.random.default_rng(1).standard_normal((7, 3))
    assert np.allclose(forward_factored(FactoredLayer.from_dense(w), x), w @ x, atol=1e-10)


def test_forward_factored_rank_zero_forbidden():
    layer = FactoredLayer.from_dense(np.eye(3))
    layer.mask = np.zeros(3)
    with pytest.raises(ContractViolation):
        forward_factored(layer, np.ones(3))


def test_zero_weight_encoder_logits_equal_bias():
    model = tiny_encoder()
    for _, arr, group in model.parameters():
        if not arr.ndim == 2 or group == "heads":
            continue
        arr[...] = 0.0
    head = model.heads["a"]
    head.weight[...] = 0.0
    head.bias[...] = [0.3, -0.2, 1.0]
    x, _ = _batch(model)
    logits, _, _ = model.logits(x, "a")
    assert np.allclose(logits, head.bias)


def test_identical_inputs_identical_logits():
    model = tiny_encoder()
    x, _ = _batch(model, n=1)
    logits, _, _ = model.logits(np.concatenate([x, x]), "a")
    assert np.array_equal(logits[0], logits[1])


@pytest.mark.parametrize("structure", ["element", "rank"])
def test_forward_matches_straight_line_reference(structure):
    model = tiny_encoder(structure, num_layers=2)
    layers = model.prunable_layers()
    rng = np.random.default_rng(4)
    for layer in layers:
        layer.mask = (rng.random(layer.mask.shape) < 0.7).astype(float)
    x, _ = _batch(model, n=4)
    logits, _, _ = model.logits(x, "a")
    assert np.allclose(logits, reference_logits(model, x, "a"), atol=1e-10)


def test_bad_batch_shape():
    model = tiny_encoder()
    with pytest.raises(ContractViolation):
        model.forward(np.zeros((2, 3, 16)))
    with pytest.raises(ContractViolation):
        model.logits(np.zeros((2, 4, 16)), "missing")


@pytest.mark.parametrize("structure", ["element", "rank"])
def test_gradients_match_finite_differences(structure):
    model = tiny_encoder(structure)
    x, y = _batch(model)
    errs = gradient_check(model, x, y, "a")
    assert max(errs.values()) < 1e-4, errs


def test_gradients_after_compaction():
    model = tiny_encoder("rank")
    for layer in model.prunable_layers():
        rank_prune(layer, 2)
        assert layer._factored_route()
    x, y = _batch(model)
    errs = gradient_check(model, x, y, "a")
    assert max(errs.values()) < 1e-4, errs


def test_regression_head_gradients():
    model = tiny_encoder(tasks=(("r", 1, "regression"),))
    x, _ = _batch(model)
    y = np.random.default_rng(0).standard_normal(3)
    errs = gradient_check(model, x, y, "r")
    assert max(errs.values()) < 1e-4, errs


def test_uniform_logits_loss_is_log_c():
    model = tiny_encoder(tasks=(("a", 5, "classification"),))
    model.heads["a"].weight[...] = 0.0
    model.heads["a"].bias[...] = 0.0
    x, y = _batch(model, classes=5)
    loss, _ = loss_and_backward(model, (x, y), "a")
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_saturated_loss_and_gradient():
    model = tiny_encoder()
    model.heads["a"].weight[...] = 0.0
    model.heads["a"].bias[...] = [40.0, 0.0, 0.0]
    x, _ = _batch(model)
    loss, grads = loss_and_backward(model, (x, np.zeros(3, dtype=int)), "a")
    assert 0 <= loss <= 1e-6
    assert math.sqrt(sum(float((g * g).sum()) for g in grads.values())) < 1e-8


def test_margin_20_loss():
    model = tiny_encoder()
    model.heads["a"].weight[...] = 0.0
    model.heads["a"].bias[...] = [20.0, 0.0, 0.0]
    x, _ = _batch(model)
    loss, _ = loss_and_backward(model, (x, np.zeros(3, dtype=int)), "a")
    assert 0 <= loss <= 1e-6


def test_label_out_of_range_and_non_finite():
    model = tiny_encoder()
    x, _ = _batch(model)
    with pytest.raises(ContractViolation):
        loss_and_backward(model, (x, np.array([0, 1, 3])), "a")
    model.heads["a"].bias[0] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(NumericalFailure):
        loss_and_backward(model, (x, np.array([0, 1, 2])), "a")


def test_update_masked_weights_passes_full_gradient():
    model = tiny_encoder()
    rng = np.random.default_rng(8)
    for layer in model.prunable_layers():
        layer.mask = (rng.random(layer.weight.shape) < 0.5).astype(float)
    x, y = _batch(model)
    _, g_off = loss_and_backward(model, (x, y), "a")
    model.update_masked_weights = True
    _, g_on = loss_and_backward(model, (x, y), "a")
    name = "layers.0.ffn_in.weight"
    off = model.prunable_layers()[4].mask == 0
    assert not g_off[name][off].any()
    assert np.abs(g_on[name][off]).sum() > 0
    assert np.array_equal(g_on[name][~off], g_off[name][~off])


def test_adam_zero_gradient_is_noop():
    model = tiny_encoder()
    before = {k: v.copy() for k, v in model.param_dict().items()}
    grads = {k: np.zeros_like(v) for k, v in before.items()}
    Adam().step(model, grads, {"weights": 0.1, "heads": 0.1, "sigma": 0.1, "scores": 0.1})
    assert all(np.array_equal(before[k], v) for k, v in model.param_dict().items())


def test_adam_first_step_magnitude():
    model = tiny_encoder()
    name = "heads.a.bias"
    before = model.param_dict()[name].copy()
    grads = {name: np.ones_like(before)}
    Adam().step(model, grads, {"weights": 0.1, "heads": 0.1, "sigma": 0.1, "scores": 0.1})
    assert np.allclose(model.param_dict()[name] - before, -0.1, atol=1e-7)


def test_adam_group_rates():
    model = tiny_encoder("rank")
    params = model.param_dict()
    before = {k: v.copy() for k, v in params.items()}
    grads = {"layers.0.query.sigma": np.ones_like(params["layers.0.query.sigma"]),
             "layers.0.query.u": np.ones_like(params["layers.0.query.u"])}
    Adam().step(model, grads, {"weights": 1e-5, "heads": 1e-5, "sigma": 5e-3, "scores": 1e-5})
    ds = np.abs(params["layers.0.query.sigma"] - before["layers.0.query.sigma"]).max()
    du = np.abs(params["layers.0.query.u"] - before["layers.0.query.u"]).max()
    assert ds == pytest.approx(5e-3, rel=1e-3) and du == pytest.approx(1e-5, rel=1e-3)


def test_adam_missing_group():
    model = tiny_encoder()
    with pytest.raises(ContractViolation):
        Adam().step(model, {}, {"weights": 0.1})


def test_unsampled_head_bit_identical():
    model = tiny_encoder(tasks=(("a", 3, "classification"), ("b", 3, "classification")))
    hb = model.heads["b"].weight.copy()
    x, y = _batch(model)
    _, grads = loss_and_backward(model, (x, y), "a")
    assert not any(k.startswith("heads.b.") for k in grads)
    Adam().step(model, grads, {"weights": 0.1, "heads": 0.1, "sigma": 0.1, "scores": 0.1})
    assert np.array_equal(model.heads["b"].weight, hb)


def test_predict_regression_and_classification():
    model = tiny_encoder(tasks=(("a", 3, "classification"), ("r", 1, "regression")))
    x, _ = _batch(model, n=5)
    p = predict(model, x, "a", batch_size=2)
    assert p.shape == (5,) and p.dtype.kind == "i"
    assert predict(model, x, "r").dtype.kind == "f"


def test_encoder_config_validation():
    with pytest.raises(ContractViolation):
        EncoderConfig(model_dim=10, num_heads=3)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(0, 1000))
def test_factored_dense_routes_agree(m, n, seed):
    w = np.random.default_rng(seed).standard_normal((m, n))
    layer = FactoredLayer.from_dense(w)
    x = np.random.default_rng(seed + 1).standard_normal((4, n))
    dense_out, _ = layer.forward_rows(x)
    assert np.allclose(dense_out, x @ w.T, atol=1e-9)
    rank_prune(layer, 1)
    out, _ = layer.forward_rows(x)
    assert np.allclose(out, x @ layer.dense_weight().T, atol=1e-9)
