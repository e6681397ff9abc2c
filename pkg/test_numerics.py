#!/usr/bin/env python3
"""
Tests for the autodiff core: ops, backward, grad_check, AdamW and checkpoints
"""

import numpy as np
import pytest

from lib.errors import ConfigError, GraphError, NumericalError, SchemaError, ShapeError
from lib.numerics import (LayerNorm, Linear, Module, OptimState, Parameter, Tape, Tensor, adam_step, backward,
                          concat, file_digest, gather, gelu, grad_check, layer_norm, load_checkpoint, log,
                          log_softmax, matmul, named_grads, no_tape, relative_error, save_checkpoint, sigmoid,
                          softmax, softplus, take, tsum)


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


class TwoLayer(Module):
    def __init__(self, rng):
        self.first = Linear(3, 4, rng)
        self.norm = LayerNorm(4)
        self.blocks = [Linear(4, 2, rng), Linear(2, 1, rng, bias=False)]
        self._scratch = Parameter(np.zeros(1))

    def __call__(self, x):
        h = gelu(self.norm(self.first(x)))
        return self.blocks[1](self.blocks[0](h))


# matmul

def test_matmul_identity():
    a = rand(3, 3)
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(a)).data, np.eye(3) @ a)
    assert np.allclose(matmul(Tensor(np.eye(3)), Tensor(a)).data, a, atol=0)


def test_matmul_scalar_case():
    assert matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    a, b = rand(4, 5, seed=1), rand(5, 3, seed=2)
    out = matmul(Tensor(a), Tensor(b)).data
    for i in range(4):
        for j in range(3):
            expected = 0.0
            for k in range(5):
                expected += a[i, k] * b[k, j]
            assert abs(out[i, j] - expected) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(rand(2, 3)), Tensor(rand(2, 3)))


# softmax

def test_softmax_uniform():
    out = softmax(Tensor([[2.5, 2.5, 2.5]])).data
    assert out == pytest.approx(np.full((1, 3), 1.0 / 3.0))


def test_softmax_shift_invariance():
    x = rand(2, 6)
    assert np.max(np.abs(softmax(Tensor(x)).data - softmax(Tensor(x + 7.25)).data)) < 1e-12


def test_softmax_hand_value():
    out = softmax(Tensor([[0.0, np.log(3.0)]])).data[0]
    assert out[0] == pytest.approx(0.25, abs=1e-12)
    assert out[1] == pytest.approx(0.75, abs=1e-12)


def test_softmax_mask_zeroes_entries_and_rejects_full_mask():
    out = softmax(Tensor([[1.0, 5.0, 2.0]]), mask=np.array([[True, False, True]])).data[0]
    assert out[1] == 0.0
    assert out.sum() == pytest.approx(1.0)
    with pytest.raises(ShapeError, match="all positions masked"):
        softmax(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))


def test_log_softmax_matches_log_of_softmax():
    x = rand(3, 5)
    assert np.allclose(log_softmax(Tensor(x)).data, np.log(softmax(Tensor(x)).data), atol=1e-12)


# backward

def test_backward_product():
    x, y = Parameter([[2.0]]), Parameter([[3.0]])
    with Tape() as tape:
        loss = tsum(x * y)
    grads = backward(loss, tape)
    assert grads[x.id].item() == 3.0
    assert grads[y.id].item() == 2.0


def test_backward_sum_of_squares():
    v = rand(2, 3)
    x = Parameter(v)
    with Tape() as tape:
        loss = tsum(x * x)
    grads = backward(loss, tape)
    assert np.allclose(grads[x.id], 2.0 * v)
    assert np.allclose(x.grad, 2.0 * v)


def test_backward_replay_overwrites_grad():
    x = Parameter([1.0, 2.0])
    with Tape() as tape:
        loss = tsum(x * x)
    first = backward(loss, tape)[x.id].copy()
    second = backward(loss, tape)[x.id]
    assert np.array_equal(first, second)
    assert np.array_equal(x.grad, first)


def test_backward_reused_input_accumulates():
    x = Parameter([3.0])
    with Tape() as tape:
        loss = tsum(x * x + x)
    assert backward(loss, tape)[x.id].item() == 7.0


def test_backward_detached_loss_is_graph_error():
    x = Parameter([1.0])
    loss = tsum(x * x)
    with Tape() as tape:
        pass
    with pytest.raises(GraphError):
        backward(loss, tape)


def test_backward_requires_scalar():
    x = Parameter([1.0, 2.0])
    with Tape() as tape:
        y = x * x
    with pytest.raises(ShapeError):
        backward(y, tape)


def test_no_tape_records_nothing():
    x = Parameter([1.0])
    with Tape() as tape:
        with no_tape():
            tsum(x * x)
    assert len(tape) == 0


def test_numpy_operand_on_left_stays_a_tensor():
    x = Parameter([1.0, 2.0])
    with Tape() as tape:
        loss = tsum(np.array([3.0, 4.0]) * x)
    assert isinstance(loss, Tensor)
    assert backward(loss, tape)[x.id].tolist() == [3.0, 4.0]


def test_non_finite_results_raise():
    with pytest.raises(NumericalError):
        log(Tensor([-1.0]))
    with pytest.raises(NumericalError):
        Tensor([1.0]) / Tensor([0.0])
    with pytest.raises(NumericalError):
        Tensor([np.nan])


def test_softplus_is_stable_for_large_inputs():
    out = softplus(Tensor([-800.0, 0.0, 800.0])).data
    assert out[0] == pytest.approx(0.0, abs=1e-300)
    assert out[1] == pytest.approx(np.log(2.0))
    assert out[2] == pytest.approx(800.0)


def test_take_and_gather_values():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    assert take(x, [2, 0]).data.tolist() == [[8, 9, 10, 11], [0, 1, 2, 3]]
    assert take(x, [1], axis=1).data.reshape(-1).tolist() == [1, 5, 9]
    assert gather(x, [3, 0, 1]).data.reshape(-1).tolist() == [3, 4, 9]


# grad_check

def test_grad_check_linear_is_exact():
    w = Tensor([1.0, -2.0, 0.5])
    p = Parameter([0.5, 0.25, -0.75])
    report = grad_check(lambda: tsum(w * p), [p], coords_per_param=None)
    assert report.max_rel_error < 1e-10
    assert report.passed
    assert report.checked == 3


def test_grad_check_square_norm_at_origin():
    p = Parameter(np.zeros(4))
    report = grad_check(lambda: tsum(p * p), [p], coords_per_param=None)
    assert report.max_rel_error == 0.0


def test_grad_check_every_smooth_op():
    rng = np.random.default_rng(3)
    x = Parameter(rng.normal(size=(3, 4)))
    gamma = Parameter(rng.normal(size=4))
    beta = Parameter(rng.normal(size=4))
    w = Parameter(rng.normal(size=(4, 2)))

    def f():
        h = gelu(layer_norm(x, gamma, beta))
        z = matmul(h, w)
        s = softmax(concat([z, sigmoid(z)], axis=1))
        return tsum(log_softmax(z)) + tsum(s * s) + tsum(softplus(take(z, [0, 2])))

    report = grad_check(f, {"x": x, "gamma": gamma, "beta": beta, "w": w}, coords_per_param=None)
    assert report.passed, report.worst


def test_grad_check_through_module():
    model = TwoLayer(np.random.default_rng(0))
    x = Tensor(rand(5, 3, seed=4))
    report = grad_check(lambda: tsum(model(x) * model(x)), model.parameters())
    assert report.passed, report.worst


def test_grad_check_rejects_bad_step_and_nondeterminism():
    p = Parameter([1.0])
    with pytest.raises(ConfigError):
        grad_check(lambda: tsum(p), [p], eps=0.0)
    counter = iter(range(100))
    with pytest.raises(NumericalError):
        grad_check(lambda: tsum(p) + float(next(counter)), [p])


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-5)


# Modules

def test_module_walk_and_freeze():
    model = TwoLayer(np.random.default_rng(0))
    names = sorted(model.parameters())
    assert names == ["blocks.0.bias", "blocks.0.weight", "blocks.1.weight",
                     "first.bias", "first.weight", "norm.beta", "norm.gamma"]
    model.freeze()
    assert model.trainable() == {}
    assert len(model.parameters()) == 7


def test_state_dict_round_trip_and_strictness():
    a = TwoLayer(np.random.default_rng(0))
    b = TwoLayer(np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    x = Tensor(rand(2, 3))
    assert np.array_equal(a(x).data, b(x).data)

    state = a.state_dict()
    state["extra"] = np.zeros(1)
    with pytest.raises(SchemaError):
        b.load_state_dict(state)
    state = a.state_dict()
    del state["first.weight"]
    with pytest.raises(SchemaError):
        b.load_state_dict(state)
    state = a.state_dict()
    state["first.weight"] = np.zeros((2, 2))
    with pytest.raises(ShapeError):
        b.load_state_dict(state)


# AdamW

def test_adam_first_step_moves_by_lr():
    p = Parameter([1.0, -2.0, 0.3])
    g = np.array([0.5, -3.0, 1e-3])
    adam_step({"p": p}, {"p": g}, OptimState(), lr=0.01)
    delta = p.data - np.array([1.0, -2.0, 0.3])
    assert np.allclose(np.abs(delta), 0.01, rtol=1e-4)
    assert np.array_equal(np.sign(delta), -np.sign(g))


def test_adam_zero_grad_leaves_params():
    p = Parameter([1.0, -2.0])
    adam_step({"p": p}, {"p": np.zeros(2)}, OptimState(), lr=0.1)
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_pure_decay():
    p = Parameter([1.0, -2.0])
    adam_step({"p": p}, {"p": np.zeros(2)}, OptimState(weight_decay=0.5), lr=0.1)
    assert p.data == pytest.approx(np.array([1.0, -2.0]) * (1 - 0.1 * 0.5))


def test_adam_lr_scale_and_validation():
    p, q = Parameter([1.0]), Parameter([1.0])
    adam_step({"p": p, "q": q}, {"p": np.ones(1), "q": np.ones(1)}, OptimState(), lr=0.1,
              lr_scale={"q": 0.1})
    assert 1.0 - p.data[0] == pytest.approx(0.1, rel=1e-6)
    assert 1.0 - q.data[0] == pytest.approx(0.01, rel=1e-6)
    with pytest.raises(ConfigError):
        adam_step({"p": p}, {"p": np.ones(1)}, OptimState(), lr=0.0)
    with pytest.raises(ShapeError):
        adam_step({"p": p}, {"p": np.ones(3)}, OptimState(), lr=0.1)


def test_training_loop_reduces_loss():
    rng = np.random.default_rng(0)
    model = Linear(3, 1, rng)
    x = rng.normal(size=(8, 3))
    target = x @ np.array([[0.5], [-1.0], [0.3]]) + 0.1
    x = Tensor(x)
    state = OptimState()
    params = model.trainable()
    losses = []
    for _ in range(100):
        with Tape() as tape:
            diff = model(x) - target
            loss = tsum(diff * diff)
        losses.append(loss.item())
        adam_step(params, named_grads(params, backward(loss, tape)), state, lr=0.05)
    assert losses[-1] < 0.25 * losses[0]


# Checkpoints

def test_checkpoint_round_trip(tmp_path):
    model = TwoLayer(np.random.default_rng(0))
    path = save_checkpoint(tmp_path / "ckpt" / "model.json", model.state_dict(), {"stage": "demo"})
    state, meta = load_checkpoint(path)
    assert meta == {"stage": "demo"}
    for name, arr in model.state_dict().items():
        assert np.array_equal(state[name], arr)


def test_checkpoint_format_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SchemaError):
        load_checkpoint(bad)
    other = tmp_path / "other.json"
    other.write_text('{"format": "something-else/1", "params": {}}')
    with pytest.raises(SchemaError):
        load_checkpoint(other)
    no_shape = tmp_path / "no_shape.json"
    no_shape.write_text('{"format": "situformer-checkpoint/1", "params": {"w": {"data": [1.0]}}}')
    with pytest.raises(SchemaError, match="'w'"):
        load_checkpoint(no_shape)
    not_object = tmp_path / "not_object.json"
    not_object.write_text('{"format": "situformer-checkpoint/1", "params": {"w": 3}}')
    with pytest.raises(SchemaError, match="malformed"):
        load_checkpoint(not_object)


def test_file_digest_tracks_content(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    a.write_bytes(b"one")
    b.write_bytes(b"two")
    first = file_digest(a, b)
    assert first == file_digest(a, b)
    assert first != file_digest(b, a)
    b.write_bytes(b"three")
    assert first != file_digest(a, b)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
