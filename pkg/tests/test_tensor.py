import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vlprompt import tensor as T
from vlprompt.exceptions import (DeterminismError, DimensionError, EmptyLossError, NumericError,
                                 TapeError)
from vlprompt.selftest import GRAD_TOL, check, primitive_cases


def test_matmul_identity_and_zero():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(T.Tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[0.0], [0.0]])).data, [[0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_gradient_against_central_differences():
    A = T.Tensor([[0.3, -0.7]], requires_grad=True)
    B = T.Tensor([[0.2], [1.1]])
    with T.Tape() as tape:
        loss = T.sum_all(T.matmul(A, B))
    tape.backward(loss)
    h = 1e-5
    for j in range(2):
        up, down = A.data.copy(), A.data.copy()
        up[0, j] += h
        down[0, j] -= h
        fd = ((up @ B.data).sum() - (down @ B.data).sum()) / (2 * h)
        assert abs(A.grad[0, j] - fd) / max(1.0, abs(fd)) <= 1e-6


def test_softmax_examples():
    np.testing.assert_array_equal(T.softmax_rows(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = T.softmax_rows(T.Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1.0) <= 1e-12 and abs(out[1]) <= 1e-12
    x = np.array([0.1, 0.2, 0.3])
    direct = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(T.softmax_rows(T.Tensor(x)).data, direct, rtol=0, atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        T.softmax_rows(T.Tensor([0.0, np.inf]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax_rows(T.Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(s >= 0)


def test_cross_entropy_uniform_and_saturated():
    loss = T.cross_entropy(T.Tensor(np.zeros((2, 4))), [1, 2], [True, False])
    assert abs(loss.item() - math.log(4)) < 1e-12
    logits = np.zeros((1, 5))
    logits[0, 3] = 100.0
    assert T.cross_entropy(T.Tensor(logits), [3]).item() < 1e-10


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(3, 5))
    targets, mask = [4, 0, 2], [True, False, True]
    expect = np.mean([-(z[i, targets[i]] - np.log(np.exp(z[i]).sum())) for i in (0, 2)])
    assert abs(T.cross_entropy(T.Tensor(z), targets, mask).item() - expect) <= 1e-12


def test_cross_entropy_errors():
    with pytest.raises(EmptyLossError):
        T.cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 1], [False, False])
    with pytest.raises(IndexError):
        T.cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3])


def test_layer_norm_moments():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 16)) * 3 + 2
    y = T.layer_norm(T.Tensor(x)).data
    assert np.abs(y.mean(axis=-1)).max() <= 1e-10
    var = x.var(axis=-1)
    # with eps in the denominator the exact row variance is var / (var + eps)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + 1e-5), rtol=0, atol=1e-12)


def test_layer_norm_unit_variance_once_eps_is_negligible():
    x = np.random.default_rng(1).normal(size=(4, 32)) * 1e3
    y = T.layer_norm(T.Tensor(x)).data
    np.testing.assert_allclose(y.var(axis=-1), 1.0, rtol=0, atol=1e-8)


def test_grad_check_examples():
    x = {"x": T.Tensor(3.0)}
    err = T.grad_check(lambda p: T.mul(p["x"], p["x"]), x)
    assert err <= 1e-9
    assert abs(x["x"].grad - 6.0) < 1e-12
    assert T.grad_check(lambda p: T.Tensor(2.5), {"x": T.Tensor([1.0, 2.0])}) == 0.0


def test_grad_check_detects_non_determinism():
    state = {"n": 0}

    def f(p):
        state["n"] += 1
        return T.scale(T.sum_all(p["x"]), float(state["n"]))

    with pytest.raises(DeterminismError):
        T.grad_check(f, {"x": T.Tensor([1.0])})


@pytest.mark.parametrize("name", [c[0] for c in primitive_cases()])
def test_primitive_gradients(name):
    f, params = {c[0]: c[1:] for c in primitive_cases()}[name]
    assert check(f, params) <= GRAD_TOL


def test_second_backward_is_an_error():
    a = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(a, a))
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_backward_needs_scalar():
    a = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        out = T.scale(a, 2.0)
    with pytest.raises(DimensionError):
        tape.backward(out)


def test_no_grad_records_nothing():
    a = T.Tensor([1.0], requires_grad=True)
    with T.Tape() as tape:
        with T.no_grad():
            out = T.scale(a, 2.0)
    assert not out.requires_grad and tape.nodes == []


def test_batch_gradient_is_mean_of_items():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 6))
    targets = [1, 5, 0, 2]
    lg = T.Tensor(logits, requires_grad=True)
    with T.Tape() as tape:
        loss = T.cross_entropy(lg, targets)
    tape.backward(loss)
    per_item = []
    for i in range(4):
        one = T.Tensor(logits[i:i + 1], requires_grad=True)
        with T.Tape() as tp:
            l1 = T.cross_entropy(one, [targets[i]])
        tp.backward(l1)
        per_item.append(one.grad[0])
    np.testing.assert_allclose(lg.grad, np.array(per_item) / 4, atol=1e-15)


def test_ops_are_bitwise_deterministic():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 9, 9)), rng.normal(size=(4, 3, 3, 3))
    a = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=1).data
    b = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=1).data
    assert a.tobytes() == b.tobytes()


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=(1, 2, 6, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for i in range(out.shape[2]):
            for j in range(out.shape[3]):
                patch = xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                assert abs(out[0, o, i, j] - ((patch * w[o]).sum() + b[o])) < 1e-12


def test_adaptive_pool_of_constant_is_constant():
    out = T.adaptive_avg_pool2d(T.Tensor(np.full((1, 1, 7, 5), 2.5)), (2, 2)).data
    np.testing.assert_allclose(out, 2.5, atol=1e-14)


def test_gelu_tanh_form():
    x = np.linspace(-3, 3, 13)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(T.Tensor(x)).data, ref, atol=1e-15)
