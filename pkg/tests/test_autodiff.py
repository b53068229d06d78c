import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tunable_ner import autodiff as ad
from tunable_ner.autodiff import DimensionError, PairingError, TapeError, Tensor


def check(f, params, tol, step=1e-5):
    assert ad.finite_diff_check(f, params, step=step) < tol


def test_matmul_identity_and_pick():
    eye = ad.param(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(eye, m).value, [[1, 2], [3, 4]])
    assert np.array_equal(ad.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]])).value, [[0.0]])


def test_matmul_gradient(rng):
    a, b = ad.param(rng.normal(size=(3, 4))), ad.param(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    check(lambda: ad.sum_all(ad.mul_const(ad.matmul(a, b), w)), [a, b], 1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_elementwise_values():
    assert ad.elementwise("sigmoid", Tensor(0.0)).item() == 0.5
    assert ad.elementwise("tanh", Tensor(0.0)).item() == 0.0
    with pytest.raises(DimensionError):
        ad.elementwise("add", Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ValueError):
        ad.elementwise("relu", Tensor(np.ones(2)))


def test_sigmoid_gradient_at_point():
    x = ad.param(np.array([0.3]))
    check(lambda: ad.sum_all(ad.sigmoid(x)), [x], 1e-6)
    s = 1 / (1 + math.exp(-0.3))
    with ad.Tape():
        ad.backward(ad.sum_all(ad.sigmoid(x)))
    assert x.grad[0] == pytest.approx(s * (1 - s), rel=1e-14)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "tanh"])
def test_elementwise_gradients(rng, op):
    a, b = ad.param(rng.normal(size=(2, 3))), ad.param(rng.normal(size=(2, 3)))
    ins = [a] if op == "tanh" else [a, b]
    check(lambda: ad.sum_all(ad.mul(ad.elementwise(op, *ins), Tensor(np.arange(6.0).reshape(2, 3)))),
          ins, 1e-6)


def test_concat_cases(rng):
    assert np.array_equal(ad.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).value, [1, 2, 3])
    one = Tensor([1.0])
    assert ad.concat([one]) is one
    with pytest.raises(DimensionError):
        ad.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2)))], axis=-1)
    a, b = ad.param(rng.normal(size=(2, 3))), ad.param(rng.normal(size=(2, 1)))
    w = rng.normal(size=(2, 4))
    check(lambda: ad.sum_all(ad.mul_const(ad.concat([a, b], axis=-1), w)), [a, b], 1e-6)


def test_softmax_ce_uniform_and_stable():
    loss, p = ad.softmax_cross_entropy(Tensor(np.zeros(4)), 2)
    assert loss.item() == pytest.approx(math.log(4), abs=1e-15)
    assert np.allclose(p, 0.25, atol=1e-15)
    loss, p = ad.softmax_cross_entropy(Tensor([1000.0, 0.0]), 0)
    assert np.isfinite(loss.item()) and loss.item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(Tensor(np.zeros(3)), 3)


def test_softmax_ce_gradient(rng):
    z = ad.param(rng.normal(size=5))
    with ad.Tape():
        loss, p = ad.softmax_cross_entropy(z, 1)
        ad.backward(loss)
    onehot = np.eye(5)[1]
    assert np.allclose(z.grad, p - onehot, atol=1e-15)
    check(lambda: ad.softmax_cross_entropy(z, 1)[0], [z], 1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3)))
def test_softmax_sums_to_one(z):
    assert abs(ad.softmax(z).sum() - 1.0) <= 1e-12


def test_l2_distance():
    a = {"w": Tensor([1.0, 2.0])}
    assert ad.l2_distance_sq(a, {"w": Tensor([1.0, 2.0])}).item() == 0.0
    assert ad.l2_distance_sq(a, {"w": Tensor([0.0, 0.0])}).item() == 5.0
    with pytest.raises(PairingError, match="v"):
        ad.l2_distance_sq(a, {"v": Tensor([0.0, 0.0])})
    with pytest.raises(PairingError, match="w"):
        ad.l2_distance_sq(a, {"w": Tensor([0.0])})


def test_l2_distance_gradient(rng):
    a = {"x": ad.param(rng.normal(size=(2, 2))), "y": ad.param(rng.normal(size=3))}
    b = {"x": ad.param(rng.normal(size=(2, 2))), "y": ad.param(rng.normal(size=3))}
    with ad.Tape():
        ad.backward(ad.l2_distance_sq(a, b))
    assert np.allclose(a["x"].grad, 2 * (a["x"].value - b["x"].value))
    assert np.allclose(b["y"].grad, 2 * (b["y"].value - a["y"].value))
    check(lambda: ad.l2_distance_sq(a, b), [*a.values(), *b.values()], 1e-6)


def test_backward_errors():
    with pytest.raises(TapeError):
        ad.backward(Tensor(1.0))
    x = ad.param(np.ones(3))
    with ad.Tape():
        y = ad.tanh(x)
        with pytest.raises(TapeError):
            ad.backward(y)


def test_backward_accumulates_on_leaves_and_matches_fresh(rng):
    x = ad.param(rng.normal(size=4))
    f = lambda: ad.sum_all(ad.mul(ad.tanh(x), ad.sigmoid(x)))
    with ad.Tape():
        ad.backward(f())
    first = x.grad.copy()
    with ad.Tape():
        ad.backward(f())
    assert np.allclose(x.grad, 2 * first)
    x.zero_grad()
    with ad.Tape():
        ad.backward(f())
    assert np.array_equal(x.grad, first)


def test_no_tape_means_no_recording():
    x = ad.param(np.ones(2))
    y = ad.tanh(x)
    assert y._tape is None
    with ad.Tape() as tape:
        ad.tanh(Tensor(np.ones(2)))
    assert len(tape) == 0


def test_tape_is_topological(rng):
    x = ad.param(rng.normal(size=3))
    with ad.Tape() as tape:
        ad.sum_all(ad.mul(ad.tanh(x), ad.sigmoid(ad.tanh(x))))
    seen = set()
    for out, inputs, _ in tape.records:
        for t in inputs:
            assert t._tape is not tape or t._index in seen
        seen.add(out._index)


def test_finite_diff_check_linear_and_constant(rng):
    x = ad.param(rng.normal(size=(3, 2)))
    w = rng.normal(size=(3, 2))
    assert ad.finite_diff_check(lambda: ad.sum_all(ad.mul_const(x, w)), [x]) < 1e-9
    const = lambda: ad.add_scalars(ad.scale(ad.sum_all(x), 0.0), Tensor(3.0))
    assert ad.finite_diff_check(const, [x]) == 0.0


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_sequence_gradient(rng, reverse):
    T, B, d, h = 4, 3, 2, 3
    x = ad.param(rng.normal(size=(T, B, d)))
    w, u = ad.param(rng.normal(size=(d, 4 * h))), ad.param(rng.normal(size=(h, 4 * h)))
    b = ad.param(rng.normal(size=4 * h))
    mask = np.ones((T, B))
    mask[2:, 1] = 0
    mask[3, 2] = 0
    proj = rng.normal(size=(T, B, h))
    f = lambda: ad.sum_all(ad.mul_const(ad.lstm_sequence(x, w, u, b, mask, reverse), proj))
    check(f, [x, w, u, b], 1e-6)


def test_take_rows_and_masked_mean_gradients(rng):
    table = ad.param(rng.normal(size=(5, 3)))
    idx = np.array([[0, 2], [2, 4]])
    w = rng.normal(size=(2, 2, 3))
    check(lambda: ad.sum_all(ad.mul_const(ad.take_rows(table, idx), w)), [table], 1e-6)
    x = ad.param(rng.normal(size=(4, 2, 3)))
    mask = np.array([[1, 1], [1, 1], [1, 0], [0, 0]], dtype=float)
    wm = rng.normal(size=(2, 3))
    check(lambda: ad.sum_all(ad.mul_const(ad.masked_mean(x, mask), wm)), [x], 1e-6)
    assert np.allclose(ad.masked_mean(x, mask).value[1], x.value[:2, 1].mean(axis=0))


def test_blend_and_affine_gradients(rng):
    g = ad.param(rng.random((2, 3)))
    a, b = ad.param(rng.normal(size=(2, 3))), ad.param(rng.normal(size=(2, 3)))
    w = rng.normal(size=(2, 3))
    check(lambda: ad.sum_all(ad.mul_const(ad.blend(g, a, b), w)), [g, a, b], 1e-6)
    x, W, c = ad.param(rng.normal(size=(4, 3))), ad.param(rng.normal(size=(3, 2))), ad.param(rng.normal(size=2))
    w2 = rng.normal(size=(4, 2))
    check(lambda: ad.sum_all(ad.mul_const(ad.affine(x, W, c), w2)), [x, W, c], 1e-6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-50, 50)))
def test_forward_ops_stay_finite(v):
    x = Tensor(v)
    for out in (ad.sigmoid(x), ad.tanh(x), ad.matmul(x, Tensor(np.ones((2, 2)))),
                ad.softmax_cross_entropy_rows(x, np.zeros(3, dtype=int))[0]):
        assert np.all(np.isfinite(out.value))
