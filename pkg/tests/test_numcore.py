import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from m3sot import numcore as nc
from m3sot.numcore import ParameterStore, Tape, Tensor


def loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def two_pass_layer_norm(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x)
    for r, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[r] = [(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gamma, beta)]
    return out


def grad_of(f, *tensors):
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f()
    nc.backward(tape, loss)
    return [t.grad for t in tensors]


# frozen from loop_matmul on this fixed input
def test_matmul_matches_loop_oracle():
    a = np.arange(6.0).reshape(2, 3) - 2.5
    b = np.arange(12.0).reshape(3, 4) / 7.0
    expected = np.array([[-1.4285714285714284, -2.071428571428571, -2.714285714285714, -3.3571428571428568],
                         [3.714285714285714, 4.357142857142858, 5.0, 5.642857142857142]])
    np.testing.assert_allclose(loop_matmul(a, b), expected, rtol=1e-14)
    np.testing.assert_allclose(nc.matmul(Tensor(a), Tensor(b)).data, expected, rtol=1e-14)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_layer_norm_matches_two_pass():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 7)) * 3 + 1
    g, b = rng.normal(size=7), rng.normal(size=7)
    out = nc.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    np.testing.assert_allclose(out, two_pass_layer_norm(x, g, b), rtol=1e-10, atol=1e-12)


def test_softmax_rows_known_values():
    out = nc.softmax_rows(Tensor([[0.0, math.log(3.0)], [1000.0, 1000.0]])).data
    np.testing.assert_allclose(out, [[0.25, 0.75], [0.5, 0.5]], rtol=1e-15)


def test_softmax_nan_raises():
    with pytest.raises(FloatingPointError):
        nc.softmax_rows(Tensor([[np.nan, 1.0]]))


def test_relu_subgradient_zero_at_zero():
    x = Tensor([-1.0, 0.0, 2.0])
    (g,) = grad_of(lambda: nc.sum(nc.relu(x)), x)
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_gradients_accumulate_until_zeroed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = nc.sum(x * x)
        nc.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert x.grad is None


def test_no_tape_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert y.is_leaf


def test_item_rejects_non_scalar():
    with pytest.raises(ValueError):
        Tensor([1.0, 2.0]).item()
    assert Tensor([[3.5]]).item() == 3.5


def test_backward_shared_input_hand_derivative():
    # d/dx of x*x + 3x at x=2 is 2x + 3 = 7
    x = Tensor(2.0)
    (g,) = grad_of(lambda: x * x + x * 3.0, x)
    assert float(g) == 7.0


OPS = {
    "add": lambda a, b: nc.sum(nc.add(a, b) * b),
    "sub": lambda a, b: nc.sum(nc.sub(a, b) * a),
    "mul": lambda a, b: nc.sum(a * b * a),
    "dot_softmax": lambda a, b: nc.sum(nc.dot_softmax(a, b, 0.7) * a),
    "div": lambda a, b: nc.sum(a / (nc.square(b) + 1.0)),
    "sigmoid": lambda a, b: nc.sum(nc.sigmoid(a) * b),
    "exp": lambda a, b: nc.sum(nc.exp(a * 0.3) * b),
    "log": lambda a, b: nc.sum(nc.log(nc.square(a) + 1.0) * b),
    "huber": lambda a, b: nc.sum(nc.huber(a * 2.0) * b),
    "clip": lambda a, b: nc.sum(nc.clip(a, -0.5, 0.5) * b),
    "mean": lambda a, b: nc.mean(nc.square(a + b)),
    "max": lambda a, b: nc.sum(nc.max(a * b, axis=1)),
    "reshape_T": lambda a, b: nc.sum(nc.reshape(a, (-1,)) * nc.reshape(b.T.T, (-1,))),
    "concat": lambda a, b: nc.sum(nc.square(nc.concat([a, b], axis=0))),
    "index": lambda a, b: nc.sum(a[1:, :2] * b[:2, 1:]),
    "gather": lambda a, b: nc.sum(nc.gather_rows(a, np.array([0, 2, 2, 1])) * nc.gather_rows(b, np.array([1, 1, 0, 2]))),
    "matmul": lambda a, b: nc.sum(nc.square(a @ b.T)),
    "linear": lambda a, b: nc.sum(nc.square(nc.linear(a, b.T, nc.sum(b, axis=1)))),
    "softmax": lambda a, b: nc.sum(nc.softmax_rows(a) * b),
    "layer_norm": lambda a, b: nc.sum(nc.layer_norm(a, nc.sum(b, axis=0), nc.mean(b, axis=0)) * b),
}


def test_dot_softmax_matches_composition_bitwise():
    rng = np.random.default_rng(11)
    q1, k1 = Tensor(rng.normal(size=(3, 5, 4))), Tensor(rng.normal(size=(3, 6, 4)))
    q2, k2 = Tensor(q1.data.copy()), Tensor(k1.data.copy())
    g = rng.normal(size=(3, 5, 6))
    with nc.Tape() as t1:
        fused = nc.dot_softmax(q1, k1, 0.5)
        l1 = nc.sum(fused * g)
    nc.backward(t1, l1)
    with nc.Tape() as t2:
        composed = nc.softmax(nc.matmul(q2, nc.transpose(k2, (0, 2, 1))) * 0.5, axis=-1)
        l2 = nc.sum(composed * g)
    nc.backward(t2, l2)
    np.testing.assert_array_equal(fused.data, composed.data)
    np.testing.assert_array_equal(q1.grad, q2.grad)
    np.testing.assert_array_equal(k1.grad, k2.grad)


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(sorted(OPS).index(name))
    a = Tensor(rng.normal(size=(3, 3)) + 0.1)
    b = Tensor(rng.normal(size=(3, 3)))
    f = OPS[name]
    assert nc.gradcheck_all(lambda: f(a, b), [a, b]) < 1e-5


def test_finite_difference_check_detects_wrong_gradient():
    def bad(x):
        return nc._make(x.data ** 2, (x,), lambda g: (g * 3.0,))

    x = Tensor(np.array([1.0, 2.0]))
    assert nc.finite_difference_check(lambda t: nc.sum(bad(t)), x) > 0.1


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-5, 5)))
def test_sum_gradient_is_ones(x):
    t = Tensor(x)
    (g,) = grad_of(lambda: nc.sum(t), t)
    np.testing.assert_array_equal(g, np.ones_like(x))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = nc.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=1e-12)
    assert np.all(out >= 0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), st.floats(0.1, 3.0))
def test_backward_is_linear_in_loss_scale(x, c):
    t = Tensor(x)
    (g1,) = grad_of(lambda: nc.sum(nc.sigmoid(t) * t), t)
    g1 = g1.copy()
    (g2,) = grad_of(lambda: nc.sum(nc.sigmoid(t) * t) * c, t)
    np.testing.assert_allclose(g2, g1 * c, rtol=1e-12, atol=1e-15)


def _store():
    s = ParameterStore()
    s.add("b.w", np.arange(6.0).reshape(2, 3) / 3.0)
    s.add("a", np.array([np.pi]))
    return s


def test_checkpoint_bytes_follow_layout():
    blob = _store().to_bytes()
    expected = b"M3CKPT1\n"
    expected += struct.pack("<I", 1) + b"a" + struct.pack("<II", 1, 1) + struct.pack("<d", np.pi)
    expected += struct.pack("<I", 3) + b"b.w" + struct.pack("<III", 2, 2, 3)
    expected += struct.pack("<6d", *(np.arange(6.0) / 3.0))
    assert blob == expected


def test_checkpoint_round_trip(tmp_path):
    s = _store()
    s.save(tmp_path / "x.ckpt")
    r = ParameterStore.load(tmp_path / "x.ckpt")
    assert r.names() == s.names()
    for (n1, t1), (n2, t2) in zip(s.items(), r.items()):
        assert n1 == n2 and t1.data.tobytes() == t2.data.tobytes()
    assert r.to_bytes() == s.to_bytes()


def test_checkpoint_bad_magic_and_truncation():
    with pytest.raises(ValueError, match="magic"):
        ParameterStore.from_bytes(b"NOPE")
    with pytest.raises(ValueError):
        ParameterStore.from_bytes(_store().to_bytes()[:-5])


def test_duplicate_parameter_rejected():
    s = _store()
    with pytest.raises(KeyError):
        s.add("a", [1.0])
