import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvcap import tensor as T


def test_conv1d_hand_cross_correlation():
    x = T.DiffArray([[1.0], [2.0], [3.0]])
    w = T.DiffArray(np.array([1.0, 0.0, -1.0]).reshape(3, 1, 1))
    out = T.conv1d(x, w, T.DiffArray([0.0]))
    assert out.shape == (1, 1)
    assert out.data[0, 0] == pytest.approx(-2.0)


def test_conv1d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 3))
    w = np.zeros((3, 3, 3))
    w[1] = np.eye(3)
    out = T.conv1d(x, w, np.zeros(3), stride=1, padding=1)
    np.testing.assert_allclose(out.data, x.astype(np.float32))


def test_conv1d_strided_length():
    x = np.zeros((256, 2))
    out = T.conv1d(x, np.zeros((3, 2, 4)), np.zeros(4), stride=2, padding=1)
    assert out.shape == (128, 4)


@pytest.mark.parametrize("length", range(1, 33))
@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("padding", [0, 1])
def test_conv1d_length_sweep(length, k, stride, padding):
    if k > length + 2 * padding:
        with pytest.raises(ValueError):
            T.conv1d(np.zeros((length, 1)), np.zeros((k, 1, 1)), np.zeros(1), stride, padding)
        return
    out = T.conv1d(np.zeros((length, 1)), np.zeros((k, 1, 1)), np.zeros(1), stride, padding)
    assert out.shape[0] == (length + 2 * padding - k) // stride + 1


def test_conv1d_channel_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(4, 2\).*\(3, 3, 5\)"):
        T.conv1d(np.zeros((4, 2)), np.zeros((3, 3, 5)), np.zeros(5))


def test_fully_connected_examples():
    np.testing.assert_allclose(T.fully_connected([3.0, -1.0], np.zeros((2, 2)), [0.5, 2.0]).data, [0.5, 2.0])
    np.testing.assert_allclose(T.fully_connected([1.0, 2.0], np.eye(2), [0.0, 0.0]).data, [1.0, 2.0])
    np.testing.assert_allclose(T.fully_connected([1.0, 2.0], [[1.0, 1.0], [1.0, -1.0]], [0.5, 0.0]).data, [3.5, -1.0])
    with pytest.raises(ValueError, match="dimension mismatch"):
        T.fully_connected([1.0, 2.0, 3.0], np.eye(2), [0.0, 0.0])


def _zero_lstm(h):
    return {"W_x": T.zeros((1, 4 * h)), "W_h": T.zeros((h, 4 * h)), "b": T.zeros((4 * h,))}


def test_lstm_zero_params():
    h, c = T.lstm_step([0.3], [0.0], [0.0], _zero_lstm(1))
    assert h.data[0] == 0 and c.data[0] == 0
    h, c = T.lstm_step([0.3], [0.0], [1.0], _zero_lstm(1))
    assert c.data[0] == pytest.approx(0.5)
    assert h.data[0] == pytest.approx(0.5 * math.tanh(0.5), abs=1e-6)
    assert h.data[0] == pytest.approx(0.2311, abs=1e-4)


def test_lstm_width_mismatch():
    with pytest.raises(ValueError):
        T.lstm_step([0.0, 0.0], [0.0], [0.0], _zero_lstm(1))


def test_lstm_gradients(f64):
    rng = np.random.default_rng(1)
    params = {
        "W_x": T.DiffArray(rng.normal(size=(3, 8))),
        "W_h": T.DiffArray(rng.normal(size=(2, 8))),
        "b": T.DiffArray(rng.normal(size=8)),
    }
    x, h0, c0 = (T.DiffArray(rng.normal(size=n)) for n in (3, 2, 2))
    weights = T.DiffArray([0.7, -1.3])

    def f():
        h, _ = T.lstm_step(x, h0, c0, params)
        return (h * weights).sum()

    assert T.grad_check(f, [x, h0, c0, *params.values()]) < 1e-4


def test_softmax_xent_examples():
    assert T.softmax_xent(T.DiffArray([0.0, 0.0]), 0).data == pytest.approx(math.log(2))
    big = T.softmax_xent(T.DiffArray([1000.0, 0.0]), 0)
    assert np.isfinite(big.data) and big.data == pytest.approx(0.0, abs=1e-6)
    with T.precision("f64"):
        assert T.softmax_xent(T.DiffArray([1.0, 2.0, 3.0]), 2).data == pytest.approx(0.40760596, abs=1e-8)
    with pytest.raises(IndexError):
        T.softmax_xent(T.DiffArray([0.0, 0.0]), 2)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=2, max_size=6),
    st.floats(-1e3, 1e3),
    st.integers(0, 5),
)
def test_softmax_xent_shift_invariance(logits, shift, label):
    label = label % len(logits)
    with T.precision("f64"):
        a = T.softmax_xent(T.DiffArray(logits), label).data
        b = T.softmax_xent(T.DiffArray(np.array(logits) + shift), label).data
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_backward_square():
    x = T.DiffArray(3.0)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_fan_out():
    x = T.DiffArray(1.0)
    (x + x).backward()
    assert x.grad == pytest.approx(2.0)


def test_backward_constant_root_is_noop():
    c = T.DiffArray(5.0)
    c.backward()
    assert c.grad == pytest.approx(1.0)


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        T.DiffArray([1.0, 2.0]).backward()


def test_shared_subexpression_matches_tree(f64):
    rng = np.random.default_rng(5)
    x = T.DiffArray(rng.normal(size=4))
    w = T.DiffArray(rng.normal(size=4))
    shared = T.tanh(x * w)
    (shared * shared + shared).sum().backward()
    dag = x.grad.copy()
    x.zero_grad()
    w.zero_grad()
    a, b, c = T.tanh(x * w), T.tanh(x * w), T.tanh(x * w)
    (a * b + c).sum().backward()
    np.testing.assert_allclose(dag, x.grad, rtol=1e-12)


def test_grad_check_examples(f64):
    x = T.DiffArray([1.7])
    assert T.grad_check(lambda: (x * x).sum(), [x], 1e-5) < 1e-8
    assert T.grad_check(lambda: T.DiffArray(3.0) * 1.0, [x]) == 0.0
    with np.errstate(invalid="ignore"):
        assert T.grad_check(lambda: T.log(x - 5.0).sum(), [x]) == math.inf


# every differentiable primitive, randomized shapes, seeded trials
def _unary(op):
    return lambda rng: ([T.DiffArray(rng.normal(size=rng.integers(1, 5, size=2)))], lambda a: op(a))


PRIMITIVES = {
    "add": lambda rng: ([T.DiffArray(rng.normal(size=(3, 2))), T.DiffArray(rng.normal(size=(2,)))], lambda a, b: a + b),
    "sub": lambda rng: ([T.DiffArray(rng.normal(size=(2, 3))), T.DiffArray(rng.normal(size=(2, 3)))], lambda a, b: a - b),
    "mul": lambda rng: ([T.DiffArray(rng.normal(size=(3, 1))), T.DiffArray(rng.normal(size=(3, 4)))], lambda a, b: a * b),
    "div": lambda rng: ([T.DiffArray(rng.normal(size=3)), T.DiffArray(rng.uniform(1, 2, size=3))], lambda a, b: a / b),
    "pow": lambda rng: ([T.DiffArray(rng.uniform(0.5, 2, size=4))], lambda a: a**1.7),
    "exp": _unary(T.exp),
    "log": lambda rng: ([T.DiffArray(rng.uniform(0.5, 3, size=4))], T.log),
    "tanh": _unary(T.tanh),
    "sigmoid": _unary(T.sigmoid),
    "relu": _unary(T.relu),
    "abs": _unary(T.absolute),
    "clip": lambda rng: ([T.DiffArray(rng.normal(size=5))], lambda a: T.clip(a, -0.5, 0.5)),
    "sum_axis": lambda rng: ([T.DiffArray(rng.normal(size=(3, 4)))], lambda a: T.sum_(a, 0)),
    "mean": _unary(lambda a: T.mean(a, 1)),
    "reshape": lambda rng: ([T.DiffArray(rng.normal(size=(2, 6)))], lambda a: a.reshape(3, 4)),
    "transpose": lambda rng: ([T.DiffArray(rng.normal(size=(2, 3)))], lambda a: a.T),
    "take": lambda rng: ([T.DiffArray(rng.normal(size=(4, 3)))], lambda a: a[np.array([0, 2, 2]), 1:]),
    "concat": lambda rng: ([T.DiffArray(rng.normal(size=(2, 3))), T.DiffArray(rng.normal(size=(1, 3)))], lambda a, b: T.concat([a, b])),
    "stack": lambda rng: ([T.DiffArray(rng.normal(size=3)), T.DiffArray(rng.normal(size=3))], lambda a, b: T.stack([a, b], 1)),
    "matmul": lambda rng: ([T.DiffArray(rng.normal(size=(2, 3))), T.DiffArray(rng.normal(size=(3, 4)))], T.matmul),
    "vecmat": lambda rng: ([T.DiffArray(rng.normal(size=3)), T.DiffArray(rng.normal(size=(3, 2)))], T.matmul),
    "where": lambda rng: (
        [T.DiffArray(rng.normal(size=4)), T.DiffArray(rng.normal(size=4))],
        lambda a, b: T.where(np.array([True, False, True, False]), a, b),
    ),
    "log_softmax": lambda rng: ([T.DiffArray(rng.normal(size=(3, 4)))], lambda a: T.log_softmax(a, 1)),
    "softmax_xent": lambda rng: ([T.DiffArray(rng.normal(size=5))], lambda a: T.softmax_xent(a, 3)),
    "softmax_xent_rows": lambda rng: ([T.DiffArray(rng.normal(size=(4, 2)))], lambda a: T.softmax_xent_rows(a, np.array([0, 1, 1, 0]))),
    "conv1d": lambda rng: (
        [T.DiffArray(rng.normal(size=(9, 2))), T.DiffArray(rng.normal(size=(3, 2, 3))), T.DiffArray(rng.normal(size=3))],
        lambda x, w, b: T.conv1d(x, w, b, stride=2, padding=1),
    ),
    "fully_connected": lambda rng: (
        [T.DiffArray(rng.normal(size=(2, 3))), T.DiffArray(rng.normal(size=(3, 2))), T.DiffArray(rng.normal(size=2))],
        T.fully_connected,
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name, f64):
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        inputs, op = PRIMITIVES[name](rng)
        proj = rng.normal(size=op(*inputs).shape)

        def f():
            return (op(*inputs) * proj).sum()

        worst = max(worst, T.grad_check(f, inputs, 1e-5))
    assert worst < 1e-4


def test_adam_first_step():
    p = {"w": T.DiffArray([0.0], dtype=np.float64)}
    state = T.OptimizerState(lr=1e-5)
    T.adam_update(p, {"w": np.array([1.0])}, state)
    assert state.t == 1
    assert p["w"].data[0] == pytest.approx(-1e-5, rel=1e-6)


def test_adam_zero_gradient_and_zero_lr():
    p = {"w": T.DiffArray([0.5, -0.5])}
    before = p["w"].data.copy()
    T.adam_update(p, {"w": np.zeros(2, np.float32)}, T.OptimizerState(lr=1e-3))
    np.testing.assert_array_equal(p["w"].data, before)
    state = T.OptimizerState(lr=0.0)
    T.adam_update(p, {"w": np.ones(2, np.float32)}, state)
    np.testing.assert_array_equal(p["w"].data, before)
    assert np.all(state.m["w"] > 0) and np.all(state.v["w"] > 0)


def test_adam_rejects_nan_with_name():
    p = {"layer.w": T.DiffArray([0.0])}
    state = T.OptimizerState()
    with pytest.raises(FloatingPointError, match="layer.w"):
        T.adam_update(p, {"layer.w": np.array([np.nan], np.float32)}, state)
    assert state.t == 0


def test_precision_switch():
    assert T.DiffArray(1.0).data.dtype == np.float32
    with T.precision("f64"):
        assert T.DiffArray(1.0).data.dtype == np.float64
    assert T.DiffArray(1.0).data.dtype == np.float32


def test_glorot_bounds():
    rng = np.random.default_rng(0)
    w = T.glorot((30, 20), 30, 20, rng)
    assert np.abs(w.data).max() <= math.sqrt(6 / 50)
