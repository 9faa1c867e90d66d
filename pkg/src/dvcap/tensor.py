"""Small reverse-mode autodiff over numpy arrays.

Every operation returns a new :class:`DiffArray` that remembers its parents
and a closure mapping the output gradient to parent gradients.  Graphs are
built fresh for every training step; parameters are long-lived leaves.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32
_grad_enabled = True
_node_counter = 0


def set_precision(mode: str) -> None:
    """Select the dtype used for newly created arrays ("f32" or "f64")."""
    global _default_dtype
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[mode]


def get_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(mode: str):
    old = _default_dtype
    set_precision(mode)
    try:
        yield
    finally:
        globals()["_default_dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Build no graph edges inside the block (decoding, reward computation)."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def _next_id() -> int:
    global _node_counter
    _node_counter += 1
    return _node_counter


class DiffArray:
    """N-dimensional array that participates in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "node_id", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype)
        if arr.size == 0:
            raise ValueError("DiffArray extents must be positive")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node_id = _next_id()
        self.name = name
        self._parents: tuple[DiffArray, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}{label}, data={self.data!r})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _scalar_error(x: DiffArray):
    raise ValueError(f"only size-1 arrays convert to a scalar, got shape {x.shape}")


def as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _make(data: np.ndarray, parents: Sequence[DiffArray], backward_fn) -> DiffArray:
    out = DiffArray.__new__(DiffArray)
    out.data = data
    out.grad = None
    out.node_id = _next_id()
    out.name = None
    if _grad_enabled:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------
def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw)


def power(a, exponent: float) -> DiffArray:
    a = as_diff(a)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), bw)


def exp(a) -> DiffArray:
    a = as_diff(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> DiffArray:
    a = as_diff(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> DiffArray:
    a = as_diff(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> DiffArray:
    a = as_diff(a)
    out = _stable_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a) -> DiffArray:
    a = as_diff(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def absolute(a) -> DiffArray:
    a = as_diff(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def clip(a, lo: float, hi: float) -> DiffArray:
    """Clamp to [lo, hi]; gradient is zero where the bound is active."""
    a = as_diff(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def where(cond: np.ndarray, a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _make(np.where(cond, a.data, b.data), (a, b), bw)


# -- reductions and shape ops --------------------------------------------
def sum_(a, axis=None) -> DiffArray:
    a = as_diff(a)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a, axis=None) -> DiffArray:
    a = as_diff(a)
    count = a.size if axis is None else a.shape[axis]
    return sum_(a, axis) * (1.0 / count)


def reshape(a, shape) -> DiffArray:
    a = as_diff(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> DiffArray:
    a = as_diff(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def take(a, index) -> DiffArray:
    a = as_diff(a)

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(a.data[index]), (a,), bw)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def concat(items: Sequence, axis: int = 0) -> DiffArray:
    items = [as_diff(x) for x in items]
    sizes = [x.shape[axis] for x in items]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([x.data for x in items], axis=axis), items, bw)


def stack(items: Sequence, axis: int = 0) -> DiffArray:
    items = [as_diff(x) for x in items]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _make(np.stack([x.data for x in items], axis=axis), items, bw)


def matmul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)

    def bw(g):
        if a.ndim == 1 and b.ndim == 2:
            return g @ b.data.T, np.outer(a.data, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        if a.ndim == 1 and b.ndim == 1:
            return g * b.data, g * a.data
        return g @ b.data.T, a.data.T @ g

    return _make(np.asarray(a.data @ b.data), (a, b), bw)


# -- layers ----------------------------------------------------------------
def conv1d_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x, weights, bias, stride: int = 1, padding: int = 0) -> DiffArray:
    """Cross-correlate a (T, C_in) sequence with (K, C_in, C_out) weights."""
    x, weights, bias = as_diff(x), as_diff(weights), as_diff(bias)
    if x.ndim != 2 or weights.ndim != 3:
        raise ValueError(f"conv1d expects input (T, C_in) and weights (K, C_in, C_out); got {x.shape} and {weights.shape}")
    length, c_in = x.shape
    k, w_in, c_out = weights.shape
    if w_in != c_in:
        raise ValueError(f"conv1d channel mismatch: input shape {x.shape} vs weights shape {weights.shape}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv1d bias shape {bias.shape} does not match weights shape {weights.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if k > length + 2 * padding:
        raise ValueError(f"kernel {k} longer than padded input {length}+2*{padding}")

    out_len = conv1d_output_length(length, k, stride, padding)
    padded = np.pad(x.data, ((padding, padding), (0, 0)))
    rows = (np.arange(out_len) * stride)[:, None] + np.arange(k)[None, :]
    cols = padded[rows].reshape(out_len, k * c_in)
    w2 = weights.data.reshape(k * c_in, c_out)
    out = cols @ w2 + bias.data

    def bw(g):
        dcols = (g @ w2.T).reshape(out_len, k, c_in)
        dpad = np.zeros_like(padded)
        np.add.at(dpad, rows, dcols)
        dx = dpad[padding : padding + length]
        dw = (cols.T @ g).reshape(weights.shape)
        return dx, dw, g.sum(axis=0)

    return _make(out, (x, weights, bias), bw)


def fully_connected(x, weights, bias) -> DiffArray:
    """Affine map ``x @ W + b`` for vectors (D,) or row batches (N, D)."""
    x, weights, bias = as_diff(x), as_diff(weights), as_diff(bias)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise ValueError(f"fully_connected dimension mismatch: input {x.shape} vs weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"fully_connected bias {bias.shape} does not match weights {weights.shape}")
    return matmul(x, weights) + bias


def lstm_step(x, h_prev, c_prev, params: dict) -> tuple[DiffArray, DiffArray]:
    """One LSTM cell step without peepholes.

    ``params`` holds ``W_x`` (E, 4H), ``W_h`` (H, 4H) and ``b`` (4H,), gate
    blocks ordered input, forget, output, candidate.
    """
    x, h_prev, c_prev = as_diff(x), as_diff(h_prev), as_diff(c_prev)
    w_x, w_h, b = params["W_x"], params["W_h"], params["b"]
    hidden = w_h.shape[0]
    if w_x.shape[1] != 4 * hidden or w_h.shape != (hidden, 4 * hidden) or b.shape != (4 * hidden,):
        raise ValueError(f"inconsistent LSTM params: W_x {w_x.shape}, W_h {w_h.shape}, b {b.shape}")
    if x.shape[-1] != w_x.shape[0]:
        raise ValueError(f"LSTM input width {x.shape[-1]} does not match W_x {w_x.shape}")
    if h_prev.shape[-1] != hidden or c_prev.shape[-1] != hidden:
        raise ValueError(f"LSTM state widths h={h_prev.shape} c={c_prev.shape}, expected {hidden}")

    gates = matmul(x, w_x) + matmul(h_prev, w_h) + b
    i = sigmoid(gates[..., 0:hidden])
    f = sigmoid(gates[..., hidden : 2 * hidden])
    o = sigmoid(gates[..., 2 * hidden : 3 * hidden])
    cand = tanh(gates[..., 3 * hidden :])
    c = f * c_prev + i * cand
    h = o * tanh(c)
    return h, c


def log_softmax(logits, axis: int = -1) -> DiffArray:
    logits = as_diff(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (logits,), bw)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits, label: int) -> DiffArray:
    """``-log softmax(logits)[label]`` for a 1-D logit vector."""
    logits = as_diff(logits)
    if logits.ndim != 1:
        raise ValueError(f"softmax_xent expects a 1-D logit vector, got shape {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise IndexError(f"label {label} out of range for {logits.shape[0]} classes")
    return -log_softmax(logits)[label]


def softmax_xent_rows(logits, labels: np.ndarray) -> DiffArray:
    """Per-row cross-entropy for an (N, C) logit matrix; returns shape (N,)."""
    logits = as_diff(logits)
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (logits.shape[0],) or labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise IndexError(f"labels {labels.shape} incompatible with logits {logits.shape}")
    return -log_softmax(logits, axis=1)[np.arange(len(labels)), labels]


# -- backward --------------------------------------------------------------
def _topological(root: DiffArray) -> list[DiffArray]:
    order: list[DiffArray] = []
    seen: set[int] = set()
    stack: list[tuple[DiffArray, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.node_id not in seen:
                stack.append((parent, False))
    return order


def backward(root: DiffArray) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every ancestor of ``root``."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


def grad_check(f: Callable[[], DiffArray], params: Iterable[DiffArray], eps: float = 1e-5) -> float:
    """Maximum relative error between backprop and central differences.

    ``f`` must rebuild its graph from ``params`` on every call.  Returns
    ``inf`` when ``f`` produces a non-finite value.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.data)):
        return math.inf
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                return math.inf
            num = (up - down) / (2 * eps)
            a = float(ana_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


# -- initialization & optimizer -------------------------------------------
def glorot(shape: tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator, name: str | None = None) -> DiffArray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return DiffArray(rng.uniform(-s, s, size=shape), name=name)


def zeros(shape, name: str | None = None) -> DiffArray:
    return DiffArray(np.zeros(shape), name=name)


@dataclass
class OptimizerState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: dict[str, DiffArray], grads: dict[str, np.ndarray], state: OptimizerState) -> OptimizerState:
    """Apply one bias-corrected Adam step in place; returns ``state``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    The whole step is rejected if any gradient is non-finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}; step rejected")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m.astype(p.data.dtype)
        state.v[name] = v.astype(p.data.dtype)
        step = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data = (p.data - step).astype(p.data.dtype)
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return total
