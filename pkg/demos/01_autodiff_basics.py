"""
Reverse-mode autodiff on numpy arrays
=====================================

A tour of the tensor module: build a tiny graph, backpropagate,
and check the result against central differences.
"""

import numpy as np

from dvcap import tensor as T

# a DiffArray wraps a numpy array and remembers how it was made
x = T.DiffArray([1.0, 2.0, 3.0])
y = (x * x).sum()
y.backward()
print("d/dx sum(x^2) =", x.grad)

# 1-D convolution is cross-correlation over a (time, channels) input
signal = T.DiffArray([[1.0], [2.0], [3.0], [4.0]])
kernel = T.DiffArray(np.array([1.0, 0.0, -1.0]).reshape(3, 1, 1))
edge = T.conv1d(signal, kernel, T.DiffArray([0.0]))
print("edge response:", edge.data.ravel())

# an LSTM step with zero weights: every gate sits at 0.5
cell = {"W_x": T.zeros((1, 4)), "W_h": T.zeros((1, 4)), "b": T.zeros((4,))}
h, c = T.lstm_step([0.3], [0.0], [1.0], cell)
print(f"h={h.data[0]:.4f} c={c.data[0]:.4f}")

# gradients are checked in double precision
with T.precision("f64"):
    rng = np.random.default_rng(0)
    w = T.DiffArray(rng.normal(size=(3, 2)))
    inp = T.DiffArray(rng.normal(size=3))
    err = T.grad_check(lambda: T.softmax_xent(T.fully_connected(inp, w, np.zeros(2)), 1), [w, inp])
print(f"relative gradient error: {err:.2e}")
