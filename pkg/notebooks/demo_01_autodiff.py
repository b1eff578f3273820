"""
Reverse-mode differentiation on numpy arrays
============================================

A tiny two-layer scorer built from ``mixedqa.diffcore`` nodes, its gradient,
and a central-difference check of one entry.
"""

import numpy as np

from mixedqa import diffcore as dc

rng = np.random.default_rng(0)

# leaves: constants carry no gradient, parameters do
x = dc.constant(rng.normal(size=(5, 3)))
W = dc.parameter(rng.normal(size=(3, 4)))
v = dc.parameter(rng.normal(size=4))

# scores over five positions, then the log-probability of position 2
hidden = dc.tanh(dc.matmul(x, W))
scores = dc.matmul(hidden, dc.reshape(v, (4, 1)))
logp = dc.log_softmax(dc.reshape(scores, (5,)))
loss = dc.scale(dc.take(logp, np.array([2])), -1.0)
print("loss:", float(loss.value[0]))

grads = dc.backward(loss, [W, v])
print("dloss/dW:\n", grads[W].round(4))

# the same entry by central differences
h = 1e-5
W0 = W.value.copy()


def value(Wv):
    s = np.tanh(x.value @ Wv) @ v.value
    return -(s[2] - np.log(np.exp(s).sum()))


Wp, Wm = W0.copy(), W0.copy()
Wp[1, 2] += h
Wm[1, 2] -= h
print("analytic", grads[W][1, 2], "numeric", (value(Wp) - value(Wm)) / (2 * h))

# masked positions get no probability and no gradient
masked = dc.log_softmax(dc.parameter(np.zeros(4)), mask=np.array([True, True, False, True]))
print("masked probabilities:", np.exp(masked.value).round(3))
