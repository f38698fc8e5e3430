"""
Reverse-mode differentiation on a tape
======================================

Every model operation is a primitive with a forward and a backward rule.
This script builds a small loss by hand, pulls gradients off the tape and
checks them against central differences.
"""
from __future__ import annotations

import numpy as np

from mdgcn.numerics import AdamState, DiffGraph, adam_step, finite_diff_check, reverse_grad

# %%
# A graph records each primitive as it runs. Leaves are the inputs we
# want gradients for; constants are not differentiated.
rng = np.random.default_rng(0)
W = rng.standard_normal((3, 4))
x = rng.standard_normal((4, 2))

g = DiffGraph()
w = g.leaf(W, name="W")
h = g.apply("sigmoid", g.apply("matmul", w, g.constant(x)))
loss = (h * h).sum()
grads = reverse_grad(g, loss)
print("loss", float(loss.value))
print("dloss/dW\n", np.round(grads["W"], 4))

# %%
# The same function written for :func:`finite_diff_check`, which rebuilds the
# graph for every perturbed coordinate.


def f(graph, leaves):
    z = graph.apply("sigmoid", graph.apply("matmul", leaves["W"], graph.constant(x)))
    return (z * z).sum()


report = finite_diff_check(f, {"W": W})
print("max relative error", report.max_rel_err, "passed", report.passed)

# %%
# A few Adam steps on the same loss. ``adam_step`` is pure: it returns new
# parameters and a new state.
params = {"W": W}
state = AdamState.init(params, lr=0.05)
for step in range(200):
    g = DiffGraph()
    leaves = {"W": g.leaf(params["W"], name="W")}
    out = f(g, leaves)
    params, state = adam_step(state, params, reverse_grad(g, out))
    if step % 50 == 0:
        print(f"step {step:3d}  loss {float(out.value):.5f}")
