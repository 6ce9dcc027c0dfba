"""
Reverse-mode gradients and finite differences
=============================================

Every trainable piece of the model runs on a small tape-based autodiff
kernel. This script differentiates a toy expression by hand and by tape,
then runs the full gradient suite that guards each encoder, composer and
loss.
"""

import numpy as np

from rticlab import checks
from rticlab import numkernel as nk

# f(w) = sum(tanh(x @ w)); df/dw = x^T (1 - tanh^2(x @ w))
rng = np.random.default_rng(0)
x = rng.normal(size=(5, 3))
w = nk.Tensor(rng.normal(size=(3, 2)), requires_grad=True)

with nk.Tape() as tape:
    out = nk.reduce_sum(nk.tanh(nk.matmul(x, w)))
    tape.backward(out)

by_hand = x.T @ (1.0 - np.tanh(x @ w.value) ** 2)
print("tape vs closed form, max abs diff:", np.max(np.abs(w.grad - by_hand)))

# the same check by central differences
err = nk.finite_diff_check(lambda: nk.reduce_sum(nk.tanh(nk.matmul(x, w))), [w])
print("finite-difference relative error:", err)

# every component, every coordinate
print()
print(checks.format_table(checks.run_suite(seed=0, max_coords=None)))
