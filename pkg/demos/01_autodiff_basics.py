"""Tour of the gradient tape: forward ops, backward, finite-difference check.

Run:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from prunecast import autodiff as ad
from prunecast.autodiff import Tape

rng = np.random.default_rng(0)

# A scalar chain: loss = mean((gelu(x @ w) - t)^2)
x = rng.normal(0, 1, (4, 3))
w0 = rng.normal(0, 0.5, (3, 2))
t = rng.normal(0, 1, (4, 2))

tape = Tape()
w = tape.watch(w0)
loss = ad.mse_loss(ad.gelu(ad.matmul(ad.constant(x), w)), ad.constant(t))
tape.backward(loss)
grad = tape.grad(w)
print(f"loss = {loss.item():.6f}")
print("analytic dL/dw[0,0] =", grad[0, 0])

# The same derivative by central differences
h = 1e-6
wp, wm = w0.copy(), w0.copy()
wp[0, 0] += h
wm[0, 0] -= h


def f(wv):
    return ad.mse_loss(ad.gelu(ad.matmul(ad.constant(x), ad.constant(wv))),
                       ad.constant(t)).item()


fd = (f(wp) - f(wm)) / (2 * h)
print("numeric  dL/dw[0,0] =", fd)
print(f"relative gap = {abs(grad[0, 0] - fd) / abs(fd):.2e}")

# Softmax rows stay normalized even for huge logits
s = ad.softmax_rows(ad.constant(np.array([[1000.0, 0.0, -500.0]])))
print("\nsoftmax of [1000, 0, -500]:", s.data, "row sum:", s.data.sum())

# A tape refuses a second backward pass
try:
    tape.backward(loss)
except Exception as exc:
    print(f"\nsecond backward correctly rejected: {exc}")
