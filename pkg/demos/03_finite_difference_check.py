"""
Checking analytic gradients with finite differences
===================================================

Every gradient in the package is hand-derived, so every one of them is
checked against central finite differences in the test suite. This is
the same machinery in miniature: perturb one input at a time by h, take
the symmetric difference quotient, compare.
"""
import numpy as np

from nsl.losses import nc_grad, nc_loss
from nsl.numerics import conv2d, conv2d_grad

rng = np.random.default_rng(42)
H = 1e-5


def fd(f, x, h=H):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        x[i] += h
        hi = f()
        x[i] -= 2 * h
        lo = f()
        x[i] += h
        g[i] = (hi - lo) / (2 * h)
    return g


# loss gradient: analytic quotient rule vs numeric
p = rng.uniform(0.05, 0.95, size=(6, 6))
g = (rng.uniform(size=(6, 6)) < 0.4).astype(float)
for q in (1.0, 1.5, 2.0):
    ana = nc_grad(p, g, q, mode="exact")
    num = fd(lambda: nc_loss(p, g, q), p)
    err = np.max(np.abs(ana - num) / np.maximum(np.abs(num), 1e-6))
    print(f"nc loss q={q}: max rel err {err:.2e}")

# layer gradient: run conv2d, backprop a random cotangent, compare the
# weight gradient against differencing the scalar <out, cotangent>
x = rng.standard_normal((3, 8, 8))
w = rng.standard_normal((4, 3, 3, 3)) * 0.3
b = rng.standard_normal(4) * 0.1
cot = rng.standard_normal((4, 8, 8))

gx, gw, gb = conv2d_grad(x, w, cot)
num_w = fd(lambda: float((conv2d(x, w, b) * cot).sum()), w)
err = np.max(np.abs(gw - num_w) / np.maximum(np.abs(num_w), 1e-6))
print(f"conv2d weight grad: max rel err {err:.2e}")
