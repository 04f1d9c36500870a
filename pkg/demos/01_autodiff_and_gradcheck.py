"""Reverse-mode autodiff on numpy, and finite-difference checks of every op.

Run: python demos/01_autodiff_and_gradcheck.py
"""
import numpy as np

from siamese_af.numerics import OPS, Tensor, backward, default_dtype, ops, recording
from siamese_af.numerics.gradcheck import finite_difference_check

# %% a tiny graph: y = sum(relu(W x + b))
rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((4, 3)))
W = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
b = Tensor(np.zeros(2), requires_grad=True)

with recording() as tape:
    y = ops.mean(ops.relu(ops.linear(x, W, b)))
grads = backward(y, tape)
print("loss", y.item())
print("dL/dW\n", W.grad)
print("tape ops:", [r.kind for r in tape.records])

# %% every registered kernel against central differences, float64, eps 1e-4
with default_dtype(np.float64):
    # stop_gradient has an all-zero backward by design, checked separately in the tests
    for kind in sorted(k for k in OPS if k not in ("weighted_sum", "stop_gradient")):
        worst = max(finite_difference_check(kind, seed=s) for s in range(5))
        print(f"{kind:24s} max rel err {worst:.2e}")

# %% the encoder's channel-major layout gives the same convolution
xs = rng.standard_normal((2, 3, 16))
w = rng.standard_normal((4, 3, 5))
a = ops.conv1d(Tensor(xs), Tensor(w), None, stride=2, padding=2).data
c = ops.conv1d(Tensor(xs.transpose(1, 0, 2).copy()), Tensor(w), None, stride=2, padding=2, layout="cnl").data
print("ncl vs cnl max diff", np.abs(a - c.transpose(1, 0, 2)).max())
