"""A tour of the tensor engine.

Everything in this package runs on a small reverse-mode autodiff core:
float64 numpy arrays wrapped in ``Tensor`` nodes, each op recording a
closure that knows how to push gradients back to its inputs. This script
walks through the moving parts on tiny arrays where you can check the
numbers by hand.
"""

import numpy as np

from rgbdfusion import tensor as T
from rgbdfusion.tensor import Tensor

# ---------------------------------------------------------------------------
# 1. A scalar chain: d/dx of sigmoid(2x) at x = 0.5
# ---------------------------------------------------------------------------
x = Tensor(np.array([0.5]), requires_grad=True)
y = T.sigmoid(T.mul(x, Tensor(np.array([2.0]))))
loss = T.tensor_sum(y)
loss.backward()

s = 1.0 / (1.0 + np.exp(-1.0))
print("sigmoid(2x) at x=0.5")
print("  autodiff grad :", x.grad[0])
print("  closed form   :", 2 * s * (1 - s))

# ---------------------------------------------------------------------------
# 2. Broadcasting is handled by summing gradients back to the leaf shape
# ---------------------------------------------------------------------------
w = Tensor(np.array([[1.0], [2.0], [3.0]]), requires_grad=True)  # (3,1)
a = Tensor(np.arange(12, dtype=float).reshape(3, 4))
out = T.tensor_sum(T.mul(w, a))
out.backward()
print("\nbroadcast leaf grad (should be the row sums of a):")
print("  ", w.grad.ravel(), "vs", a.data.sum(axis=1))

# ---------------------------------------------------------------------------
# 3. The finite-difference oracle
#
# check_gradients perturbs each entry by +-eps, takes the central
# difference of the scalar loss, and compares with the recorded gradient.
# This is the same routine the test suite leans on; any new op should go
# through it before being trusted.
# ---------------------------------------------------------------------------
rng = np.random.default_rng(0)
img = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
ker = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)

worst = T.check_gradients(
    lambda: T.tensor_sum(T.conv2d(img, ker, stride=2, pad=1)),
    [("img", img), ("ker", ker)],
)
print(f"\nconv2d gradient check: worst relative error {worst:.2e}")

# ---------------------------------------------------------------------------
# 4. Gradients accumulate across backward calls, like any autograd
# ---------------------------------------------------------------------------
p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
for _ in range(3):
    T.tensor_sum(T.mul(p, p)).backward()
print("\nthree backward passes of sum(p*p), grad = 3 * 2p:")
print("  ", p.grad)
