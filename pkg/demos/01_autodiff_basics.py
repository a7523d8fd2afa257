"""A tour of the reverse-mode autodiff engine.

Builds a few small computations, runs backward(), and checks one gradient
against central finite differences, which is exactly how the test suite
validates every operation.

Run:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from voxcot import ops
from voxcot.tensor import Tensor, no_grad

print("== scalars and broadcasting ==")
a = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
b = Tensor(np.array([[10.0], [20.0]]), requires_grad=True)
# (2,3) result: broadcasting follows numpy rules, gradients un-broadcast back
y = ops.mul(ops.add(a, b), a)
loss = ops.sum(y)
loss.backward()
print("y =\n", y.data)
print("dL/da =", a.grad, " (each column contributes twice)")
print("dL/db =", b.grad.ravel(), " (summed over the broadcast axis)")

print("\n== a tiny convolution with gradient check ==")
rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((1, 1, 4, 4, 3)), requires_grad=True)
w = Tensor(rng.standard_normal((2, 1, 3, 3, 1)) * 0.5, requires_grad=True)
out = ops.conv3d(x, w, stride=1, padding=(1, 1, 0))
print("input  (N,C,D,H,W):", x.shape)
print("kernel (Co,Ci,kd,kh,kw):", w.shape, " note the asymmetric 3x3x1 extent")
print("output:", out.shape)

proj = rng.standard_normal(out.shape)  # random scalar projection of the output
ops.sum(ops.mul(out, Tensor(proj))).backward()
analytic = w.grad[0, 0, 1, 1, 0]

eps = 1e-6
wp, wm = w.data.copy(), w.data.copy()
wp[0, 0, 1, 1, 0] += eps
wm[0, 0, 1, 1, 0] -= eps
with no_grad():
    fp = float(np.sum(ops.conv3d(x, Tensor(wp), 1, (1, 1, 0)).data * proj))
    fm = float(np.sum(ops.conv3d(x, Tensor(wm), 1, (1, 1, 0)).data * proj))
numeric = (fp - fm) / (2 * eps)
print(f"one kernel weight: analytic {analytic:.8f} vs numeric {numeric:.8f} "
      f"(rel err {abs(analytic - numeric) / max(1.0, abs(numeric)):.2e})")

print("\n== gradients accumulate across fan-out ==")
z = Tensor(np.array([2.0]), requires_grad=True)
ops.sum(ops.add(ops.mul(z, z), z)).backward()   # d(z^2 + z)/dz = 2z + 1
print("d(z^2 + z)/dz at z=2 ->", z.grad[0], "(expected 5.0)")

print("\n== no_grad() skips the tape ==")
with no_grad():
    silent = ops.mul(a, a)
print("requires_grad inside no_grad():", silent.requires_grad)

print("\n== non-finite values are an error, not a silent NaN ==")
bad = Tensor(np.array([1.0, 0.0]))
try:
    ops.div(Tensor(np.array([1.0, 1.0])), bad)
except FloatingPointError as e:
    print("caught:", e)
