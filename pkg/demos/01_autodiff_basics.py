"""Tour of the tensor core: ops, reverse-mode gradients, and FD checking.

Run: python demos/01_autodiff_basics.py
"""

import numpy as np

from crossmatte import Tensor, backward, grad_check
from crossmatte import tensor as T

# tensors wrap numpy arrays; float64 by default
x = Tensor(np.array([[1.0, -2.0], [3.0, 4.0]]), requires_grad=True)
w = Tensor(np.array([[0.5], [0.25]]), requires_grad=True)

# operator sugar builds the graph: y = relu(x @ w), loss = mean(y^2)
y = T.relu(x @ w)
loss = (y * y).mean()
print("loss:", loss.item())

# one backward sweep populates .grad on everything reachable
backward(loss)
print("x.grad:\n", x.grad)
print("w.grad:\n", w.grad)

# gradients accumulate until reset, which supports checking composed graphs
x.zero_grad()
w.zero_grad()

# the finite-difference checker is the house oracle: central differences
# against the analytic gradient, worst scale-guarded relative error
report = grad_check(lambda a: T.tsum(T.softmax(a, axis=-1) * a),
                    Tensor(np.linspace(-1, 1, 12).reshape(3, 4)))
print(f"softmax*x gradcheck: max rel err {report.max_rel_err:.2e} "
      f"(tol {report.tol:g}) -> {'ok' if report.ok else 'FAIL'}")

# domain violations raise instead of emitting NaN
try:
    T.log(Tensor([0.0]))
except Exception as exc:
    print("log(0) ->", type(exc).__name__, "-", exc)
