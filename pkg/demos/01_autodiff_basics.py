"""A tour of the tape-based autodiff core.

Builds a few expressions on Tensors, runs backward passes, and checks the
analytic gradients against central differences. Everything here is float64
numpy; there is no hidden graph state outside the Tape context.
"""

import numpy as np

from mdkd import Tape, Tensor, grad_check
from mdkd import tensor as T

rng = np.random.default_rng(0)

# --- a scalar chain: negative entropy of softmax(W x) ------------------------
w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
x = Tensor(rng.normal(size=(3, 1)), requires_grad=True)

with Tape() as tape:
    logits = T.matmul(w, x)
    probs = T.softmax_rows(T.reshape(logits, (1, 3)))
    y = T.sum_all(T.mul(probs, T.log_clamped(probs)))
    tape.backward(y)

print("negative entropy of softmax(Wx):", y.item())
print("dW[0]:", w.grad[0])
print("dx   :", x.grad.ravel())

# --- gradients accumulate across backward calls ------------------------------
a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
with Tape() as tape:
    s = T.sum_all(T.mul(a, a))
    tape.backward(s)
    tape.backward(s)
print("\ngrad after two backwards of sum(a*a):", a.grad, "(twice 2a)")

# --- grad_check: analytic vs central differences -----------------------------
v = Tensor(rng.normal(size=(4, 5)))
err = grad_check(lambda t: T.sum_all(T.mul(T.softmax_rows(T.gelu(t)), t)), v)
print(f"\ngrad_check on sum(softmax(gelu(v)) * v): max rel err {err:.2e}")

# --- constants stay constant -------------------------------------------------
c = Tensor(np.ones(3))  # requires_grad defaults to False
p = Tensor(np.ones(3), requires_grad=True)
with Tape() as tape:
    out = T.sum_all(T.mul(c, p))
    tape.backward(out)
print("\nconstant grad:", c.grad, " parameter grad:", p.grad)
