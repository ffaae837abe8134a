"""Tour of the reverse-mode engine: build a graph, backprop it, check it."""
import numpy as np

from dmtune import numerics as nm
from dmtune.numerics import Tensor

# ---- scalars first ----

x = Tensor(np.array(1.5), requires_grad=True)
y = Tensor(np.array(-0.5), requires_grad=True)
loss = (x * x * y + x).sum()
nm.backward(loss)
print("f(x,y) = x^2 y + x at (1.5, -0.5)")
print(f"  f  = {loss.item():.6f}")
print(f"  df/dx = {float(x.grad):.6f}   (expect 2xy + 1 = {2 * 1.5 * -0.5 + 1:.6f})")
print(f"  df/dy = {float(y.grad):.6f}   (expect x^2 = {1.5 ** 2:.6f})")

# ---- matrices, broadcasting, reductions ----

nm.reset_tape()
rng = nm.Rng(0)
w = Tensor(rng.normal((3, 4), std=0.5), requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
h = Tensor(rng.normal((2, 3)))

logits = nm.matmul(h, w) + b                 # [2, 4], bias broadcast over rows
logp = nm.log_softmax(logits, axis=-1)
picked = nm.gather_last(logp, np.array([1, 3]))
nll = picked.sum() * (-0.5)
nm.backward(nll)
print("\ntwo-row NLL through log_softmax:")
print(f"  loss = {nll.item():.6f}")
print(f"  dL/dw row sums = {np.round(w.grad.sum(axis=1), 6)}")
print(f"  dL/db = {np.round(b.grad, 6)}  (rows of softmax minus one-hots, halved)")

# ---- verify against central finite differences ----

def f():
    logits = nm.matmul(h, w) + b
    lp = nm.log_softmax(logits, axis=-1)
    return nm.gather_last(lp, np.array([1, 3])).sum() * (-0.5)

nm.reset_tape()
nm.zero_grads([w, b])        # grads accumulate; drop the pass above
loss = f()
nm.backward(loss)
analytic = w.grad.copy()

h_step = 1e-6
numeric = np.zeros_like(w.data)
flat, nflat = w.data.ravel(), numeric.ravel()
for i in range(flat.size):
    keep = flat[i]
    flat[i] = keep + h_step
    with nm.no_grad():
        up = f().item()
    flat[i] = keep - h_step
    with nm.no_grad():
        down = f().item()
    flat[i] = keep
    nflat[i] = (up - down) / (2 * h_step)

err = np.max(np.abs(analytic - numeric))
print(f"\nfinite-difference check on w: max abs gap = {err:.3e}")
