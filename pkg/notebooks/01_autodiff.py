"""
Reverse-mode gradients by hand
==============================

A tiny two-layer classifier built from the tensor ops, with its gradient
compared against central differences.
"""
import numpy as np

from fdglab import tensor as T

rng = T.rng_for(0, "notebook-autodiff")
x = rng.normal(size=(6, 5))
y = rng.integers(0, 3, size=6)
w1, b1 = rng.normal(size=(4, 5)) * 0.5, np.zeros(4)
w2, b2 = rng.normal(size=(3, 4)) * 0.5, np.zeros(3)


def loss_of(p):
    h = T.relu(T.linear(T.Tensor(x), p["w1"], p["b1"]))
    return T.cross_entropy(T.linear(h, p["w2"], p["b2"]), y)


arrays = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}
leaves = {k: T.Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
grads = T.backward(loss_of(leaves), leaves)

# central differences on w1 only
h = 1e-6
num = np.zeros_like(w1)
for idx in np.ndindex(w1.shape):
    for sign in (1, -1):
        bumped = dict(arrays, w1=w1.copy())
        bumped["w1"][idx] += sign * h
        with T.no_grad():
            num[idx] += sign * loss_of({k: T.Tensor(v) for k, v in bumped.items()}).item()
num /= 2 * h
err = np.abs(grads["w1"] - num).max() / np.abs(num).max()
print(f"max relative gap on w1: {err:.2e}")

# a few plain SGD steps
for step in range(5):
    leaves = {k: T.Tensor(v, requires_grad=True) for k, v in arrays.items()}
    loss = loss_of(leaves)
    T.sgd_step(arrays, T.backward(loss, leaves), lr=0.1)
    print(step, round(loss.item(), 4))
