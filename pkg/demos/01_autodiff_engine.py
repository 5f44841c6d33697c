#!/usr/bin/env python3
"""Tour of the autodiff engine: tape, gradients, the FD oracle, and Adam.

Run:  python3 demos/01_autodiff_engine.py
"""

import numpy as np

from hmrl import autodiff as ad

# --- scalars and exact gradients -------------------------------------------
# d/dx (x^2) at x=3 is 6; the tape records ops and one backward sweep fills
# the gradient of every reachable leaf.
x = ad.Tensor([3.0])
g = ad.Graph()
loss = ad.vsum(ad.square(g.leaf(x)))
g.backward(loss)
print("d/dx x^2 at 3:", x.grad[0])

# --- a small MLP, checked against central finite differences ----------------
rng = np.random.default_rng(0)
W1, b1 = ad.Tensor(rng.uniform(-1, 1, (8, 3))), ad.Tensor(rng.uniform(-0.2, 0.2, 8))
W2, b2 = ad.Tensor(rng.uniform(-1, 1, (1, 8))), ad.Tensor(rng.uniform(-0.2, 0.2, 1))
params = ad.ParameterSet()
for name, t in [("W1", W1), ("b1", b1), ("W2", W2), ("b2", b2)]:
    params.add(name, t)

inputs = rng.uniform(-1, 1, (16, 3))
targets = np.sin(inputs.sum(axis=1, keepdims=True))


def loss_fn():
    graph = ad.Graph()
    h = ad.tanh(ad.affine(graph.const(inputs), graph.leaf(W1), graph.leaf(b1)))
    pred = ad.affine(h, graph.leaf(W2), graph.leaf(b2))
    return ad.mean(ad.square(ad.sub(pred, graph.const(targets))))


err = ad.finite_diff_check(loss_fn, params)
print(f"MLP gradient vs central differences: max relative error {err:.2e}")

# --- Adam drives the regression down ----------------------------------------
for step in range(200):
    loss = loss_fn()
    loss.graph.backward(loss)
    ad.adam_step(params, lr=3e-2)
    if step % 50 == 0 or step == 199:
        print(f"step {step:3d}  loss {loss.item():.5f}")

# --- the sampling heads used by every stochastic layer -----------------------
g = ad.Graph()
mean_raw = g.const(np.array([0.4, -1.0]))
std_raw = g.const(np.array([0.0, 0.0]))
noise = np.array([0.5, -0.3])
sample, log_prob, std = ad.gaussian_head(mean_raw, std_raw, (0.5, 1.5), noise)
action, corrected = ad.tanh_squash(sample, log_prob)
print("bounded std:", std.value, "(always inside [0.5, 1.5])")
print("squashed action:", action.value, "log-density:", float(corrected.value))
