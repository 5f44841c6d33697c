"""Small MLP building blocks shared by the three layers."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad


def glorot(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_out, fan_in = shape if len(shape) == 2 else (shape[0], shape[0])
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def bias_init(rng: np.random.Generator, width: int, fan_in: int) -> np.ndarray:
    # nonzero so ReLU preactivations never sit exactly on the kink at init
    limit = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-limit, limit, width)


class MLP:
    """Stack of affine+activation hidden layers with an optional linear head.

    With ``out_dim=None`` the activated last hidden layer is the output
    (embedder style); otherwise a linear head of that width follows.
    Dropout, when configured, applies after each hidden activation and only
    in training mode.
    """

    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int | None,
                 activation: str, rng: np.random.Generator, dropout: float = 0.0):
        self.activation = activation
        self.dropout = dropout
        self.layers: list[tuple[ad.Tensor, ad.Tensor]] = []
        prev = in_dim
        for width in hidden:
            self.layers.append((ad.Tensor(glorot(rng, (width, prev))),
                                ad.Tensor(bias_init(rng, width, prev))))
            prev = width
        self.head: tuple[ad.Tensor, ad.Tensor] | None = None
        if out_dim is not None:
            self.head = (ad.Tensor(glorot(rng, (out_dim, prev))),
                         ad.Tensor(bias_init(rng, out_dim, prev)))
            prev = out_dim
        self.out_dim = prev

    def forward(self, g: ad.Graph, x: ad.Var, training: bool = False,
                rng: np.random.Generator | None = None, trainable: bool = True) -> ad.Var:
        wrap = g.leaf if trainable else (lambda t: g.const(t.view))
        h = x
        for W, b in self.layers:
            h = ad.affine(h, wrap(W), wrap(b))
            h = ad.tanh(h) if self.activation == "tanh" else ad.relu(h)
            if self.dropout > 0.0 and training:
                h = ad.dropout(h, self.dropout, rng, training=True)
        if self.head is not None:
            W, b = self.head
            h = ad.affine(h, wrap(W), wrap(b))
        return h

    def tensors(self) -> dict[str, ad.Tensor]:
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"layer{i}/W"] = W
            out[f"layer{i}/b"] = b
        if self.head is not None:
            out["head/W"] = self.head[0]
            out["head/b"] = self.head[1]
        return out
