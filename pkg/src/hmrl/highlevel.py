"""High-level layer: recurrent task inference trained next to a value head.

A GRU consumes embedded (state, action, reward) transitions; a categorical
head turns its hidden state into a probability vector ``y`` over latent
sub-tasks.  The layer trains through three signals: a Monte-Carlo value
regression (the pathway that actually shapes ``y``), an entropy regularizer
against a prior, and an occupancy term that prices how much of the inference
dimension is used.

Time indexing is causal throughout: the representation used at step t has
ingested transitions ``0..t-1`` only, so the very first representation of an
episode comes from the zero hidden state alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import UsageError
from .nets import MLP


@dataclass
class Representation:
    """Categorical task belief plus the recurrent state that produced it."""
    y: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        rows = self.y if self.y.ndim == 2 else self.y[None, :]
        if (rows < 0).any() or (np.abs(rows.sum(axis=-1) - 1.0) > 1e-9).any():
            raise UsageError("representation is not a probability vector")


class HighLevel:
    """Owns the embedders, GRU, categorical head and value head."""

    def __init__(self, state_dim: int, action_dim: int, K: int, rng: np.random.Generator,
                 gru_hidden: int = 256, cat_hidden: Sequence[int] = (512, 512),
                 value_hidden: Sequence[int] = (256, 256), state_embed: int = 64,
                 action_embed: int = 32, reward_embed: int = 16, dropout: float = 0.7):
        self.K = K
        self.state_dim = state_dim
        self.gru_hidden = gru_hidden
        self.state_emb = MLP(state_dim, (state_embed,), None, "tanh", rng)
        self.action_emb = MLP(action_dim, (action_embed,), None, "tanh", rng)
        self.reward_emb = MLP(1, (reward_embed,), None, "tanh", rng)
        in_dim = state_embed + action_embed + reward_embed
        self.gru = ad.GRUCellParams.create(in_dim, gru_hidden,
                                           lambda s: rng.uniform(-1, 1, s) / math.sqrt(gru_hidden))
        self.cat_head = MLP(gru_hidden, tuple(cat_hidden), K, "relu", rng, dropout=dropout)
        self.value_head = MLP(K + state_dim, tuple(value_hidden), 1, "tanh", rng)

        self.params = ad.ParameterSet()
        self.params.add_all("hl/state_emb", self.state_emb.tensors())
        self.params.add_all("hl/action_emb", self.action_emb.tensors())
        self.params.add_all("hl/reward_emb", self.reward_emb.tensors())
        self.params.add_all("hl/gru", self.gru.tensors())
        self.params.add_all("hl/cat", self.cat_head.tensors())
        self.params.add_all("value", self.value_head.tensors())

    def zero_hidden(self, batch: int | None = None) -> np.ndarray:
        return np.zeros(self.gru_hidden) if batch is None else np.zeros((batch, self.gru_hidden))

    def represent(self, g: ad.Graph, h: ad.Var, training: bool = False,
                  rng: np.random.Generator | None = None) -> ad.Var:
        """Categorical head on a hidden state; always a valid distribution."""
        return ad.softmax(self.cat_head.forward(g, h, training=training, rng=rng))

    def ingest(self, g: ad.Graph, s, a, r, h_prev: ad.Var, training: bool = False,
               rng: np.random.Generator | None = None) -> tuple[ad.Var, ad.Var]:
        """Advance the GRU on one embedded (s, a, r) transition; returns (y, h)."""
        s = s if isinstance(s, ad.Var) else g.const(np.asarray(s, dtype=float))
        a = a if isinstance(a, ad.Var) else g.const(np.asarray(a, dtype=float))
        r_arr = np.atleast_1d(np.asarray(r, dtype=float))
        if r_arr.ndim == 1 and len(np.shape(s.value)) == 2:
            r_arr = r_arr[:, None]
        r_var = g.const(r_arr)
        x = ad.concat([
            self.state_emb.forward(g, s),
            self.action_emb.forward(g, a),
            self.reward_emb.forward(g, r_var),
        ])
        h = ad.gru_cell(g, x, h_prev, self.gru)
        return self.represent(g, h, training=training, rng=rng), h

    def value(self, g: ad.Graph, y: ad.Var, s) -> ad.Var:
        """Value estimate conditioned on (y, s); differentiable into the GRU."""
        s = s if isinstance(s, ad.Var) else g.const(np.asarray(s, dtype=float))
        out = self.value_head.forward(g, ad.concat([y, s]))
        if len(np.shape(out.value)) == 2:
            return ad.reshape(out, (np.shape(out.value)[0],))
        return ad.reshape(out, ())

    def hidden_steps(self, g: ad.Graph, states: np.ndarray, actions: np.ndarray,
                     rewards: np.ndarray) -> list[ad.Var]:
        """Causal hidden-state stream h_0..h_{T-1} for a batch of episodes.

        states (B,T+1,s), actions (B,T,a), rewards (B,T); h_t has ingested
        transitions 0..t-1 (h_0 is the zero state).  The embedders run once
        on all transitions flattened time-major; only the GRU steps in time.
        """
        B, T = actions.shape[0], actions.shape[1]
        hs = [g.const(self.zero_hidden(B))]
        if T > 1:
            n = (T - 1) * B
            s_flat = states[:, :T - 1].transpose(1, 0, 2).reshape(n, -1)
            a_flat = actions[:, :T - 1].transpose(1, 0, 2).reshape(n, -1)
            r_flat = rewards[:, :T - 1].T.reshape(n, 1)
            x_all = ad.concat([
                self.state_emb.forward(g, g.const(s_flat)),
                self.action_emb.forward(g, g.const(a_flat)),
                self.reward_emb.forward(g, g.const(r_flat)),
            ])
            xr_all, xz_all, xn_all = ad.gru_input_projections(g, x_all, self.gru)
            for t in range(T - 1):
                lo, hi = t * B, (t + 1) * B
                hs.append(ad.gru_cell_from_inputs(
                    g, ad.rows(xr_all, lo, hi), ad.rows(xz_all, lo, hi),
                    ad.rows(xn_all, lo, hi), hs[-1], self.gru))
        return hs

    def sequence(self, g: ad.Graph, states: np.ndarray, actions: np.ndarray,
                 rewards: np.ndarray, training: bool = False,
                 rng: np.random.Generator | None = None) -> list[tuple[ad.Var, ad.Var]]:
        """Causal representation stream: T pairs (y_t, h_t)."""
        hs = self.hidden_steps(g, states, actions, rewards)
        return [(self.represent(g, h, training=training, rng=rng), h) for h in hs]


def hl_forward(layer: HighLevel, mdp: tuple, h_prev: np.ndarray, training: bool = False,
               rng: np.random.Generator | None = None) -> Representation:
    """One recurrent update on MDP_t = (s, a, r, s'); returns the new (y, h)."""
    s, a, r, _s_next = mdp
    g = ad.Graph()
    y, h = layer.ingest(g, s, a, r, g.const(np.asarray(h_prev, dtype=float)),
                        training=training, rng=rng)
    return Representation(y=np.array(y.value), h=np.array(h.value))


def initial_representation(layer: HighLevel, batch: int | None = None) -> Representation:
    """Episode-start belief from the zero hidden state (nothing ingested yet)."""
    g = ad.Graph()
    h = g.const(layer.zero_hidden(batch))
    y = layer.represent(g, h)
    return Representation(y=np.array(y.value), h=np.array(h.value))


def value_estimate(layer: HighLevel, rep, s) -> float:
    """Value of one (representation, state) pair; graph-free convenience."""
    g = ad.Graph()
    y = rep.y if isinstance(rep, Representation) else np.asarray(rep, dtype=float)
    return float(layer.value(g, g.const(y), np.asarray(s, dtype=float)).value)


def value_loss(estimate: ad.Var, mc_target) -> ad.Var:
    """Squared error against a Monte-Carlo return target (scalar or batch)."""
    if isinstance(mc_target, ad.Var):
        return ad.square(ad.sub(estimate, mc_target))
    target = np.asarray(mc_target, dtype=float)
    if target.ndim == 0:
        return ad.square(estimate - float(target))
    return ad.square(ad.sub(estimate, estimate.graph.const(target)))


def entropy_regularizer(y: ad.Var, prior: np.ndarray) -> ad.Var:
    """sum_k y_k log(prior_k / y_k), with 0 log 0 = 0; zero for y == prior."""
    g = y.graph
    p = g.const(np.broadcast_to(np.asarray(prior, dtype=float), np.shape(y.value)).copy())
    return ad.sub(ad.sum_last(ad.xlogy(y, p)), ad.sum_last(ad.xlogy(y, y)))


def occupancy_vector(K: int) -> np.ndarray:
    """[e^{-K+1}, ..., e^{-1}, e^0]: later inference slots cost more."""
    return np.exp(np.arange(-K + 1, 1, dtype=float))


def occupancy_loss(y: ad.Var, K: int) -> ad.Var:
    """-(e . y) log K, scaled to compete with the entropy regularizer."""
    g = y.graph
    e = g.const(np.broadcast_to(occupancy_vector(K), np.shape(y.value)).copy())
    return ad.scale(ad.sum_last(ad.mul(y, e)), -math.log(K))


def hl_loss(layer: HighLevel, states: np.ndarray, actions: np.ndarray,
            rewards: np.ndarray, mc_targets: np.ndarray, alphas: tuple[float, float, float],
            prior: np.ndarray | None = None, training: bool = True,
            rng: np.random.Generator | None = None) -> tuple[ad.Var, dict]:
    """Weighted per-step mean of value, entropy and occupancy terms.

    All inputs are batched (B, T, ...) trajectory arrays of equal horizon;
    returns the scalar loss node plus the unweighted component means.
    """
    if actions.size == 0:
        raise UsageError("hl_loss needs a non-empty batch")
    alpha_v, alpha_e, alpha_o = alphas
    if prior is None:
        prior = np.full(layer.K, 1.0 / layer.K)
    B, T = actions.shape[0], actions.shape[1]
    g = ad.Graph()
    # recurrent core steps in time; everything downstream runs once on the
    # time-major flattened stack (row t*B+b is step t of trajectory b)
    h_all = ad.concat_rows(layer.hidden_steps(g, states, actions, rewards))
    y_all = layer.represent(g, h_all, training=training, rng=rng)
    s_flat = states[:, :T].transpose(1, 0, 2).reshape(T * B, -1)
    est = layer.value(g, y_all, s_flat)
    l_v = ad.mean(value_loss(est, mc_targets.T.reshape(T * B)))
    l_e = ad.mean(entropy_regularizer(y_all, prior))
    l_o = ad.mean(occupancy_loss(y_all, layer.K))
    loss = ad.add(ad.scale(l_v, alpha_v), ad.add(ad.scale(l_e, alpha_e), ad.scale(l_o, alpha_o)))
    stats = {"loss_value": l_v.item(), "loss_entropy_reg": l_e.item(), "loss_occupancy": l_o.item(),
             "y_values": np.array(y_all.value).reshape(T, B, layer.K).transpose(1, 0, 2)}
    return loss, stats
