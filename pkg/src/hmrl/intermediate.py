"""Intermediate layer: macro-action discovery with a modified VAE.

The encoder maps (task belief y, state) to a tanh-Gaussian macro-action z in
the primitive action space; the decoder consumes (y, z, embedded ego-state)
and predicts the ego-state M steps ahead, making it a learned cumulative
transition function.  The usual VAE prior is replaced by the current policy's
own action distribution (parameter-detached), which keeps the latent space
anchored to the action space instead of collapsing.

Goal targets come from one of three generators: fixed segmentation (cd),
fixed look-ahead margin (cm), or belief change-points (st).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, UsageError
from .nets import MLP

STRATEGIES = ("cd", "cm", "st")


@dataclass
class MacroAction:
    """Sampled macro-action with its pre-squash value and encoder log-density."""
    z: ad.Var
    presquash: ad.Var
    log_prob: ad.Var
    mean_raw: ad.Var
    std: ad.Var


@dataclass(frozen=True)
class GoalAssignment:
    """Forward-looking map from step index to the episode index of its goal state."""
    strategy: str
    lookahead: int          # the horizon parameter M
    mapping: tuple          # length T; mapping[t] in (t, T]

    def __post_init__(self):
        T = len(self.mapping)
        for t, gi in enumerate(self.mapping):
            if gi >= 0 and not (t < gi <= T):
                raise ConfigurationError(f"goal index {gi} for step {t} outside (t, {T}]")

    def goal_index(self, t: int) -> int:
        return self.mapping[t]

    def to_record(self) -> dict:
        return {"strategy": self.strategy, "lookahead": self.lookahead,
                "mapping": list(self.mapping)}

    @classmethod
    def from_record(cls, rec: dict) -> "GoalAssignment":
        return cls(strategy=rec["strategy"], lookahead=int(rec["lookahead"]),
                   mapping=tuple(int(v) for v in rec["mapping"]))


def assign_goals(states: np.ndarray, reps: np.ndarray | None, strategy: str,
                 M: int, T: int) -> GoalAssignment:
    """Produce the per-step goal indices for one episode.

    cd segments [kM, (k+1)M) all point at (k+1)M; cm keeps a constant margin
    t -> t+M; st points at the next step where argmax(y) changes.  All goal
    indices clamp to the final state T.
    """
    if M < 1:
        raise ConfigurationError(f"goal lookahead must be >= 1, got {M}")
    if M > T:
        raise ConfigurationError(f"goal lookahead {M} exceeds horizon {T}")
    if states is not None and len(states) != T + 1:
        raise ConfigurationError(f"expected {T + 1} states for horizon {T}, got {len(states)}")
    if strategy == "cd":
        mapping = tuple(min((t // M + 1) * M, T) for t in range(T))
    elif strategy == "cm":
        mapping = tuple(min(t + M, T) for t in range(T))
    elif strategy == "st":
        if reps is None:
            raise ConfigurationError("st goal generation needs the episode's representations")
        labels = np.asarray(reps).argmax(axis=-1)
        changes = [i for i in range(1, len(labels)) if labels[i] != labels[i - 1]]
        mapping = []
        for t in range(T):
            nxt = next((c for c in changes if c > t), T)
            mapping.append(nxt)
        mapping = tuple(mapping)
    else:
        raise ConfigurationError(f"unknown goal strategy {strategy!r}")
    return GoalAssignment(strategy=strategy, lookahead=M, mapping=mapping)


def save_goal_assignments(path, assignments: Sequence[GoalAssignment]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ga in assignments:
            fh.write(json.dumps(ga.to_record()) + "\n")


def load_goal_assignments(path) -> list[GoalAssignment]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(GoalAssignment.from_record(json.loads(line)))
    return out


class Intermediate:
    """Owns the macro-action encoder, the ego embedder and the goal decoder."""

    def __init__(self, K: int, state_dim: int, action_dim: int, ego_dim: int,
                 rng: np.random.Generator, encoder_hidden: Sequence[int] = (128, 128, 64, 32),
                 decoder_hidden: Sequence[int] = (32, 64, 128, 128), ego_embed: int = 64,
                 dropout: float = 0.7, std_range: tuple[float, float] = (0.5, 1.5)):
        self.K = K
        self.action_dim = action_dim
        self.ego_dim = ego_dim
        self.std_range = std_range
        self.encoder = MLP(K + state_dim, tuple(encoder_hidden), None, "relu", rng)
        self.mean_head = MLP(self.encoder.out_dim, (), action_dim, "relu", rng)
        self.std_head = MLP(self.encoder.out_dim, (), action_dim, "relu", rng)
        self.ego_emb = MLP(ego_dim, (ego_embed,), None, "tanh", rng)
        self.decoder = MLP(K + action_dim + ego_embed, tuple(decoder_hidden), ego_dim,
                           "relu", rng, dropout=dropout)

        self.params = ad.ParameterSet()
        self.params.add_all("il/encoder", self.encoder.tensors())
        self.params.add_all("il/mean_head", self.mean_head.tensors())
        self.params.add_all("il/std_head", self.std_head.tensors())
        self.params.add_all("il/ego_emb", self.ego_emb.tensors())
        self.params.add_all("il/decoder", self.decoder.tensors())

    def _as_var(self, g: ad.Graph, x) -> ad.Var:
        return x if isinstance(x, ad.Var) else g.const(np.asarray(x, dtype=float))

    def encode(self, g: ad.Graph, y, s, noise: np.ndarray) -> MacroAction:
        """Sample z ~ tanh(N(mean(y,s), std(y,s))) with reparameterized noise."""
        x = ad.concat([self._as_var(g, y), self._as_var(g, s)])
        trunk = self.encoder.forward(g, x)
        mean_raw = self.mean_head.forward(g, trunk)
        std_raw = self.std_head.forward(g, trunk)
        sample, log_prob, std = ad.gaussian_head(mean_raw, std_raw, self.std_range, noise)
        z, log_prob = ad.tanh_squash(sample, log_prob)
        return MacroAction(z=z, presquash=sample, log_prob=log_prob, mean_raw=mean_raw, std=std)

    def decode(self, g: ad.Graph, y, z, s_ego, training: bool = False,
               rng: np.random.Generator | None = None) -> ad.Var:
        """Predict the ego goal state from (y, z, embedded ego state)."""
        e = self.ego_emb.forward(g, self._as_var(g, s_ego))
        x = ad.concat([self._as_var(g, y), self._as_var(g, z), e])
        return self.decoder.forward(g, x, training=training, rng=rng)

    def encoder_mean(self, y: np.ndarray, s: np.ndarray) -> np.ndarray:
        """tanh of the encoder mean: the deterministic macro-action direction."""
        g = ad.Graph()
        x = ad.concat([g.const(np.asarray(y, dtype=float)), g.const(np.asarray(s, dtype=float))])
        trunk = self.encoder.forward(g, x)
        return np.array(ad.tanh(self.mean_head.forward(g, trunk)).value)


def encode_macro(layer: Intermediate, y: np.ndarray, s: np.ndarray,
                 noise: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Value-level encoder call: returns (z, presquash, log_prob)."""
    g = ad.Graph()
    macro = layer.encode(g, y, s, noise)
    return np.array(macro.z.value), np.array(macro.presquash.value), float(macro.log_prob.value)


def decode_transition(layer: Intermediate, y: np.ndarray, z: np.ndarray,
                      s_ego: np.ndarray) -> np.ndarray:
    """Value-level decoder call (eval mode, no dropout)."""
    g = ad.Graph()
    return np.array(layer.decode(g, y, z, s_ego).value)


def il_kl_loss(macro: MacroAction, action_prior_logdensity: ad.Var) -> ad.Var:
    """Single-sample KL estimate log q(z) - log p(z), minimized toward the prior."""
    return ad.sub(macro.log_prob, action_prior_logdensity)


def il_transition_loss(predicted: ad.Var, target_goal_ego) -> ad.Var:
    """Unit-variance Gaussian NLL up to constants: half squared error."""
    target = target_goal_ego if isinstance(target_goal_ego, ad.Var) \
        else predicted.graph.const(np.asarray(target_goal_ego, dtype=float))
    if np.shape(predicted.value) != np.shape(target.value):
        raise UsageError(
            f"prediction shape {np.shape(predicted.value)} does not match target "
            f"{np.shape(target.value)}")
    return ad.scale(ad.sum_last(ad.square(ad.sub(predicted, target))), 0.5)


def il_loss(layer: Intermediate, prior_fn: Callable[[ad.Graph, np.ndarray, np.ndarray, MacroAction], ad.Var],
            states: np.ndarray, y_values: np.ndarray, ego_indices: Sequence[int],
            goals: Sequence[GoalAssignment], betas: tuple[float, float],
            noise_rng: np.random.Generator, training: bool = True,
            rng: np.random.Generator | None = None) -> tuple[ad.Var, dict]:
    """Mean over assigned steps of beta_kl * KL + beta_t * transition error.

    states (B,T+1,s) and y_values (B,T,K) are plain arrays: the task belief
    enters detached so no gradient can reach the high-level layer.  Steps
    whose goal index is negative are skipped and counted in the stats.
    """
    beta_kl, beta_t = betas
    B, T = y_values.shape[0], y_values.shape[1]
    if B == 0 or T == 0:
        raise UsageError("il_loss needs a non-empty batch")
    ego = list(ego_indices)
    # steps are independent given their goals: flatten (b, t) into one batch
    mapping = np.array([[ga.goal_index(t) for t in range(T)] for ga in goals])
    keep = mapping >= 0
    skipped = int((~keep).sum())
    if not keep.any():
        raise UsageError("every step in the batch is missing a goal")
    b_idx, t_idx = np.nonzero(keep)
    y_flat = y_values[b_idx, t_idx]
    s_flat = states[b_idx, t_idx]
    targets = states[b_idx, mapping[b_idx, t_idx]][:, ego]
    noise = noise_rng.standard_normal((len(b_idx), layer.action_dim))

    g = ad.Graph()
    macro = layer.encode(g, y_flat, s_flat, noise)
    prior_lp = prior_fn(g, y_flat, s_flat, macro)
    l_kl = ad.mean(il_kl_loss(macro, prior_lp))
    pred = layer.decode(g, y_flat, macro.z, s_flat[:, ego], training=training, rng=rng)
    l_tr = ad.mean(il_transition_loss(pred, targets))
    loss = ad.add(ad.scale(l_kl, beta_kl), ad.scale(l_tr, beta_t))
    stats = {"loss_kl": l_kl.item(), "loss_transition": l_tr.item(), "skipped_steps": skipped}
    return loss, stats
