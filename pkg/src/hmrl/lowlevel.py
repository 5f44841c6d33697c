"""Low-level layer: a PPO policy conditioned on (y, z, s).

The policy is a tanh-Gaussian head over a small MLP trunk.  Task belief and
macro-action enter as plain arrays (constants on the graph), so policy
gradients can never leak into the other layers.  A sign-matching intrinsic
reward pays the policy for agreeing with the macro-action direction, scaled
by the extrinsic reward so it can never dominate task optimality.

Training is standard clipped-surrogate PPO over GAE advantages, with one
deliberate omission: there is no value-loss term here, because the value
function trains inside the high-level objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import UsageError
from .intermediate import MacroAction
from .nets import MLP

SIGN_EPS = 1e-8  # |x| below this counts as sign 0


class Policy:
    """tanh-Gaussian policy pi(a | y, z, s) with a bounded std head."""

    def __init__(self, K: int, action_dim: int, state_dim: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (256, 256), std_range: tuple[float, float] = (0.5, 1.5)):
        self.K = K
        self.action_dim = action_dim
        self.state_dim = state_dim
        self.std_range = std_range
        self.trunk = MLP(K + action_dim + state_dim, tuple(hidden), None, "tanh", rng)
        self.mean_head = MLP(self.trunk.out_dim, (), action_dim, "tanh", rng)
        self.std_head = MLP(self.trunk.out_dim, (), action_dim, "tanh", rng)
        self.params = ad.ParameterSet()
        self.params.add_all("pi/trunk", self.trunk.tensors())
        self.params.add_all("pi/mean_head", self.mean_head.tensors())
        self.params.add_all("pi/std_head", self.std_head.tensors())

    def _as_var(self, g: ad.Graph, x) -> ad.Var:
        return x if isinstance(x, ad.Var) else g.const(np.asarray(x, dtype=float))

    def dist(self, g: ad.Graph, y, z, s, trainable: bool = True) -> tuple[ad.Var, ad.Var]:
        """Distribution parameters (mean_raw, std_raw) at (y, z, s)."""
        x = ad.concat([self._as_var(g, y), self._as_var(g, z), self._as_var(g, s)])
        h = self.trunk.forward(g, x, trainable=trainable)
        return (self.mean_head.forward(g, h, trainable=trainable),
                self.std_head.forward(g, h, trainable=trainable))


def act(policy: Policy, y: np.ndarray, z: np.ndarray, s: np.ndarray, noise: np.ndarray,
        mode: str = "train") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample an action (train) or return tanh(mean) (eval).

    Returns (action, log_prob, presquash); all values, no retained graph.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"act mode must be 'train' or 'eval', got {mode!r}")
    g = ad.Graph()
    mean_raw, std_raw = policy.dist(g, y, z, s)
    if mode == "eval":
        noise = np.zeros_like(np.asarray(noise, dtype=float))
    sample, log_prob, _std = ad.gaussian_head(mean_raw, std_raw, policy.std_range, noise)
    action, log_prob = ad.tanh_squash(sample, log_prob)
    return np.array(action.value), np.array(log_prob.value), np.array(sample.value)


def action_prior_log_density(policy: Policy, g: ad.Graph, y: np.ndarray, s: np.ndarray,
                             macro: MacroAction) -> ad.Var:
    """Log-density of the macro-action under pi(. | y, s, z=0), params detached.

    Policy parameters enter as constants so no gradient reaches them; the
    macro-action path stays live, which is what pulls the encoder toward the
    action distribution.
    """
    z_zero = np.zeros(np.shape(macro.z.value))
    mean_raw, std_raw = policy.dist(g, y, z_zero, s, trainable=False)
    std = ad.bounded_std(std_raw, policy.std_range)
    base = ad.gaussian_log_prob(macro.presquash, mean_raw, std)
    return ad.sub(base, ad.squash_correction(macro.z))


def log_prob_of(policy: Policy, g: ad.Graph, y, z, s, presquash, squashed,
                trainable: bool = True) -> tuple[ad.Var, ad.Var]:
    """Corrected log-density of a stored action under the current policy.

    Returns (log_prob, std).  ``presquash``/``squashed`` are the recorded
    sample and its tanh; passing them as data keeps the squash correction
    constant, so ratios between old and new log-probs depend only on the
    Gaussian parts.
    """
    mean_raw, std_raw = policy.dist(g, y, z, s, trainable=trainable)
    std = ad.bounded_std(std_raw, policy.std_range)
    u = policy._as_var(g, presquash)
    base = ad.gaussian_log_prob(u, mean_raw, std)
    return ad.sub(base, ad.squash_correction(policy._as_var(g, squashed))), std


def sgn(x: np.ndarray) -> np.ndarray:
    """Sign in {-1, 0, +1}; magnitudes below 1e-8 count as zero."""
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < SIGN_EPS, 0.0, np.sign(x))


def intrinsic_reward(z: np.ndarray, a: np.ndarray, r_ext: float) -> float:
    """r_ext times the fraction of action dimensions whose signs agree with z."""
    z, a = np.asarray(z, dtype=float), np.asarray(a, dtype=float)
    if z.shape != a.shape:
        raise UsageError(f"macro-action shape {z.shape} does not match action {a.shape}")
    return float(r_ext) * float((sgn(z) == sgn(a)).mean())


def intrinsic_reward_batch(z: np.ndarray, a: np.ndarray, r_ext: np.ndarray) -> np.ndarray:
    """Vectorized intrinsic reward over a batch of steps."""
    match = (sgn(z) == sgn(a)).mean(axis=-1)
    return np.asarray(r_ext, dtype=float) * match


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
        gamma: float = 0.99, lam: float = 0.90) -> tuple[np.ndarray, np.ndarray]:
    """GAE(lambda) advantages and returns over a flat step stream.

    ``values`` carries one extra trailing entry (the value after the last
    step); entries following a done step are masked out, which implements the
    zero terminal bootstrap.  Returns raw (unnormalized) advantages plus
    ``advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    if len(values) != n + 1 or len(dones) != n:
        raise UsageError(
            f"gae needs len(values) == len(rewards)+1 == len(dones)+1, got "
            f"{len(rewards)}/{len(values)}/{len(dones)}")
    adv = np.zeros(n)
    carry = 0.0
    for t in range(n - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        carry = delta + gamma * lam * live * carry
        adv[t] = carry
    return adv, adv + values[:-1]


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Batch-normalize to mean 0, std 1 (eps-guarded)."""
    adv = np.asarray(adv, dtype=float)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


@dataclass
class RolloutBatch:
    """Flat on-policy step arrays collected in one iteration."""
    s: np.ndarray            # (N, state)
    y: np.ndarray            # (N, K) stored at collection time
    z: np.ndarray            # (N, a) stored at collection time
    actions: np.ndarray      # (N, a)
    presquash: np.ndarray    # (N, a)
    log_prob_old: np.ndarray  # (N,) recorded at collection, never recomputed
    advantages: np.ndarray   # (N,) normalized
    returns: np.ndarray      # (N,)
    values_old: np.ndarray   # (N,)
    dones: np.ndarray        # (N,)
    r_shaped: np.ndarray     # (N,)
    r_in: np.ndarray         # (N,)
    iteration: int = -1
    consumed: bool = field(default=False, compare=False)

    @property
    def size(self) -> int:
        return len(self.log_prob_old)


def ppo_loss(policy: Policy, s, y, z, presquash, actions, log_prob_old, advantages,
             eps_clip: float = 0.2, alpha2: float = 1e-2) -> tuple[ad.Var, dict]:
    """Clipped-surrogate PPO objective with an entropy bonus and no value term.

    Advantages are treated as precomputed constants; the entropy is the
    closed-form entropy of the pre-squash Gaussian, which is finite and
    monotone in the bounded std.
    """
    g = ad.Graph()
    lp_new, std = log_prob_of(policy, g, y, z, s, presquash, actions)
    ratio = ad.exp(ad.sub(lp_new, g.const(np.asarray(log_prob_old, dtype=float))))
    adv = g.const(np.asarray(advantages, dtype=float))
    surr = ad.minimum(ad.mul(ratio, adv),
                      ad.mul(ad.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip), adv))
    a_dim = policy.action_dim
    entropy = ad.shift(ad.sum_last(ad.log(std)), 0.5 * a_dim * (1.0 + math.log(2.0 * math.pi)))
    loss = ad.sub(ad.scale(ad.mean(surr), -1.0), ad.scale(ad.mean(entropy), alpha2))
    ratio_v = np.atleast_1d(ratio.value)
    stats = {
        "surrogate": -float(np.mean(np.minimum(
            ratio_v * advantages,
            np.clip(ratio_v, 1.0 - eps_clip, 1.0 + eps_clip) * advantages))),
        "mean_ratio": float(ratio_v.mean()),
        "clip_fraction": float((np.abs(ratio_v - 1.0) > eps_clip).mean()),
        "entropy": float(np.mean(entropy.value)),
    }
    return loss, stats


def ll_update(policy: Policy, batch: RolloutBatch, lr: float, k_epochs: int = 5,
              minibatch_size: int = 256, eps_clip: float = 0.2, alpha2: float = 1e-2,
              rng: np.random.Generator | None = None) -> dict:
    """K epochs of minibatched Adam on the PPO loss; touches policy params only."""
    if batch.consumed:
        raise UsageError("rollout batch was already consumed; collect a fresh one")
    batch.consumed = True
    rng = rng or np.random.default_rng(0)
    n = batch.size
    agg: dict[str, list] = {"surrogate": [], "mean_ratio": [], "clip_fraction": [], "entropy": []}
    epochs_run = 0
    for _ in range(k_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, minibatch_size):
            idx = perm[start:start + minibatch_size]
            loss, stats = ppo_loss(
                policy, batch.s[idx], batch.y[idx], batch.z[idx], batch.presquash[idx],
                batch.actions[idx], batch.log_prob_old[idx], batch.advantages[idx],
                eps_clip=eps_clip, alpha2=alpha2)
            loss.graph.backward(loss)
            ad.adam_step(policy.params, lr)
            for k in agg:
                agg[k].append(stats[k])
        epochs_run += 1
    out = {k: float(np.mean(v)) for k, v in agg.items()}
    out["epochs"] = epochs_run
    return out
