"""Independent ground truth for tests and acceptance runs.

The oracles themselves (linear-suite closed form, Monte-Carlo returns,
central finite differences, the alignment metric) are plain numpy with no
dependence on the autodiff engine or the layers' forward paths.  The report
builders then drive the learned system against them and return
pass/fail ``OracleReport`` rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass
class OracleReport:
    """One oracle-vs-system comparison with its pass criterion baked in."""
    name: str
    oracle_value: float
    system_value: float
    tolerance: float
    kind: str = "abs"  # "abs": |oracle-system| <= tol; "min": system >= tolerance

    @property
    def passed(self) -> bool:
        if self.kind == "abs":
            return abs(self.oracle_value - self.system_value) <= self.tolerance
        if self.kind == "min":
            return self.system_value >= self.tolerance
        raise UsageError(f"unknown report kind {self.kind!r}")

    def row(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<44} oracle={self.oracle_value:< 12.6g} "
                f"system={self.system_value:< 12.6g} tol={self.tolerance:.3g} "
                f"[{self.kind}] {flag}")


def macro_oracle(s_t: np.ndarray, actions, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact M-step goal state and cumulative action sum of the linear system.

    Accumulates term by term in step order so the result is bitwise equal to
    iterating the environment (float addition is order-sensitive).
    """
    s_t = np.asarray(s_t, dtype=float)
    B = np.asarray(B, dtype=float)
    goal = s_t.copy()
    total = np.zeros(len(actions[0]) if len(actions) else B.shape[1])
    for a in actions:
        a = np.asarray(a, dtype=float)
        goal = goal + B @ a
        total = total + a
    return goal, total


def mc_return(rewards, gamma: float = 0.99) -> np.ndarray:
    """Per-step discounted returns G_t over one complete episode."""
    rewards = np.asarray(rewards, dtype=float)
    out = np.zeros_like(rewards)
    carry = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        carry = rewards[t] + gamma * carry
        out[t] = carry
    return out


def closed_form_reports(cfg) -> list[OracleReport]:
    """Closed-form checks: env-vs-oracle composition and the return recurrence."""
    from . import envs  # local import keeps this module usable standalone

    (task,), _ = envs.make_suite("linear", 1, 1, seed=cfg.master_seed,
                                 params=cfg.suite_params())
    rng = np.random.default_rng(cfg.master_seed)
    horizon = min(task.horizon, 8)
    actions = rng.uniform(-1, 1, (horizon, task.action_dim))
    state = envs.reset(task, seed=cfg.master_seed)
    s0 = state.s.copy()
    for a in actions:
        state, _, _, _ = envs.step(state, task, a)
    goal, _total = macro_oracle(s0, list(actions), task.matrix)
    reports = [OracleReport("macro_oracle vs env composition (bitwise)", 0.0,
                            float(np.abs(goal - state.s).max()), 0.0)]

    rewards = rng.uniform(0, 2, 50)
    g = mc_return(rewards, cfg.gamma)
    resid = max(abs(g[t] - (rewards[t] + cfg.gamma * g[t + 1])) for t in range(49))
    reports.append(OracleReport("mc_return recurrence residual", 0.0, float(resid), 1e-12))
    return reports


def gradient_reports() -> list[OracleReport]:
    """Finite-difference checks over every primitive and each layer loss.

    Small layer instances keep the central-difference sweep fast; the system
    value is the max relative gradient error, which must stay under 1e-4.
    Each instance is a frozen fixture chosen so its smallest parameter
    gradient sits well above the central-difference rounding floor.
    """
    from . import autodiff as ad
    from . import highlevel, intermediate, lowlevel

    reports = []

    prim_specs = {
        "add/sub/mul/div": lambda g, a, b: ad.vsum(ad.add(ad.mul(a, b), ad.div(
            ad.sub(a, b), ad.shift(ad.square(b), 1.0)))),
        "tanh/sigmoid/exp/log": lambda g, a, b: ad.vsum(ad.tanh(ad.sigmoid(ad.exp(
            ad.log(ad.shift(ad.square(a), 0.5)))))),
        "relu/clip/minimum": lambda g, a, b: ad.vsum(ad.minimum(ad.relu(a),
                                                                ad.clip(b, -0.4, 0.6))),
        "softmax/xlogy": lambda g, a, b: ad.vsum(ad.xlogy(ad.softmax(a),
                                                          ad.shift(ad.square(b), 0.5))),
        "affine/concat/reductions": lambda g, a, b: ad.mean(ad.sum_last(
            ad.square(ad.concat([a, b])))),
    }
    rng = np.random.default_rng(101)
    for name, build in prim_specs.items():
        a = ad.Tensor(rng.uniform(-1, 1, 5))
        b = ad.Tensor(rng.uniform(-1, 1, 5))
        pset = ad.ParameterSet()
        pset.add("a", a)
        pset.add("b", b)

        def loss_fn(build=build, a=a, b=b):
            g = ad.Graph()
            return build(g, g.leaf(a), g.leaf(b))

        err = ad.finite_diff_check(loss_fn, pset)
        reports.append(OracleReport(f"grad {name}", 0.0, float(err), 1e-4))

    rng = np.random.default_rng(102)
    gru = ad.GRUCellParams.create(2, 3, lambda s: rng.uniform(-0.8, 0.8, s))
    gru_set = ad.ParameterSet()
    gru_set.add_all("gru", gru.tensors())
    xs = rng.uniform(-1, 1, (3, 2))

    def gru_loss():
        g = ad.Graph()
        h = g.const(np.zeros(3))
        for x in xs:
            h = ad.gru_cell(g, g.const(x), h, gru)
        return ad.vsum(ad.square(h))

    reports.append(OracleReport("grad gru 3-step chain", 0.0,
                                float(ad.finite_diff_check(gru_loss, gru_set)), 1e-4))

    rng = np.random.default_rng(103)
    head_set = ad.ParameterSet()
    mean_t = head_set.add("mean", ad.Tensor(rng.uniform(-1, 1, 3)))
    std_t = head_set.add("std", ad.Tensor(rng.uniform(-1, 1, 3)))
    noise = rng.standard_normal(3)

    def head_loss():
        g = ad.Graph()
        sample, lp, _ = ad.gaussian_head(g.leaf(mean_t), g.leaf(std_t), (0.5, 1.5), noise)
        squashed, lp = ad.tanh_squash(sample, lp)
        return ad.add(ad.vsum(ad.square(squashed)), lp)

    reports.append(OracleReport("grad gaussian head + tanh squash", 0.0,
                                float(ad.finite_diff_check(head_loss, head_set)), 1e-4))

    rng = np.random.default_rng(9)
    hl = highlevel.HighLevel(2, 2, 3, np.random.default_rng(10), gru_hidden=6,
                             cat_hidden=(8, 8), value_hidden=(8, 8), state_embed=5,
                             action_embed=4, reward_embed=3, dropout=0.7)
    states = rng.standard_normal((1, 4, 2))
    actions = rng.uniform(-1, 1, (1, 3, 2))
    rewards = rng.uniform(0, 1, (1, 3))
    targets = rng.standard_normal((1, 3))

    def hl_loss_fn():
        loss, _ = highlevel.hl_loss(hl, states, actions, rewards, targets,
                                    alphas=(20.0, 1.0, 1.0), training=True,
                                    rng=np.random.default_rng(1234))
        return loss

    reports.append(OracleReport("grad full high-level loss (3 steps)", 0.0,
                                float(ad.finite_diff_check(hl_loss_fn, hl.params)), 1e-4))

    rng = np.random.default_rng(105)
    il = intermediate.Intermediate(3, 2, 2, 2, np.random.default_rng(106),
                                   encoder_hidden=(8, 6), decoder_hidden=(6, 8),
                                   ego_embed=5, dropout=0.7)
    pol = lowlevel.Policy(3, 2, 2, np.random.default_rng(107), hidden=(6, 6))
    il_states = rng.standard_normal((1, 4, 2))
    y_vals = rng.dirichlet(np.ones(3), (1, 3))
    goals = [intermediate.assign_goals(il_states[0], y_vals[0], "cd", 2, 3)]

    def il_loss_fn():
        loss, _ = intermediate.il_loss(
            il, lambda g, yv, sv, m: lowlevel.action_prior_log_density(pol, g, yv, sv, m),
            il_states, y_vals, (0, 1), goals, (1.0, 1.0),
            noise_rng=np.random.default_rng(55), training=True,
            rng=np.random.default_rng(56))
        return loss

    reports.append(OracleReport("grad full intermediate loss", 0.0,
                                float(ad.finite_diff_check(il_loss_fn, il.params)), 1e-4))

    rng = np.random.default_rng(108)
    B = 6
    y_b = rng.dirichlet(np.ones(3), B)
    z_b = rng.uniform(-0.9, 0.9, (B, 2))
    s_b = rng.standard_normal((B, 2))
    a_noise = rng.standard_normal((B, 2))
    act_b, lp_b, pre_b = lowlevel.act(pol, y_b, z_b, s_b, a_noise, mode="train")
    adv = rng.standard_normal(B)

    def ppo_loss_fn():
        loss, _ = lowlevel.ppo_loss(pol, s_b, y_b, z_b, pre_b, act_b, lp_b + 0.05, adv,
                                    eps_clip=0.2, alpha2=1e-2)
        return loss

    reports.append(OracleReport("grad ppo surrogate", 0.0,
                                float(ad.finite_diff_check(ppo_loss_fn, pol.params)), 1e-4))
    return reports


def dataset_from_trajectories(trajectories, lookahead: int) -> list:
    """(y, s, action-window) tuples from serialized trajectories (offline path)."""
    dataset = []
    for tr in trajectories:
        for t in range(tr.length - lookahead + 1):
            dataset.append((tr.y[t], tr.states[t], tr.actions[t:t + lookahead]))
    return dataset


def macro_alignment(encoder_mean_fn, dataset) -> dict:
    """Mean cosine between encoder mean directions and realized action sums.

    ``dataset`` holds (y, s, action_window) tuples from the deterministic
    linear suite; each window of M actions is averaged, tanh-squashed, and
    compared against tanh of the encoder mean at (y, s).  Cosine similarity
    makes the comparison scale-free, which is the testable part of the
    macro-action claim: direction, not magnitude.
    """
    if len(dataset) == 0:
        raise UsageError("alignment needs a non-empty dataset")
    cosines = np.zeros(len(dataset))
    for i, (y, s, window) in enumerate(dataset):
        u = np.asarray(encoder_mean_fn(np.asarray(y, dtype=float), np.asarray(s, dtype=float)))
        window = np.asarray(window, dtype=float)
        v = np.tanh(window.sum(axis=0) / window.shape[0])
        cosines[i] = float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v) + 1e-12))
    qs = np.quantile(cosines, [0.1, 0.5, 0.9])
    return {"mean": float(cosines.mean()), "n": len(dataset),
            "q10": float(qs[0]), "q50": float(qs[1]), "q90": float(qs[2])}
