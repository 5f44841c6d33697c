"""Training orchestration: collect, refresh the buffer, update the layers.

One iteration runs three phases.  (1) Roll full episodes on every training
task with the current policy and push them into the FIFO trajectory buffer.
(2) Hierarchical phase: on each buffer minibatch, evaluate the high-level and
intermediate losses (recomputing representations under current parameters)
and step their two optimizers.  (3) Policy phase: PPO for K epochs on this
iteration's fresh on-policy batch only, using the y/z/log-prob values stored
at collection time so first-pass ratios are exactly one.

All randomness derives from the master seed through fixed spawn keys, so a
run is reproducible bit for bit; per-episode seeds derive from
(master seed, iteration, task index, episode index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import envs, highlevel, intermediate, lowlevel, oracle
from .config import RunConfig
from .errors import ConfigurationError, NumericError, UsageError

CHECKPOINT_VERSION = 1

# spawn-key tags for the deterministic rng tree
_INIT, _COLLECT, _HLIL, _PPO, _EVAL, _ILNOISE, _DROPOUT = range(7)


def rng_from(master_seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


def seed_from(master_seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def downstream_y(y: np.ndarray, one_hot: bool) -> np.ndarray:
    """Optionally harden the belief to one-hot before the lower layers see it."""
    if not one_hot:
        return y
    y = np.asarray(y, dtype=float)
    idx = y.argmax(axis=-1)
    return np.eye(y.shape[-1])[idx]


class ReplayBuffer:
    """FIFO ring of complete trajectories; eviction is strictly oldest-first."""

    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ConfigurationError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: list[envs.Trajectory] = []
        self.inserted = 0

    def __len__(self) -> int:
        return len(self._items)

    def items(self) -> tuple:
        return tuple(self._items)

    def push(self, trajectories) -> None:
        for traj in trajectories:
            self._items.append(traj)
            self.inserted += 1
        overflow = len(self._items) - self.capacity
        if overflow > 0:
            del self._items[:overflow]

    def sample(self, rng: np.random.Generator, k: int) -> list:
        if not self._items:
            raise UsageError("cannot sample from an empty buffer")
        replace = len(self._items) < k
        idx = rng.choice(len(self._items), size=k, replace=replace)
        return [self._items[i] for i in idx]


def buffer_push(buf: ReplayBuffer, trajectories) -> None:
    buf.push(trajectories)


@dataclass
class RunState:
    """Everything that evolves over a run: the three layers and the clock."""
    cfg: RunConfig
    highlevel: highlevel.HighLevel
    intermediate: intermediate.Intermediate
    policy: lowlevel.Policy
    master_seed: int
    iteration: int = 0
    inject_nan: str = ""  # test hook: "hl" | "il" | "ppo" forces a NaN loss
    rows: list = field(default_factory=list)

    @property
    def ego_indices(self) -> tuple:
        return envs.ego_mask_for(self.cfg.suite, self.cfg.state_dim).indices


def assert_parameter_partition(*psets: ad.ParameterSet) -> None:
    seen_ids: dict[int, str] = {}
    for pset in psets:
        for path, t in pset.items():
            if id(t) in seen_ids:
                raise UsageError(f"parameter {path} already owned as {seen_ids[id(t)]}")
            seen_ids[id(t)] = path


def build_run_state(cfg: RunConfig, master_seed: int | None = None) -> RunState:
    seed = cfg.master_seed if master_seed is None else master_seed
    hl = highlevel.HighLevel(
        cfg.state_dim, cfg.action_dim, cfg.task_inference_dim, rng_from(seed, _INIT, 0),
        gru_hidden=cfg.gru_hidden, cat_hidden=cfg.cat_hidden, value_hidden=cfg.value_hidden,
        state_embed=cfg.state_embed, action_embed=cfg.action_embed,
        reward_embed=cfg.reward_embed, dropout=cfg.dropout)
    ego = envs.ego_mask_for(cfg.suite, cfg.state_dim)
    il = intermediate.Intermediate(
        cfg.task_inference_dim, cfg.state_dim, cfg.action_dim, len(ego),
        rng_from(seed, _INIT, 1), encoder_hidden=cfg.encoder_hidden,
        decoder_hidden=cfg.decoder_hidden, ego_embed=cfg.il_ego_embed,
        dropout=cfg.dropout, std_range=cfg.std_range)
    pi = lowlevel.Policy(cfg.task_inference_dim, cfg.action_dim, cfg.state_dim,
                         rng_from(seed, _INIT, 2), hidden=cfg.policy_hidden,
                         std_range=cfg.std_range)
    assert_parameter_partition(hl.params, il.params, pi.params)
    return RunState(cfg=cfg, highlevel=hl, intermediate=il, policy=pi, master_seed=seed)


def collect(run: RunState, tasks, iteration: int, episodes_per_task: int | None = None,
            mode: str = "train", tag: int = _COLLECT) -> list[envs.Trajectory]:
    """Roll full episodes on every task, recording per-step latents.

    The recurrent state resets at each episode start.  Representations are
    computed in eval mode (no dropout); the policy samples in train mode and
    plays tanh(mean) in eval mode.
    """
    cfg = run.cfg
    episodes = cfg.episodes_per_task if episodes_per_task is None else episodes_per_task
    pairs = [(ti, ei) for ti in range(len(tasks)) for ei in range(episodes)]
    B, T = len(pairs), cfg.horizon
    a_dim = cfg.action_dim

    env_states = []
    noise_rngs = []
    for ti, ei in pairs:
        env_states.append(envs.reset(tasks[ti], seed_from(run.master_seed, tag, iteration, ti, ei)))
        noise_rngs.append(rng_from(run.master_seed, tag, iteration, ti, ei, 1))

    h = run.highlevel.zero_hidden(B)
    g0 = ad.Graph()
    y = np.array(run.highlevel.represent(g0, g0.const(h)).value)

    rec = {k: [] for k in ("s", "a", "presquash", "r_ext", "r_shaped", "r_in",
                           "log_prob", "value", "y", "z", "h", "success")}
    clamp_before = [es.clamp_count for es in env_states]

    for t in range(T):
        s = np.stack([es.s for es in env_states])
        y_down = downstream_y(y, cfg.y_one_hot_downstream)
        z_noise = np.stack([r.standard_normal(a_dim) for r in noise_rngs])
        a_noise = np.stack([r.standard_normal(a_dim) for r in noise_rngs])
        if mode == "eval":
            z_noise = np.zeros_like(z_noise)
            a_noise = np.zeros_like(a_noise)

        g = ad.Graph()
        macro = run.intermediate.encode(g, y_down, s, z_noise)
        z = np.array(macro.z.value)
        value = np.array(run.highlevel.value(g, g.const(y), s).value)
        mean_raw, std_raw = run.policy.dist(g, y_down, z, s)
        sample, lp, _ = ad.gaussian_head(mean_raw, std_raw, run.policy.std_range, a_noise)
        action_var, lp = ad.tanh_squash(sample, lp)
        actions = np.array(action_var.value)
        log_prob = np.array(lp.value)
        presquash = np.array(sample.value)

        r_ext = np.zeros(B)
        success = np.zeros(B, dtype=bool)
        for b, (ti, _ei) in enumerate(pairs):
            env_states[b], r, _done, succ = envs.step(env_states[b], tasks[ti], actions[b])
            r_ext[b] = r
            success[b] = succ
        r_shaped = np.array([envs.shape_reward(r, cfg.reward_shape_a) for r in r_ext])
        scale = r_shaped if cfg.intrinsic_scale == "shaped" else r_ext
        r_in = lowlevel.intrinsic_reward_batch(z, actions, scale)
        assert (r_in >= 0.0).all() and (r_in <= scale + 1e-12).all()

        rec["s"].append(s)
        rec["a"].append(actions)
        rec["presquash"].append(presquash)
        rec["r_ext"].append(r_ext)
        rec["r_shaped"].append(r_shaped)
        rec["r_in"].append(r_in)
        rec["log_prob"].append(log_prob)
        rec["value"].append(value)
        rec["y"].append(y.copy())
        rec["z"].append(z)
        rec["h"].append(h.copy())
        rec["success"].append(success)

        if t < T - 1:
            y_var, h_var = run.highlevel.ingest(g, s, actions, r_shaped, g.const(h))
            y = np.array(y_var.value)
            h = np.array(h_var.value)

    final_s = np.stack([es.s for es in env_states])
    stacked = {k: np.stack(v) for k, v in rec.items()}  # (T, B, ...)
    out = []
    for b, (ti, _ei) in enumerate(pairs):
        states = np.concatenate([stacked["s"][:, b], final_s[b][None, :]], axis=0)
        out.append(envs.Trajectory(
            task_index=tasks[ti].task_index, states=states, actions=stacked["a"][:, b],
            presquash=stacked["presquash"][:, b], r_ext=stacked["r_ext"][:, b],
            r_shaped=stacked["r_shaped"][:, b], r_in=stacked["r_in"][:, b],
            log_probs=stacked["log_prob"][:, b], values=stacked["value"][:, b],
            y=stacked["y"][:, b], z=stacked["z"][:, b], h=stacked["h"][:, b],
            success=stacked["success"][:, b],
            clamp_count=env_states[b].clamp_count - clamp_before[b]))
    return out


def trajectory_metrics(trajs) -> dict:
    """Per-split summary: latched success, terminal success, raw return."""
    avg = [envs.avg_episode_success(tr.success) for tr in trajs]
    term = [envs.terminal_success(tr.success) for tr in trajs]
    ret = [float(tr.r_ext.sum()) for tr in trajs]
    return {
        "avg_success_mean": float(np.mean(avg)), "avg_success_std": float(np.std(avg)),
        "term_success_mean": float(np.mean(term)), "term_success_std": float(np.std(term)),
        "return_mean": float(np.mean(ret)), "return_std": float(np.std(ret)),
    }


def build_rollout_batch(trajs, cfg: RunConfig, iteration: int) -> lowlevel.RolloutBatch:
    """Flatten this iteration's trajectories into the PPO batch.

    Uses the collection-time y/z/log-probs verbatim (never recomputed) and
    GAE over the total reward stream with the collection-time values.
    """
    s = np.concatenate([tr.states[:-1] for tr in trajs])
    y = np.concatenate([downstream_y(tr.y, cfg.y_one_hot_downstream) for tr in trajs])
    z = np.concatenate([tr.z for tr in trajs])
    actions = np.concatenate([tr.actions for tr in trajs])
    presquash = np.concatenate([tr.presquash for tr in trajs])
    log_prob_old = np.concatenate([tr.log_probs for tr in trajs])
    values = np.concatenate([tr.values for tr in trajs])
    r_total = np.concatenate([tr.r_total for tr in trajs])
    r_shaped = np.concatenate([tr.r_shaped for tr in trajs])
    r_in = np.concatenate([tr.r_in for tr in trajs])
    dones = np.concatenate([
        np.arange(tr.length) == tr.length - 1 for tr in trajs]).astype(bool)
    adv, returns = lowlevel.gae(r_total, np.append(values, 0.0), dones,
                                gamma=cfg.gamma, lam=cfg.gae_lambda)
    return lowlevel.RolloutBatch(
        s=s, y=y, z=z, actions=actions, presquash=presquash, log_prob_old=log_prob_old,
        advantages=lowlevel.normalize_advantages(adv), returns=returns, values_old=values,
        dones=dones, r_shaped=r_shaped, r_in=r_in, iteration=iteration)


def hierarchical_update(run: RunState, buffer: ReplayBuffer) -> dict:
    """Minibatched HL+IL phase: evaluate both losses, then step both optimizers."""
    cfg = run.cfg
    it = run.iteration
    sampler = rng_from(run.master_seed, _HLIL, it)
    acc: dict[str, list] = {}
    for m in range(cfg.hl_minibatches):
        batch = buffer.sample(sampler, cfg.hl_minibatch_trajs)
        states = np.stack([tr.states for tr in batch])
        actions = np.stack([tr.actions for tr in batch])
        rewards = np.stack([tr.r_shaped for tr in batch])
        targets = np.stack([oracle.mc_return(tr.r_total, cfg.gamma) for tr in batch])

        loss_hl, hl_stats = highlevel.hl_loss(
            run.highlevel, states, actions, rewards, targets,
            alphas=(cfg.alpha_value, cfg.alpha_entropy, cfg.alpha_occupancy),
            training=True, rng=rng_from(run.master_seed, _DROPOUT, it, m, 0))
        y_vals = hl_stats.pop("y_values")
        if run.inject_nan == "hl":
            hl_stats["loss_value"] = float("nan")
        if not all(np.isfinite(v) for v in hl_stats.values()):
            raise NumericError(f"high-level loss became non-finite at iteration {it}")
        loss_hl.graph.backward(loss_hl)

        goals = [intermediate.assign_goals(tr.states, tr.y, cfg.goal_strategy,
                                           cfg.goal_lookahead, tr.length) for tr in batch]
        y_down = downstream_y(y_vals, cfg.y_one_hot_downstream)

        def prior_fn(g, yv, sv, macro):
            return lowlevel.action_prior_log_density(run.policy, g, yv, sv, macro)

        loss_il, il_stats = intermediate.il_loss(
            run.intermediate, prior_fn, states, y_down, run.ego_indices, goals,
            betas=(cfg.beta_kl, cfg.beta_transition),
            noise_rng=rng_from(run.master_seed, _ILNOISE, it, m),
            training=True, rng=rng_from(run.master_seed, _DROPOUT, it, m, 1))
        if run.inject_nan == "il":
            il_stats["loss_kl"] = float("nan")
        if not all(np.isfinite(v) for v in il_stats.values()):
            raise NumericError(f"intermediate loss became non-finite at iteration {it}")
        loss_il.graph.backward(loss_il)

        ad.adam_step(run.highlevel.params, cfg.lr_highlevel)
        ad.adam_step(run.intermediate.params, cfg.lr_intermediate)

        for k, v in {**hl_stats, **il_stats}.items():
            acc.setdefault(k, []).append(v)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def train_iteration(run: RunState, buffer: ReplayBuffer, train_tasks, test_tasks) -> dict:
    """One full pass of collection, hierarchical training and PPO; returns the stats row."""
    cfg = run.cfg
    it = run.iteration
    trajs = collect(run, train_tasks, it, mode="train")
    buffer_push(buffer, trajs)

    hier_stats = hierarchical_update(run, buffer)

    batch = build_rollout_batch(trajs, cfg, iteration=it)
    ppo_stats = lowlevel.ll_update(
        run.policy, batch, lr=cfg.lr_policy, k_epochs=cfg.k_epochs,
        minibatch_size=cfg.ppo_minibatch, eps_clip=cfg.clip_epsilon,
        alpha2=cfg.entropy_scaler, rng=rng_from(run.master_seed, _PPO, it))
    if run.inject_nan == "ppo":
        ppo_stats["surrogate"] = float("nan")
    if not np.isfinite(ppo_stats["surrogate"]):
        raise NumericError(f"policy surrogate loss became non-finite at iteration {it}")

    eval_eps = cfg.eval_episodes_per_task or cfg.episodes_per_task
    test_trajs = collect(run, test_tasks, it, episodes_per_task=eval_eps,
                         mode="eval", tag=_EVAL)
    train_m = trajectory_metrics(trajs)
    test_m = trajectory_metrics(test_trajs)

    row = {"iteration": it}
    row.update({f"train_{k}": v for k, v in train_m.items()})
    row.update({f"test_{k}": v for k, v in test_m.items()})
    for k in ("loss_value", "loss_entropy_reg", "loss_occupancy", "loss_kl",
              "loss_transition", "skipped_steps"):
        row[k] = hier_stats[k]
    row["ppo_surrogate"] = ppo_stats["surrogate"]
    row["policy_entropy"] = ppo_stats["entropy"]
    row["clip_fraction"] = ppo_stats["clip_fraction"]
    row["mean_ratio"] = ppo_stats["mean_ratio"]
    run.rows.append(row)
    run.iteration += 1
    return row


def alignment_dataset(run: RunState, tasks, episodes_per_task: int, lookahead: int,
                      iteration: int = 0) -> list:
    """Held-out (y, s, action-window) tuples for the macro-alignment oracle.

    Fresh deterministic (eval-mode) rollouts; only steps whose full M-step
    window fits inside the episode contribute.  The belief passed along is
    the one the encoder actually consumed (downstream form).
    """
    trajs = collect(run, tasks, iteration, episodes_per_task=episodes_per_task,
                    mode="eval", tag=_EVAL)
    dataset = []
    for tr in trajs:
        y_down = downstream_y(tr.y, run.cfg.y_one_hot_downstream)
        for t in range(tr.length - lookahead + 1):
            dataset.append((y_down[t], tr.states[t], tr.actions[t:t + lookahead]))
    return dataset


# ------------------------------------------------------------- checkpoints

def _param_sets(run: RunState) -> dict[str, ad.ParameterSet]:
    return {"hl": run.highlevel.params, "il": run.intermediate.params,
            "pi": run.policy.params}


def save_checkpoint(path, run: RunState) -> None:
    """Single-file snapshot: parameters, Adam moments, iteration, master seed."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": run.iteration,
        "master_seed": run.master_seed,
        "step_counts": {k: ps.step_count for k, ps in _param_sets(run).items()},
        "dims": {"state_dim": run.cfg.state_dim, "action_dim": run.cfg.action_dim,
                 "K": run.cfg.task_inference_dim, "suite": run.cfg.suite},
    }
    arrays = {}
    for set_name, pset in _param_sets(run).items():
        for p_path, t in pset.items():
            m, v = pset.moments(p_path)
            arrays[f"param::{set_name}::{p_path}"] = t.data
            arrays[f"adam_m::{set_name}::{p_path}"] = m
            arrays[f"adam_v::{set_name}::{p_path}"] = v
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_checkpoint(path, cfg: RunConfig) -> RunState:
    """Rebuild a RunState bit-identically from a checkpoint file."""
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["meta"]))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise UsageError(f"unsupported checkpoint version {meta.get('version')}")
    dims = meta["dims"]
    if (dims["state_dim"], dims["action_dim"], dims["K"], dims["suite"]) != \
            (cfg.state_dim, cfg.action_dim, cfg.task_inference_dim, cfg.suite):
        raise ConfigurationError(
            f"checkpoint dims {dims} do not match config "
            f"(state {cfg.state_dim}, action {cfg.action_dim}, K {cfg.task_inference_dim}, "
            f"suite {cfg.suite})")
    run = build_run_state(cfg, master_seed=meta["master_seed"])
    run.iteration = int(meta["iteration"])
    for set_name, pset in _param_sets(run).items():
        pset.step_count = int(meta["step_counts"][set_name])
        for p_path, t in pset.items():
            stored = data[f"param::{set_name}::{p_path}"]
            if stored.shape != t.data.shape:
                raise ConfigurationError(
                    f"checkpoint parameter {p_path} has {stored.shape}, expected {t.data.shape}")
            t.data[:] = stored
            m, v = pset.moments(p_path)
            m[:] = data[f"adam_m::{set_name}::{p_path}"]
            v[:] = data[f"adam_v::{set_name}::{p_path}"]
    return run
