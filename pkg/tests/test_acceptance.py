"""Acceptance suite: one test class per criterion, each printing a PASS line.

The desk-scale learning runs (criteria 4-6) use raised learning rates and
small network sizes via config overrides; everything else runs at the
stock defaults.  The nine nav2d training runs execute through the real
CLI in parallel subprocesses (single-threaded BLAS each) and are shared
between criteria 6 and 9 through a session fixture.
"""

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from hmrl import autodiff as ad
from hmrl import cli, envs, highlevel, intermediate, lowlevel, oracle, trainer
from hmrl.config import RunConfig, format_config, parse_config_text


def report(criterion: str, detail: str) -> None:
    print(f"[criterion {criterion}] PASS - {detail}")


SMALL_NETS = dict(
    gru_hidden=8, cat_hidden=(8, 8), value_hidden=(8, 8), state_embed=6,
    action_embed=4, reward_embed=3, encoder_hidden=(8, 8), decoder_hidden=(8, 8),
    il_ego_embed=6, policy_hidden=(8, 8), dropout=0.0, ppo_minibatch=16)

DESK_NETS = dict(
    gru_hidden=32, cat_hidden=(64, 64), value_hidden=(64, 64), state_embed=16,
    action_embed=8, reward_embed=4, encoder_hidden=(32, 32), decoder_hidden=(32, 32),
    il_ego_embed=16, policy_hidden=(64, 64), dropout=0.0)

DESK_NAV2D_CFG = """
suite = nav2d
n_train_tasks = 4
n_test_tasks = 2
horizon = 60
episodes_per_task = 5
eval_episodes_per_task = 2
task_inference_dim = 4
goal_strategy = {strategy}
goal_lookahead = 5
nav2d_arena_diameter = 2.0
nav2d_success_radius = 0.3
nav2d_goal_radius = 0.8
gamma = 0.95
entropy_scaler = 1e-3
intrinsic_scale = raw
lr_highlevel = 1e-3
lr_intermediate = 1e-3
lr_policy = 3e-4
hl_minibatches = 2
hl_minibatch_trajs = 8
iterations = 500
checkpoint_every = 500
master_seed = {seed}
gru_hidden = 32
cat_hidden = 64,64
value_hidden = 64,64
state_embed = 16
action_embed = 8
reward_embed = 4
encoder_hidden = 32,32
decoder_hidden = 32,32
il_ego_embed = 16
policy_hidden = 64,64
dropout = 0.0
"""

DESK_SEEDS = (0, 1, 2)
DESK_STRATEGIES = ("cd", "cm", "st")


class TestCriterion1GradientCorrectness:
    def test_finite_difference_suite(self):
        t0 = time.perf_counter()
        reports = oracle.gradient_reports()
        elapsed = time.perf_counter() - t0
        names = [r.name for r in reports]
        assert any("high-level loss" in n for n in names)
        assert any("intermediate loss" in n for n in names)
        assert any("ppo surrogate" in n for n in names)
        assert sum("grad" in n for n in names) >= 8  # primitives covered
        worst = max(r.system_value for r in reports)
        for r in reports:
            assert r.passed, r.row()
        assert elapsed < 60.0
        report("1", f"max relative gradient error {worst:.3g} < 1e-4 "
                    f"over {len(reports)} checks in {elapsed:.1f}s")


class TestCriterion2LossHandValues:
    def test_hand_values(self):
        g = ad.Graph()
        ent = highlevel.entropy_regularizer(
            g.const(np.array([0.0, 1.0, 0.0, 0.0])), np.full(4, 0.25)).item()
        assert ent == pytest.approx(math.log(0.25), abs=1e-9)  # -1.3862943611...

        occ_last = highlevel.occupancy_loss(g.const(np.array([0.0, 0.0, 1.0])), 3).item()
        assert occ_last == pytest.approx(-math.log(3.0), abs=1e-9)  # -1.0986122887...
        occ_first = highlevel.occupancy_loss(g.const(np.array([1.0, 0.0, 0.0])), 3).item()
        assert occ_first == pytest.approx(-math.exp(-2.0) * math.log(3.0), abs=1e-9)

        vl = highlevel.value_loss(g.const(np.asarray(2.0)), 5.0).item()
        assert vl == 9.0

        r_in = lowlevel.intrinsic_reward(np.array([0.5, -0.2, 0.1, -0.9]),
                                         np.array([0.3, -0.1, -0.2, -0.5]), 2.0)
        assert r_in == 1.5

        assert envs.shape_reward(0.0, 3.0) == 0.0
        knee = math.log(math.exp(3.0) - 3.0 + 1.0)  # 2.8951125538 by direct evaluation
        assert envs.shape_reward(3.0, 3.0) == pytest.approx(knee, abs=1e-5)
        assert envs.shape_reward(4.0, 3.0) == 3.3
        report("2", "entropy/occupancy/value/intrinsic/shaping hand values exact")


def tiny_run(seed=11, **overrides):
    base = dict(suite="nav2d", n_train_tasks=3, n_test_tasks=2, horizon=6,
                episodes_per_task=2, task_inference_dim=3, goal_lookahead=2,
                lr_highlevel=1e-3, lr_intermediate=1e-3, lr_policy=1e-3,
                hl_minibatches=2, hl_minibatch_trajs=3, master_seed=seed, **SMALL_NETS)
    base.update(overrides)
    cfg = RunConfig(**base)
    train_tasks, test_tasks = envs.make_suite(cfg.suite, cfg.n_train_tasks,
                                              cfg.n_test_tasks, cfg.master_seed,
                                              cfg.suite_params())
    return cfg, trainer.build_run_state(cfg), trainer.ReplayBuffer(cfg.buffer_capacity), \
        train_tasks, test_tasks


class TestCriterion3GradientIsolation:
    @staticmethod
    def grads_zero(pset):
        return all(t.grad is None or not np.abs(t.grad).any() for t in pset.tensors())

    def test_losses_touch_only_their_layer(self):
        t0 = time.perf_counter()
        cfg, run, buf, train_tasks, test_tasks = tiny_run()
        trajs = trainer.collect(run, train_tasks, iteration=0)
        pair = trajs[:2]
        states = np.stack([tr.states for tr in pair])
        actions = np.stack([tr.actions for tr in pair])
        rewards = np.stack([tr.r_shaped for tr in pair])
        targets = np.stack([oracle.mc_return(tr.r_total, cfg.gamma) for tr in pair])

        loss, _ = highlevel.hl_loss(run.highlevel, states, actions, rewards, targets,
                                    alphas=(20.0, 1.0, 1.0), training=False)
        loss.graph.backward(loss)
        assert not self.grads_zero(run.highlevel.params)
        assert self.grads_zero(run.intermediate.params)
        assert self.grads_zero(run.policy.params)
        run.highlevel.params.clear_grads()

        goals = [intermediate.assign_goals(tr.states, tr.y, "cd", 2, tr.length)
                 for tr in pair]
        y_vals = np.stack([tr.y for tr in pair])
        prior = lambda g, yv, sv, m: lowlevel.action_prior_log_density(run.policy, g, yv, sv, m)
        loss, _ = intermediate.il_loss(run.intermediate, prior, states, y_vals,
                                       run.ego_indices, goals, (1.0, 1.0),
                                       noise_rng=np.random.default_rng(0), training=False)
        loss.graph.backward(loss)
        assert not self.grads_zero(run.intermediate.params)
        assert self.grads_zero(run.highlevel.params)
        assert self.grads_zero(run.policy.params)
        run.intermediate.params.clear_grads()

        batch = trainer.build_rollout_batch(trajs, cfg, iteration=0)
        loss, _ = lowlevel.ppo_loss(run.policy, batch.s, batch.y, batch.z, batch.presquash,
                                    batch.actions, batch.log_prob_old, batch.advantages)
        loss.graph.backward(loss)
        assert not self.grads_zero(run.policy.params)
        assert self.grads_zero(run.highlevel.params)
        assert self.grads_zero(run.intermediate.params)
        run.policy.params.clear_grads()

        before = {k: t.data.copy() for k, t in run.policy.params.items()}
        trainer.buffer_push(buf, trajs)
        trainer.hierarchical_update(run, buf)
        for k, t in run.policy.params.items():
            assert (t.data == before[k]).all()
        report("3", f"layer losses produce zero foreign gradients; policy bitwise "
                    f"unchanged by hierarchical updates ({time.perf_counter() - t0:.1f}s)")


class TestCriterion4LinearMacroAlignment:
    def test_encoder_recovers_action_sums(self):
        t0 = time.perf_counter()
        cfg = RunConfig(suite="linear", n_train_tasks=4, n_test_tasks=1, horizon=30,
                        linear_perturb=0.0, episodes_per_task=5, eval_episodes_per_task=2,
                        task_inference_dim=4, goal_strategy="cd", goal_lookahead=5,
                        lr_highlevel=1e-3, lr_intermediate=1e-3, lr_policy=1e-3,
                        hl_minibatches=2, hl_minibatch_trajs=8, master_seed=0, **DESK_NETS)
        train_tasks, test_tasks = envs.make_suite(cfg.suite, 4, 1, cfg.master_seed,
                                                  cfg.suite_params())
        for task in train_tasks:
            np.testing.assert_array_equal(task.matrix, np.eye(2))
        run = trainer.build_run_state(cfg)
        buf = trainer.ReplayBuffer(cfg.buffer_capacity)

        def alignment():
            ds = trainer.alignment_dataset(run, train_tasks, cfg.episodes_per_task,
                                           cfg.goal_lookahead, iteration=12345)
            return oracle.macro_alignment(run.intermediate.encoder_mean, ds)

        base = alignment()
        assert base["n"] >= 500
        assert abs(base["mean"]) <= 0.1  # untrained baseline sits at zero

        iterations = 200  # within the <= 300 budget
        for _ in range(iterations):
            trainer.train_iteration(run, buf, train_tasks, test_tasks)
        trained = alignment()
        elapsed = time.perf_counter() - t0
        assert trained["mean"] >= 0.8
        assert elapsed <= 600.0
        report("4", f"alignment {base['mean']:+.3f} -> {trained['mean']:.3f} "
                    f"(threshold 0.8, n={trained['n']}) after {iterations} iterations "
                    f"in {elapsed:.0f}s")


class TestCriterion5DecoderTransitionPredictor:
    def test_frozen_dataset_loss_drops_to_a_tenth(self):
        t0 = time.perf_counter()
        cfg = RunConfig(suite="linear", n_train_tasks=1, n_test_tasks=1, horizon=30,
                        linear_perturb=0.0, reset_jitter=0.5, task_inference_dim=4,
                        goal_lookahead=5, master_seed=3, **SMALL_NETS)
        cfg = RunConfig(**{**cfg.__dict__, "encoder_hidden": (32, 32),
                           "decoder_hidden": (32, 32), "il_ego_embed": 16})
        (task,), _ = envs.make_suite("linear", 1, 1, cfg.master_seed, cfg.suite_params())
        run = trainer.build_run_state(cfg)
        M, T = cfg.goal_lookahead, cfg.horizon
        il = run.intermediate

        # frozen dataset: a scripted proportional controller explores the task
        # while the untrained recurrent layer supplies the (frozen) beliefs
        ys, ss, targets = [], [], []
        controller = lambda s: np.tanh(1.5 * (task.goal_array - s))
        for ep in range(195):
            state = envs.reset(task, seed=ep)
            states = [state.s.copy()]
            rewards = []
            for t in range(T):
                state, r, _, _ = envs.step(state, task, controller(states[-1]))
                states.append(state.s.copy())
                rewards.append(r)
            states = np.array(states)
            rep = highlevel.initial_representation(run.highlevel)
            for t in range(T - M + 1):
                ys.append(rep.y.copy())
                ss.append(states[t])
                targets.append(states[min((t // M + 1) * M, T)])
                rep = highlevel.hl_forward(
                    run.highlevel, (states[t], controller(states[t]), rewards[t],
                                    states[t + 1]), rep.h)
        ys, ss, targets = np.array(ys), np.array(ss), np.array(targets)
        assert len(ys) >= 5000

        rng = np.random.default_rng(0)

        def transition_loss(idx, noise=None):
            g = ad.Graph()
            n = noise if noise is not None else rng.standard_normal((len(idx), 2))
            macro = il.encode(g, ys[idx], ss[idx], n)
            pred = il.decode(g, ys[idx], macro.z, ss[idx])
            return ad.mean(intermediate.il_transition_loss(pred, targets[idx]))

        probe = np.arange(2000)
        zero_noise = np.zeros((2000, 2))
        initial = transition_loss(probe, zero_noise).item()
        err_before = self._mean_error(il, ys, ss, targets)
        for _ in range(2000):
            idx = rng.integers(0, len(ys), 256)
            loss = transition_loss(idx)
            loss.graph.backward(loss)
            ad.adam_step(il.params, 1e-3)
        final = transition_loss(probe, zero_noise).item()
        err_after = self._mean_error(il, ys, ss, targets)
        elapsed = time.perf_counter() - t0
        assert final <= 0.1 * initial
        assert err_after * 10.0 <= err_before  # prediction error drops >= 10x
        assert elapsed <= 120.0
        report("5", f"transition loss {initial:.3f} -> {final:.5f} "
                    f"({final / initial:.2%} of initial), error {err_before:.2f} -> "
                    f"{err_after:.4f} in {elapsed:.0f}s")

    @staticmethod
    def _mean_error(il, ys, ss, targets):
        g = ad.Graph()
        macro = il.encode(g, ys[:2000], ss[:2000], np.zeros((2000, 2)))
        pred = il.decode(g, ys[:2000], macro.z, ss[:2000])
        return float(np.linalg.norm(pred.value - targets[:2000], axis=1).mean())


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Train the 3 strategies x 3 seeds nav2d matrix through the CLI."""
    root = tmp_path_factory.mktemp("desk_nav2d")
    env = {**os.environ, "OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1",
           "MKL_NUM_THREADS": "1"}
    jobs = []
    for strategy in DESK_STRATEGIES:
        for seed in DESK_SEEDS:
            out = root / f"{strategy}_s{seed}"
            cfg_path = root / f"{strategy}_s{seed}.cfg"
            cfg_path.write_text(DESK_NAV2D_CFG.format(strategy=strategy, seed=seed))
            jobs.append((strategy, seed, cfg_path, out))

    t0 = time.perf_counter()
    workers = max(2, min(2, os.cpu_count() or 2))
    pending = list(jobs)
    running: list[tuple] = []
    dirs = {}
    while pending or running:
        while pending and len(running) < workers:
            strategy, seed, cfg_path, out = pending.pop(0)
            log = open(out.parent / f"{out.name}.log", "w")
            proc = subprocess.Popen(
                [sys.executable, "-m", "hmrl.cli", "train", "--config", str(cfg_path),
                 "--out", str(out)], env=env, stdout=log, stderr=subprocess.STDOUT)
            running.append(((strategy, seed, out), proc, log))
        time.sleep(1.0)
        still = []
        for key, proc, log in running:
            if proc.poll() is None:
                still.append((key, proc, log))
            else:
                log.close()
                assert proc.returncode == 0, f"training run {key[:2]} failed"
                dirs[key[:2]] = key[2]
        running = still
    elapsed = time.perf_counter() - t0
    return {"dirs": dirs, "elapsed": elapsed, "root": root}


def eval_split_metrics(out_dir: Path, split: str) -> dict:
    """Run the real cmd_eval and read back its per-episode CSV."""
    rc = cli.cmd_eval(str(out_dir / "checkpoint_final.npz"), split)
    assert rc == 0
    rows = (out_dir / f"eval_{split}.csv").read_text().splitlines()[1:]
    avg = [float(r.split(",")[2]) for r in rows]
    term = [float(r.split(",")[3]) for r in rows]
    return {"avg": float(np.mean(avg)), "term": float(np.mean(term))}


class TestCriterion6EndToEndDeskLearning:
    def test_all_strategies_learn(self, desk_runs):
        assert desk_runs["elapsed"] <= 20 * 60.0
        root = desk_runs["root"]

        # random-policy baseline: cmd_eval on untrained checkpoints
        baseline_terms = []
        for seed in DESK_SEEDS:
            cfg = parse_config_text(DESK_NAV2D_CFG.format(strategy="cd", seed=seed))
            run = trainer.build_run_state(cfg)
            bdir = root / f"baseline_s{seed}"
            bdir.mkdir(exist_ok=True)
            trainer.save_checkpoint(bdir / "checkpoint_final.npz", run)
            (bdir / cli.CONFIG_ECHO_NAME).write_text(format_config(cfg))
            baseline_terms.append(eval_split_metrics(bdir, "test")["term"])
        baseline = float(np.mean(baseline_terms))

        summary = []
        for strategy in DESK_STRATEGIES:
            train_avg, test_term = [], []
            for seed in DESK_SEEDS:
                out = desk_runs["dirs"][(strategy, seed)]
                train_avg.append(eval_split_metrics(out, "train")["avg"])
                test_term.append(eval_split_metrics(out, "test")["term"])
            mean_train = float(np.mean(train_avg))
            mean_test = float(np.mean(test_term))
            assert mean_train >= 0.6, f"{strategy}: train avg success {mean_train:.3f}"
            assert mean_test > baseline, \
                f"{strategy}: test terminal {mean_test:.3f} vs baseline {baseline:.3f}"
            summary.append(f"{strategy}: train {mean_train:.3f}, test term {mean_test:.2f}")
        report("6", f"nav2d 3 seeds x 3 strategies in {desk_runs['elapsed'] / 60:.1f} min "
                    f"(baseline {baseline:.3f}); " + "; ".join(summary))


class TestCriterion7MetricSemantics:
    def test_hand_cases_and_latched_property(self):
        assert envs.avg_episode_success([False] * 6 + [True] * 4) == 0.4
        assert envs.avg_episode_success([False] * 10) == 0.0
        assert envs.avg_episode_success([True] * 10) == 1.0

        rng = np.random.default_rng(0)
        for _ in range(10_000):
            T = int(rng.integers(1, 60))
            start = int(rng.integers(0, T + 1))
            flags = np.arange(T) >= start
            avg = envs.avg_episode_success(flags)
            assert 0.0 <= avg <= envs.terminal_success(flags) + 1e-15
        with pytest.raises(Exception):
            envs.avg_episode_success([True, False])
        report("7", "hand cases 0.4/0/1 exact; latched monotonicity on 10^4 episodes")


class TestCriterion8DeterminismAndBuffer:
    def test_metrics_byte_identity_over_20_iterations(self, tmp_path):
        cfg_text = (
            "suite = nav2d\nn_train_tasks = 3\nn_test_tasks = 2\nhorizon = 6\n"
            "episodes_per_task = 2\ntask_inference_dim = 3\ngoal_lookahead = 2\n"
            "gru_hidden = 8\ncat_hidden = 8,8\nvalue_hidden = 8,8\nstate_embed = 6\n"
            "action_embed = 4\nreward_embed = 3\nencoder_hidden = 8,8\n"
            "decoder_hidden = 8,8\nil_ego_embed = 6\npolicy_hidden = 8,8\n"
            "dropout = 0.0\nppo_minibatch = 16\nhl_minibatches = 2\n"
            "hl_minibatch_trajs = 3\niterations = 20\nmaster_seed = 4\n"
            "lr_highlevel = 1e-3\nlr_intermediate = 1e-3\nlr_policy = 1e-3\n")
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(cfg_text)
        for name in ("a", "b"):
            rc = cli.main(["train", "--config", str(cfg_path), "--out", str(tmp_path / name)])
            assert rc == 0
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b
        assert len(a.splitlines()) == 21

        buf_ok = self._fifo_property()
        cfg = RunConfig()
        assert cfg.n_train_tasks * cfg.episodes_per_task == 50
        _, run, _, train_tasks, _ = tiny_run(n_train_tasks=10, episodes_per_task=5)
        assert len(trainer.collect(run, train_tasks, iteration=0)) == 50
        report("8", "metrics.csv byte-identical over 20 iterations; FIFO property on "
                    f"{buf_ok} randomized pushes; default sample size 50 = 10 x 5")

    @staticmethod
    def _fifo_property():
        from collections import deque
        rng = np.random.default_rng(1)
        checks = 0
        for cap in (1, 3, 10, 50):
            buf = trainer.ReplayBuffer(capacity=cap)
            ref = deque(maxlen=cap)
            n = 0
            for _ in range(40):
                k = int(rng.integers(0, 7))
                batch = list(range(n, n + k))
                n += k
                trainer.buffer_push(buf, batch)
                ref.extend(batch)
                assert list(buf.items()) == list(ref)
                assert len(buf) <= cap
                checks += 1
        return checks


class TestCriterion9PPOBookkeeping:
    def test_fresh_batch_ratios_and_intrinsic_bound(self, desk_runs):
        cfg, run, _, train_tasks, _ = tiny_run(seed=21)
        trajs = trainer.collect(run, train_tasks, iteration=0)
        batch = trainer.build_rollout_batch(trajs, cfg, iteration=0)
        g = ad.Graph()
        lp_new, _ = lowlevel.log_prob_of(run.policy, g, batch.y, batch.z, batch.s,
                                         batch.presquash, batch.actions)
        ratios = np.exp(np.asarray(lp_new.value) - batch.log_prob_old)
        assert np.abs(ratios - 1.0).max() <= 1e-6
        _, stats = lowlevel.ppo_loss(run.policy, batch.s, batch.y, batch.z, batch.presquash,
                                     batch.actions, batch.log_prob_old, batch.advantages)
        assert stats["clip_fraction"] == 0.0

        # intrinsic bound on fresh train-mode collections from every trained run
        checked = 0
        for (strategy, seed), out in desk_runs["dirs"].items():
            cfg = parse_config_text(DESK_NAV2D_CFG.format(strategy=strategy, seed=seed))
            trained = trainer.load_checkpoint(out / "checkpoint_final.npz", cfg)
            t_tasks, _ = envs.make_suite(cfg.suite, cfg.n_train_tasks, cfg.n_test_tasks,
                                         trained.master_seed, cfg.suite_params())
            for tr in trainer.collect(trained, t_tasks, iteration=777, mode="train"):
                scale = tr.r_ext if cfg.intrinsic_scale == "raw" else tr.r_shaped
                assert (tr.r_in >= 0.0).all()
                assert (tr.r_in <= scale + 1e-12).all()
                checked += tr.length
        report("9", f"fresh-batch ratios == 1 within 1e-6, clip fraction 0; intrinsic "
                    f"bound held on {checked} steps from the trained desk runs")
