#!/usr/bin/env python3
"""A small end-to-end training run on nav2d (about a minute on one core).

Run:  python3 demos/04_desk_training_run.py

The same run through the CLI:

    hmrl train --config demos/desk_nav2d.cfg --out runs/demo
    hmrl eval --ckpt runs/demo/checkpoint_final.npz --split test
"""

import time

import numpy as np

from hmrl import envs, trainer
from hmrl.config import RunConfig

cfg = RunConfig(
    suite="nav2d", n_train_tasks=4, n_test_tasks=2, horizon=60,
    episodes_per_task=5, eval_episodes_per_task=2, task_inference_dim=4,
    goal_strategy="cd", goal_lookahead=5,
    nav2d_arena_diameter=2.0, nav2d_success_radius=0.3, nav2d_goal_radius=0.8,
    gamma=0.95, entropy_scaler=1e-3, intrinsic_scale="raw",
    lr_highlevel=1e-3, lr_intermediate=1e-3, lr_policy=3e-4,
    hl_minibatches=2, hl_minibatch_trajs=8, iterations=120, master_seed=0,
    gru_hidden=32, cat_hidden=(64, 64), value_hidden=(64, 64),
    state_embed=16, action_embed=8, reward_embed=4,
    encoder_hidden=(32, 32), decoder_hidden=(32, 32), il_ego_embed=16,
    policy_hidden=(64, 64), dropout=0.0)

train_tasks, test_tasks = envs.make_suite(cfg.suite, cfg.n_train_tasks,
                                          cfg.n_test_tasks, cfg.master_seed,
                                          cfg.suite_params())
run = trainer.build_run_state(cfg)
buffer = trainer.ReplayBuffer(cfg.buffer_capacity)

print(f"{cfg.n_train_tasks} train / {cfg.n_test_tasks} test goals, horizon {cfg.horizon}")
t0 = time.time()
for i in range(cfg.iterations):
    row = trainer.train_iteration(run, buffer, train_tasks, test_tasks)
    if i % 20 == 0 or i == cfg.iterations - 1:
        print(f"it {i:3d} | train avg success {row['train_avg_success_mean']:.3f} "
              f"terminal {row['train_term_success_mean']:.2f} | "
              f"test terminal {row['test_term_success_mean']:.2f} | "
              f"value loss {row['loss_value']:.1f}")
print(f"trained {cfg.iterations} iterations in {time.time() - t0:.0f}s")

# deterministic evaluation on the held-out goals
test_trajs = trainer.collect(run, test_tasks, iteration=0, mode="eval")
m = trainer.trajectory_metrics(test_trajs)
print(f"\nheld-out goals: avg success {m['avg_success_mean']:.3f}, "
      f"terminal {m['term_success_mean']:.2f}, return {m['return_mean']:.1f}")

# per-episode success detail on one held-out goal
tr = test_trajs[0]
first = int(np.argmax(tr.success)) if tr.success.any() else -1
print(f"one held-out episode: first success at step {first}, "
      f"latched for the remaining {tr.length - first} steps")
