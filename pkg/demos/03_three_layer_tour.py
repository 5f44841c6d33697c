#!/usr/bin/env python3
"""One pass through the three layers and their losses, with gradient isolation.

Run:  python3 demos/03_three_layer_tour.py
"""

import numpy as np

from hmrl import envs, highlevel, intermediate, lowlevel, oracle, trainer
from hmrl.config import RunConfig

cfg = RunConfig(suite="nav2d", n_train_tasks=3, n_test_tasks=2, horizon=8,
                episodes_per_task=2, task_inference_dim=3, goal_lookahead=3,
                gru_hidden=16, cat_hidden=(32, 32), value_hidden=(32, 32),
                state_embed=8, action_embed=6, reward_embed=3,
                encoder_hidden=(16, 16), decoder_hidden=(16, 16), il_ego_embed=8,
                policy_hidden=(32, 32), dropout=0.0, master_seed=0)
train_tasks, _ = envs.make_suite(cfg.suite, 3, 2, cfg.master_seed, cfg.suite_params())
run = trainer.build_run_state(cfg)

# --- collect a few episodes with the full stack ------------------------------
trajs = trainer.collect(run, train_tasks, iteration=0)
tr = trajs[0]
print(f"collected {len(trajs)} episodes of {tr.length} steps")
print("step 0 belief y:", np.round(tr.y[0], 3), "(sums to", tr.y[0].sum(), ")")
print("step 0 macro-action z:", np.round(tr.z[0], 3), "(inside (-1,1))")
print("step 0 primitive action:", np.round(tr.actions[0], 3))
print("intrinsic reward bounded:", bool((tr.r_in <= tr.r_shaped + 1e-12).all()))

# --- the three losses on one minibatch ---------------------------------------
batch = trajs[:2]
states = np.stack([t.states for t in batch])
actions = np.stack([t.actions for t in batch])
rewards = np.stack([t.r_shaped for t in batch])
targets = np.stack([oracle.mc_return(t.r_total, cfg.gamma) for t in batch])

hl_loss, hl_stats = highlevel.hl_loss(run.highlevel, states, actions, rewards, targets,
                                      alphas=(20.0, 1.0, 1.0), training=False)
print("\nhigh-level loss:", round(hl_loss.item(), 4),
      {k: round(v, 4) for k, v in hl_stats.items() if isinstance(v, float)})

goals = [intermediate.assign_goals(t.states, t.y, "cd", cfg.goal_lookahead, t.length)
         for t in batch]
print("cd goal indices for one episode:", goals[0].mapping)
prior = lambda g, yv, sv, m: lowlevel.action_prior_log_density(run.policy, g, yv, sv, m)
il_loss, il_stats = intermediate.il_loss(
    run.intermediate, prior, states, np.stack([t.y for t in batch]), run.ego_indices,
    goals, (1.0, 1.0), noise_rng=np.random.default_rng(0), training=False)
print("intermediate loss:", round(il_loss.item(), 4),
      {k: round(v, 4) for k, v in il_stats.items() if isinstance(v, float)})

rollout = trainer.build_rollout_batch(trajs, cfg, iteration=0)
ppo_loss, ppo_stats = lowlevel.ppo_loss(
    run.policy, rollout.s, rollout.y, rollout.z, rollout.presquash, rollout.actions,
    rollout.log_prob_old, rollout.advantages)
print("ppo loss:", round(ppo_loss.item(), 4),
      {k: round(v, 4) for k, v in ppo_stats.items()})
print("fresh batch: mean ratio is exactly 1 ->", ppo_stats["mean_ratio"])

# --- gradients stay inside their layer ---------------------------------------
def grads_present(pset):
    return any(t.grad is not None and np.abs(t.grad).any() for t in pset.tensors())

hl_loss.graph.backward(hl_loss)
il_loss.graph.backward(il_loss)
ppo_loss.graph.backward(ppo_loss)
print("\ngradient isolation:")
print("  high-level params touched by hl/il/ppo:", grads_present(run.highlevel.params))
print("  policy grads after il backward only come from ppo:",
      grads_present(run.policy.params))
run.highlevel.params.clear_grads()
run.intermediate.params.clear_grads()
run.policy.params.clear_grads()

# each loss in isolation leaves the other layers' grads empty
hl2, _ = highlevel.hl_loss(run.highlevel, states, actions, rewards, targets,
                           alphas=(20.0, 1.0, 1.0), training=False)
hl2.graph.backward(hl2)
print("  after hl backward alone: il grads empty:",
      not grads_present(run.intermediate.params),
      "| policy grads empty:", not grads_present(run.policy.params))
