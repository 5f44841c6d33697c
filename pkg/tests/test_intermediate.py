import numpy as np
import pytest

from hmrl import autodiff as ad
from hmrl import intermediate as il
from hmrl import lowlevel as ll
from hmrl.errors import ConfigurationError, UsageError

SMALL = dict(encoder_hidden=(8, 6), decoder_hidden=(6, 8), ego_embed=5)


def small_layer(K=3, state_dim=4, action_dim=2, ego_dim=2, dropout=0.0, seed=0):
    return il.Intermediate(K, state_dim, action_dim, ego_dim,
                           np.random.default_rng(seed), dropout=dropout, **SMALL)


def small_policy(K=3, action_dim=2, state_dim=4, seed=1):
    return ll.Policy(K, action_dim, state_dim, np.random.default_rng(seed), hidden=(6, 6))


def zero_all(pset):
    for t in pset.tensors():
        t.data[:] = 0.0


class TestEncodeMacro:
    def test_zero_noise_returns_tanh_of_mean(self):
        layer = small_layer(seed=2)
        y, s = np.array([0.2, 0.3, 0.5]), np.array([0.1, -0.4, 0.0, 0.2])
        z, _, _ = il.encode_macro(layer, y, s, np.zeros(2))
        np.testing.assert_allclose(z, layer.encoder_mean(y, s), atol=1e-12)

    def test_components_strictly_inside_unit_box(self):
        layer = small_layer(seed=3)
        rng = np.random.default_rng(0)
        for _ in range(50):
            z, _, _ = il.encode_macro(layer, rng.dirichlet(np.ones(3)),
                                      rng.standard_normal(4), rng.standard_normal(2))
            assert (np.abs(z) < 1.0).all()

    def test_same_inputs_same_output(self):
        layer = small_layer(seed=4)
        args = (np.array([0.1, 0.2, 0.7]), np.ones(4), np.array([0.3, -0.3]))
        za, _, _ = il.encode_macro(layer, *args)
        zb, _, _ = il.encode_macro(layer, *args)
        np.testing.assert_array_equal(za, zb)


class TestDecodeTransition:
    def test_zero_params_give_zero_prediction(self):
        layer = small_layer(seed=5)
        zero_all(layer.params)
        out = il.decode_transition(layer, np.array([1.0, 0.0, 0.0]),
                                   np.array([0.5, -0.5]), np.array([0.3, 0.4]))
        np.testing.assert_array_equal(out, np.zeros(2))

    def test_output_dimension_is_ego_dimension(self):
        layer = small_layer(ego_dim=2, seed=6)
        out = il.decode_transition(layer, np.array([0.2, 0.3, 0.5]),
                                   np.array([0.1, 0.1]), np.array([1.0, 2.0]))
        assert out.shape == (2,)


class TestKLLoss:
    def test_identical_distributions_give_zero_per_sample(self):
        # zero params make both the encoder and the z=0-conditioned policy
        # produce N(0, std_mid), so every single-sample estimate is exactly 0
        layer = small_layer(seed=7)
        policy = small_policy(seed=8)
        zero_all(layer.params)
        zero_all(policy.params)
        rng = np.random.default_rng(0)
        vals = []
        for _ in range(200):
            g = ad.Graph()
            y, s = rng.dirichlet(np.ones(3)), rng.standard_normal(4)
            macro = layer.encode(g, y, s, rng.standard_normal(2))
            prior = ll.action_prior_log_density(policy, g, y, s, macro)
            vals.append(il.il_kl_loss(macro, prior).item())
        assert np.max(np.abs(vals)) < 1e-12
        assert abs(np.mean(vals)) < 0.02

    def test_gradient_reaches_encoder_but_not_policy(self):
        layer = small_layer(seed=9)
        policy = small_policy(seed=10)
        rng = np.random.default_rng(1)
        g = ad.Graph()
        y, s = rng.dirichlet(np.ones(3)), rng.standard_normal(4)
        macro = layer.encode(g, y, s, rng.standard_normal(2))
        prior = ll.action_prior_log_density(policy, g, y, s, macro)
        loss = il.il_kl_loss(macro, prior)
        g.backward(loss)
        assert all(t.grad is None for t in policy.params.tensors())
        assert any(t.grad is not None and np.abs(t.grad).max() > 0
                   for t in layer.params.tensors())


class TestTransitionLoss:
    def test_perfect_prediction_is_zero(self):
        g = ad.Graph()
        pred = g.const(np.array([0.3, 0.7]))
        assert il.il_transition_loss(pred, np.array([0.3, 0.7])).item() == 0.0

    def test_unit_error_gives_half(self):
        g = ad.Graph()
        pred = g.const(np.array([1.0, 0.0]))
        assert il.il_transition_loss(pred, np.zeros(2)).item() == pytest.approx(0.5)

    def test_dimension_mismatch_rejected(self):
        g = ad.Graph()
        pred = g.const(np.zeros(2))
        with pytest.raises(UsageError):
            il.il_transition_loss(pred, np.zeros(3))

    def test_loss_decreases_when_overfitting_one_batch(self):
        layer = small_layer(seed=11)
        rng = np.random.default_rng(2)
        B = 16
        y = rng.dirichlet(np.ones(3), B)
        s_ego = rng.standard_normal((B, 2))
        z = rng.uniform(-0.9, 0.9, (B, 2))
        target = s_ego + z  # fixed learnable relation

        losses = []
        for _ in range(100):
            g = ad.Graph()
            pred = layer.decode(g, y, z, s_ego)
            loss = ad.mean(il.il_transition_loss(pred, target))
            losses.append(loss.item())
            g.backward(loss)
            ad.adam_step(layer.params, lr=1e-2)
        assert losses[-1] < 0.2 * losses[0]
        drops = sum(1 for a, b in zip(losses, losses[1:]) if b <= a + 1e-12)
        assert drops >= 95


class TestAssignGoals:
    def test_constant_discretization(self):
        ga = il.assign_goals(None, None, "cd", M=5, T=15)
        assert sorted(set(ga.mapping)) == [5, 10, 15]
        assert ga.goal_index(7) == 10

    def test_constant_margins_with_clamp(self):
        ga = il.assign_goals(None, None, "cm", M=5, T=14)
        assert ga.goal_index(2) == 7
        assert ga.goal_index(12) == 14

    def test_subtask_change_points(self):
        labels = np.array([[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
        ga = il.assign_goals(None, labels, "st", M=1, T=5)
        assert ga.goal_index(0) == 2
        assert ga.goal_index(2) == 4
        assert ga.goal_index(4) == 5  # no later change: clamp to episode end

    def test_goal_indices_always_forward_and_bounded(self):
        rng = np.random.default_rng(3)
        for strategy in il.STRATEGIES:
            for _ in range(20):
                T = int(rng.integers(2, 30))
                M = int(rng.integers(1, T + 1))
                labels = np.eye(4)[rng.integers(0, 4, T)]
                ga = il.assign_goals(None, labels, strategy, M=M, T=T)
                for t in range(T):
                    assert t < ga.goal_index(t) <= T

    def test_lookahead_beyond_horizon_rejected(self):
        with pytest.raises(ConfigurationError):
            il.assign_goals(None, None, "cd", M=6, T=5)

    def test_st_without_reps_rejected(self):
        with pytest.raises(ConfigurationError):
            il.assign_goals(None, None, "st", M=2, T=5)

    def test_serialization_roundtrip(self, tmp_path):
        gas = [il.assign_goals(None, None, "cd", M=3, T=9),
               il.assign_goals(None, None, "cm", M=2, T=9)]
        path = tmp_path / "goals.jsonl"
        il.save_goal_assignments(path, gas)
        assert il.load_goal_assignments(path) == gas


def make_il_batch(K=3, state_dim=4, B=2, T=6, seed=0):
    rng = np.random.default_rng(seed)
    states = rng.standard_normal((B, T + 1, state_dim))
    y = rng.dirichlet(np.ones(K), (B, T))
    goals = [il.assign_goals(states[b], y[b], "cd", M=2, T=T) for b in range(B)]
    return states, y, goals


class TestILLoss:
    def test_zero_sublosses_give_zero(self):
        layer = small_layer(seed=12)
        policy = small_policy(seed=13)
        zero_all(layer.params)
        zero_all(policy.params)
        B, T = 2, 4
        states = np.zeros((B, T + 1, 4))
        y = np.full((B, T, 3), 1.0 / 3.0)
        goals = [il.assign_goals(states[b], y[b], "cm", M=2, T=T) for b in range(B)]
        prior_fn = lambda g, yv, sv, macro: ll.action_prior_log_density(policy, g, yv, sv, macro)
        loss, stats = il.il_loss(layer, prior_fn, states, y, (0, 1), goals, (1.0, 1.0),
                                 noise_rng=np.random.default_rng(0), training=False)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)
        assert stats["skipped_steps"] == 0

    def test_loss_is_weighted_sum_of_components(self):
        layer = small_layer(seed=14)
        policy = small_policy(seed=15)
        states, y, goals = make_il_batch(seed=4)
        prior_fn = lambda g, yv, sv, macro: ll.action_prior_log_density(policy, g, yv, sv, macro)
        loss, stats = il.il_loss(layer, prior_fn, states, y, (0, 1), goals, (1.0, 1.0),
                                 noise_rng=np.random.default_rng(1), training=False)
        assert loss.item() == pytest.approx(stats["loss_kl"] + stats["loss_transition"], rel=1e-12)

    def test_backward_touches_only_il_parameters(self):
        layer = small_layer(seed=16)
        policy = small_policy(seed=17)
        states, y, goals = make_il_batch(seed=5)
        prior_fn = lambda g, yv, sv, macro: ll.action_prior_log_density(policy, g, yv, sv, macro)
        loss, _ = il.il_loss(layer, prior_fn, states, y, (0, 1), goals, (1.0, 1.0),
                             noise_rng=np.random.default_rng(2), training=False)
        loss.graph.backward(loss)
        assert all(t.grad is None for t in policy.params.tensors())
        assert any(t.grad is not None for t in layer.params.tensors())

    def test_unassigned_steps_are_skipped_and_counted(self):
        layer = small_layer(seed=18)
        policy = small_policy(seed=19)
        states, y, goals = make_il_batch(seed=6)
        broken = il.GoalAssignment(strategy="cd", lookahead=2,
                                   mapping=(-1,) + goals[0].mapping[1:])
        prior_fn = lambda g, yv, sv, macro: ll.action_prior_log_density(policy, g, yv, sv, macro)
        _, stats = il.il_loss(layer, prior_fn, states, y, (0, 1), [broken, goals[1]],
                              (1.0, 1.0), noise_rng=np.random.default_rng(3), training=False)
        assert stats["skipped_steps"] == 1

    def test_full_loss_matches_finite_differences(self):
        layer = small_layer(seed=20, dropout=0.7)
        policy = small_policy(seed=21)
        states, y, goals = make_il_batch(B=1, T=4, seed=7)
        prior_fn = lambda g, yv, sv, macro: ll.action_prior_log_density(policy, g, yv, sv, macro)

        def loss_fn():
            loss, _ = il.il_loss(layer, prior_fn, states, y, (0, 1), goals, (1.0, 1.0),
                                 noise_rng=np.random.default_rng(8), training=True,
                                 rng=np.random.default_rng(9))
            return loss

        assert ad.finite_diff_check(loss_fn, layer.params) < 1e-4
