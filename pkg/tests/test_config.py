import dataclasses

import pytest

from hmrl.config import RunConfig, format_config, parse_config, parse_config_text
from hmrl.errors import ConfigurationError


class TestDefaults:
    def test_empty_file_yields_table_defaults(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("")
        cfg = parse_config(path)
        assert cfg == RunConfig()

    def test_stock_table_values(self):
        cfg = RunConfig()
        assert (cfg.alpha_value, cfg.alpha_entropy, cfg.alpha_occupancy) == (20.0, 1.0, 1.0)
        assert cfg.gamma == 0.99
        assert cfg.gae_lambda == 0.90
        assert cfg.clip_epsilon == 0.2
        assert cfg.k_epochs == 5
        assert cfg.entropy_scaler == 1e-2
        assert (cfg.std_min, cfg.std_max) == (0.5, 1.5)
        assert cfg.reward_shape_a == 3.0
        assert cfg.buffer_capacity == 1000
        assert cfg.episodes_per_task == 5
        assert cfg.n_train_tasks == 10
        assert (cfg.lr_highlevel, cfg.lr_intermediate, cfg.lr_policy) == (5e-7, 5e-7, 3e-7)
        assert cfg.gru_hidden == 256
        assert cfg.cat_hidden == (512, 512)
        assert cfg.value_hidden == (256, 256)
        assert (cfg.state_embed, cfg.action_embed, cfg.reward_embed) == (64, 32, 16)
        assert cfg.encoder_hidden == (128, 128, 64, 32)
        assert cfg.decoder_hidden == (32, 64, 128, 128)
        assert cfg.policy_hidden == (256, 256)
        assert cfg.dropout == 0.7

    def test_default_sample_size_is_fifty(self):
        cfg = RunConfig()
        assert cfg.n_train_tasks * cfg.episodes_per_task == 50


class TestParsing:
    def test_key_value_lines_with_comments_and_sections(self):
        cfg = parse_config_text(
            "# a comment\n"
            "[suite]\n"
            "suite = linear\n"
            "horizon = 30   # inline comment\n"
            "goal_strategy = cm\n"
            "cat_hidden = 64,64\n"
            "y_one_hot_downstream = true\n")
        assert cfg.suite == "linear"
        assert cfg.horizon == 30
        assert cfg.goal_strategy == "cm"
        assert cfg.cat_hidden == (64, 64)
        assert cfg.y_one_hot_downstream is True

    def test_unknown_key_rejected_with_line(self):
        with pytest.raises(ConfigurationError, match="unknown config key 'learning_rate'.*line 2"):
            parse_config_text("suite = nav2d\nlearning_rate = 0.1\n")

    def test_type_mismatch_rejected_with_key_and_line(self):
        with pytest.raises(ConfigurationError, match="'horizon'.*line 1"):
            parse_config_text("horizon = sixty\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigurationError, match="duplicate"):
            parse_config_text("gamma = 0.9\ngamma = 0.95\n")

    def test_malformed_line_rejected(self):
        with pytest.raises(ConfigurationError, match="line 1"):
            parse_config_text("just words\n")


class TestValidation:
    def test_gamma_above_one_rejected(self):
        with pytest.raises(ConfigurationError, match="'gamma'"):
            parse_config_text("gamma = 1.5\n")

    def test_goal_strategy_choice(self):
        cfg = parse_config_text("goal_strategy = cm\n")
        assert cfg.goal_strategy == "cm"
        with pytest.raises(ConfigurationError, match="'goal_strategy'"):
            parse_config_text("goal_strategy = fixed\n")

    def test_std_range_ordering(self):
        with pytest.raises(ConfigurationError, match="std_min"):
            parse_config_text("std_min = 2.0\nstd_max = 1.0\n")

    def test_lookahead_beyond_horizon(self):
        with pytest.raises(ConfigurationError, match="goal_lookahead"):
            parse_config_text("horizon = 4\ngoal_lookahead = 5\n")

    def test_negative_lr_rejected(self):
        with pytest.raises(ConfigurationError, match="lr_policy"):
            parse_config_text("lr_policy = -1e-4\n")

    def test_dropout_range(self):
        with pytest.raises(ConfigurationError, match="dropout"):
            parse_config_text("dropout = 1.0\n")

    def test_entropy_and_occupancy_multipliers_may_flip_sign(self):
        cfg = parse_config_text("alpha_entropy = -1.0\nalpha_occupancy = -0.5\n")
        assert cfg.alpha_entropy == -1.0
        assert cfg.alpha_occupancy == -0.5


class TestEcho:
    def test_roundtrip_through_format(self):
        cfg = parse_config_text("suite = linear\nhorizon = 25\nlinear_perturb = 0.0\n"
                                "cat_hidden = 32,16\nmaster_seed = 7\n")
        echoed = format_config(cfg)
        cfg2 = parse_config_text(echoed)
        assert cfg2 == cfg

    def test_echo_contains_every_field(self):
        echoed = format_config(RunConfig())
        for f in dataclasses.fields(RunConfig):
            assert f.name in echoed
