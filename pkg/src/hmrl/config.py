"""Run configuration: defaults, the key=value file format, and validation.

The file format is flat ``key = value`` lines with ``#`` comments; optional
``[section]`` headers are allowed and ignored.  Every field of ``RunConfig``
can be set this way; unknown keys, bad types and out-of-range values are
rejected with the offending key and line number.  An empty file yields the
stock defaults: loss scalars 20/1/1, gamma 0.99, GAE lambda 0.9, clip 0.2,
5 PPO epochs, entropy scaler 1e-2, std range [0.5, 1.5], shaping knee 3,
buffer of 1000 trajectories, 5 episodes per task, and learning rates
5e-7/5e-7/3e-7.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .envs import SuiteParams
from .errors import ConfigurationError


@dataclass
class RunConfig:
    # suite
    suite: str = "nav2d"
    n_train_tasks: int = 10
    n_test_tasks: int = 5
    horizon: int = 60
    episodes_per_task: int = 5
    reward_scale: float = 1.0
    reset_jitter: float = 0.1
    linear_state_dim: int = 2
    linear_perturb: float = 0.05
    linear_goal_radius: float = 3.0
    linear_success_radius: float = 0.5
    linear_arena_diameter: float = 8.0
    nav2d_goal_radius: float = 1.0
    nav2d_success_radius: float = 0.25
    nav2d_arena_diameter: float = 4.0
    nav2d_dt: float = 0.15
    nav2d_gain: float = 2.0
    nav2d_gain_spread: float = 0.0
    # representation and goals
    task_inference_dim: int = 4
    goal_lookahead: int = 5
    goal_strategy: str = "cd"
    y_one_hot_downstream: bool = False
    # loss scalars
    alpha_value: float = 20.0
    alpha_entropy: float = 1.0
    alpha_occupancy: float = 1.0
    beta_kl: float = 1.0
    beta_transition: float = 1.0
    entropy_scaler: float = 1e-2
    # rl
    gamma: float = 0.99
    gae_lambda: float = 0.90
    clip_epsilon: float = 0.2
    k_epochs: int = 5
    ppo_minibatch: int = 256
    std_min: float = 0.5
    std_max: float = 1.5
    reward_shape_a: float = 3.0
    intrinsic_scale: str = "shaped"
    # training loop
    buffer_capacity: int = 1000
    hl_minibatches: int = 4
    hl_minibatch_trajs: int = 8
    eval_episodes_per_task: int = 0  # 0: follow episodes_per_task
    lr_highlevel: float = 5e-7
    lr_intermediate: float = 5e-7
    lr_policy: float = 3e-7
    iterations: int = 100
    master_seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 50
    # network sizes
    gru_hidden: int = 256
    cat_hidden: tuple = (512, 512)
    value_hidden: tuple = (256, 256)
    state_embed: int = 64
    action_embed: int = 32
    reward_embed: int = 16
    encoder_hidden: tuple = (128, 128, 64, 32)
    decoder_hidden: tuple = (32, 64, 128, 128)
    il_ego_embed: int = 64
    policy_hidden: tuple = (256, 256)
    dropout: float = 0.7

    def suite_params(self) -> SuiteParams:
        return SuiteParams(
            horizon=self.horizon, reward_scale=self.reward_scale,
            reset_jitter=self.reset_jitter, linear_state_dim=self.linear_state_dim,
            linear_perturb=self.linear_perturb, linear_goal_radius=self.linear_goal_radius,
            linear_success_radius=self.linear_success_radius,
            linear_arena_diameter=self.linear_arena_diameter,
            nav2d_goal_radius=self.nav2d_goal_radius,
            nav2d_success_radius=self.nav2d_success_radius,
            nav2d_arena_diameter=self.nav2d_arena_diameter,
            nav2d_dt=self.nav2d_dt, nav2d_gain=self.nav2d_gain,
            nav2d_gain_spread=self.nav2d_gain_spread)

    @property
    def state_dim(self) -> int:
        return self.linear_state_dim if self.suite == "linear" else 6

    @property
    def action_dim(self) -> int:
        return self.linear_state_dim if self.suite == "linear" else 2

    @property
    def std_range(self) -> tuple[float, float]:
        return (self.std_min, self.std_max)


_CHOICES = {
    "suite": ("linear", "nav2d"),
    "goal_strategy": ("cd", "cm", "st"),
    "intrinsic_scale": ("shaped", "raw"),
}

_POSITIVE = (
    "n_train_tasks", "n_test_tasks", "horizon", "episodes_per_task", "reward_scale",
    "linear_state_dim", "linear_goal_radius", "linear_success_radius",
    "linear_arena_diameter", "nav2d_goal_radius", "nav2d_success_radius",
    "nav2d_arena_diameter", "nav2d_dt", "nav2d_gain", "task_inference_dim",
    "goal_lookahead", "clip_epsilon", "k_epochs", "ppo_minibatch", "reward_shape_a",
    "buffer_capacity", "hl_minibatches", "hl_minibatch_trajs", "lr_highlevel",
    "lr_intermediate", "lr_policy", "iterations", "checkpoint_every", "gru_hidden",
    "state_embed", "action_embed", "reward_embed", "il_ego_embed",
)

# alpha_entropy and alpha_occupancy stay signed on purpose: flipping them is
# the supported way to probe the direction of the entropy/occupancy pressure
_NON_NEGATIVE = ("reset_jitter", "linear_perturb", "nav2d_gain_spread", "entropy_scaler",
                 "alpha_value", "beta_kl", "beta_transition", "master_seed")


def validate_config(cfg: RunConfig, lines: dict[str, int] | None = None) -> None:
    lines = lines or {}

    def fail(key, msg):
        where = f" (line {lines[key]})" if key in lines else ""
        raise ConfigurationError(f"config key '{key}'{where}: {msg}")

    for key, choices in _CHOICES.items():
        if getattr(cfg, key) not in choices:
            fail(key, f"must be one of {choices}, got {getattr(cfg, key)!r}")
    for key in _POSITIVE:
        if getattr(cfg, key) <= 0:
            fail(key, f"must be positive, got {getattr(cfg, key)}")
    for key in _NON_NEGATIVE:
        if getattr(cfg, key) < 0:
            fail(key, f"must be non-negative, got {getattr(cfg, key)}")
    if not 0.0 < cfg.gamma <= 1.0:
        fail("gamma", f"must be in (0, 1], got {cfg.gamma}")
    if not 0.0 <= cfg.gae_lambda <= 1.0:
        fail("gae_lambda", f"must be in [0, 1], got {cfg.gae_lambda}")
    if not 0.0 <= cfg.dropout < 1.0:
        fail("dropout", f"must be in [0, 1), got {cfg.dropout}")
    if cfg.std_min >= cfg.std_max or cfg.std_min <= 0:
        fail("std_min", f"need 0 < std_min < std_max, got ({cfg.std_min}, {cfg.std_max})")
    if cfg.goal_lookahead > cfg.horizon:
        fail("goal_lookahead", f"{cfg.goal_lookahead} exceeds horizon {cfg.horizon}")
    for key in ("cat_hidden", "value_hidden", "encoder_hidden", "decoder_hidden", "policy_hidden"):
        widths = getattr(cfg, key)
        if len(widths) == 0 or any(int(w) <= 0 for w in widths):
            fail(key, f"needs positive layer widths, got {widths}")


def _convert(key: str, raw: str, target_type, line_no: int):
    raw = raw.strip()
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is tuple:
            return tuple(int(part) for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"config key '{key}' (line {line_no}): {exc}") from None


def parse_config_text(text: str) -> RunConfig:
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in dataclasses.fields(RunConfig)}
    values: dict[str, object] = {}
    lines: dict[str, int] = {}
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped or (stripped.startswith("[") and stripped.endswith("]")):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {i}: expected 'key = value', got {line.rstrip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in fields:
            raise ConfigurationError(f"unknown config key '{key}' (line {i})")
        if key in values:
            raise ConfigurationError(f"duplicate config key '{key}' (line {i})")
        values[key] = _convert(key, raw, types[key], i)
        lines[key] = i
    cfg = RunConfig(**values)
    validate_config(cfg, lines)
    return cfg


def parse_config(path) -> RunConfig:
    """Load a config file; absent keys fall back to the stock defaults."""
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def format_config(cfg: RunConfig) -> str:
    """Render every resolved value as key = value lines (the config echo)."""
    out = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"
