"""Deterministically seeded toy meta-task suites.

Two suites are provided.  ``linear`` is a driftless linear system
``s' = s + B a`` whose M-step behaviour has an exact closed form, which makes
it the analytic test bed for macro-action recovery.  ``nav2d`` is a 2D point
mass under acceleration control with the goal position appended to the state
as context dimensions, exercising nonlinear dynamics and train/test goal
generalisation.

Episodes always run to the horizon; task success latches to true the first
time the agent enters the goal ball and stays true, which is what the
average-episodic-success metric measures.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, UsageError

NAV2D_EGO_DIMS = (0, 1, 2, 3)  # position + velocity; context dims stay out


@dataclass(frozen=True)
class SuiteParams:
    """Physical knobs of the built-in suites (shared horizon and reward scale)."""
    horizon: int = 60
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


@dataclass(frozen=True)
class TaskSpec:
    """One task: transition parameters plus a goal with a success radius."""
    suite: str
    task_index: int
    goal: tuple
    success_radius: float
    horizon: int
    arena_diameter: float
    reward_scale: float
    reset_jitter: float
    transition_matrix: tuple | None = None  # linear: row-major (s, a) matrix
    dt: float = 0.0
    gain: float = 1.0

    def __post_init__(self):
        if self.success_radius <= 0:
            raise ConfigurationError(f"success radius must be positive, got {self.success_radius}")
        if self.horizon < 1:
            raise ConfigurationError(f"horizon must be >= 1, got {self.horizon}")
        if self.transition_matrix is not None and not np.isfinite(self.matrix).all():
            raise ConfigurationError("transition matrix must be finite")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.transition_matrix, dtype=float)

    @property
    def goal_array(self) -> np.ndarray:
        return np.asarray(self.goal, dtype=float)

    @property
    def state_dim(self) -> int:
        return len(self.goal) if self.suite == "linear" else 6

    @property
    def action_dim(self) -> int:
        return len(self.goal) if self.suite == "linear" else 2


@dataclass
class EnvState:
    s: np.ndarray
    t: int = 0
    success: bool = False
    clamp_count: int = 0


@dataclass(frozen=True)
class EgoMask:
    """Ordered state indices that carry only self-state (task-agnostic) info."""
    indices: tuple

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise ConfigurationError(f"ego indices must be distinct, got {self.indices}")

    def __len__(self):
        return len(self.indices)


@dataclass
class Transition:
    """One step with slots the layers fill in during collection."""
    s: np.ndarray
    a: np.ndarray
    r_ext: float
    r_shaped: float
    s_next: np.ndarray
    done: bool
    success: bool
    r_in: float = 0.0
    y: np.ndarray | None = None
    z: np.ndarray | None = None
    h: np.ndarray | None = None
    log_prob: float = 0.0
    value: float = 0.0


def ego_mask_for(suite: str, state_dim: int) -> EgoMask:
    if suite == "linear":
        return EgoMask(tuple(range(state_dim)))
    if suite == "nav2d":
        return EgoMask(NAV2D_EGO_DIMS)
    raise ConfigurationError(f"unknown suite {suite!r}")


def make_suite(name: str, n_train_tasks: int, n_test_tasks: int, seed: int,
               params: SuiteParams | None = None) -> tuple[list[TaskSpec], list[TaskSpec]]:
    """Build train/test task lists with pairwise-distinct goals on a circle."""
    if name not in ("linear", "nav2d"):
        raise ConfigurationError(f"unknown suite {name!r}")
    if n_train_tasks < 1 or n_test_tasks < 1:
        raise ConfigurationError("task counts must be >= 1")
    p = params or SuiteParams()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(101,)))
    total = n_train_tasks + n_test_tasks
    offset = rng.uniform(0.0, 2.0 * math.pi)
    angles = offset + 2.0 * math.pi * np.arange(total) / total
    # spread test goals between train goals so generalization is interpolative
    test_slots = {min(int((j + 0.5) * total / n_test_tasks), total - 1)
                  for j in range(n_test_tasks)}
    order = [k for k in range(total) if k not in test_slots] + sorted(test_slots)

    tasks: list[TaskSpec] = []
    for k in order:
        if name == "linear":
            d = p.linear_state_dim
            goal = p.linear_goal_radius * np.array([math.cos(angles[k]), math.sin(angles[k])])
            if d != 2:
                direction = rng.standard_normal(d)
                goal = p.linear_goal_radius * direction / np.linalg.norm(direction)
            B = np.eye(d) + p.linear_perturb * rng.standard_normal((d, d))
            tasks.append(TaskSpec(
                suite="linear", task_index=k, goal=tuple(goal),
                success_radius=p.linear_success_radius, horizon=p.horizon,
                arena_diameter=p.linear_arena_diameter, reward_scale=p.reward_scale,
                reset_jitter=p.reset_jitter, transition_matrix=tuple(map(tuple, B))))
        else:
            goal = p.nav2d_goal_radius * np.array([math.cos(angles[k]), math.sin(angles[k])])
            gain = p.nav2d_gain * (1.0 + p.nav2d_gain_spread * rng.uniform(-1.0, 1.0))
            tasks.append(TaskSpec(
                suite="nav2d", task_index=k, goal=tuple(goal),
                success_radius=p.nav2d_success_radius, horizon=p.horizon,
                arena_diameter=p.nav2d_arena_diameter, reward_scale=p.reward_scale,
                reset_jitter=p.reset_jitter, dt=p.nav2d_dt, gain=gain))
    return tasks[:n_train_tasks], tasks[n_train_tasks:]


def reset(task: TaskSpec, seed: int) -> EnvState:
    """Start state: suite origin plus seeded jitter, t=0, success unlatched."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(202,)))
    if task.suite == "linear":
        s = task.reset_jitter * rng.standard_normal(task.state_dim)
    else:
        s = np.zeros(6)
        s[0:2] = task.reset_jitter * rng.standard_normal(2)
        s[4:6] = task.goal_array
    return EnvState(s=s, t=0, success=False)


def _position(task: TaskSpec, s: np.ndarray) -> np.ndarray:
    return s if task.suite == "linear" else s[0:2]


def step(env: EnvState, task: TaskSpec, a: np.ndarray) -> tuple[EnvState, float, bool, bool]:
    """Advance one step; rewards are non-negative by construction."""
    if env.t >= task.horizon:
        raise UsageError(f"episode already finished at t={env.t} (horizon {task.horizon})")
    a = np.asarray(a, dtype=float)
    clamps = env.clamp_count
    if (np.abs(a) > 1.0).any():
        clamps += 1
        a = np.clip(a, -1.0, 1.0)
    if task.suite == "linear":
        s_next = env.s + task.matrix @ a
    else:
        s_next = env.s.copy()
        s_next[2:4] = env.s[2:4] + task.dt * task.gain * a   # semi-implicit Euler
        s_next[0:2] = env.s[0:2] + task.dt * s_next[2:4]
    dist = float(np.linalg.norm(_position(task, s_next) - task.goal_array))
    r_ext = max(0.0, task.reward_scale * (1.0 - dist / task.arena_diameter))
    success = env.success or dist < task.success_radius
    t = env.t + 1
    done = t >= task.horizon
    return EnvState(s=s_next, t=t, success=success, clamp_count=clamps), r_ext, done, success


def ego_extract(s: np.ndarray, mask: EgoMask) -> np.ndarray:
    """Order-preserving sub-vector on the ego indices."""
    s = np.asarray(s)
    n = s.shape[-1]
    for i in mask.indices:
        if not 0 <= i < n:
            raise ConfigurationError(f"ego index {i} out of range for state dim {n}")
    return s[..., list(mask.indices)]


def shape_reward(x: float, a_shape: float) -> float:
    """Asymptotic-log shaping: steep below the knee ``a``, linear beyond it."""
    if a_shape <= 0:
        raise ConfigurationError(f"shaping knee must be positive, got {a_shape}")
    if x < 0:
        raise DomainError(f"shaped rewards are defined for non-negative inputs, got {x}")
    if x <= a_shape:
        return math.log((math.exp(a_shape) - a_shape) / a_shape * x + 1.0)
    return a_shape / (a_shape * a_shape + 1.0) * (x - a_shape) + a_shape


def shape_reward_branch_gap(a_shape: float) -> float:
    """|g(a) - a|: the documented mismatch of the two branches at the knee."""
    return abs(math.log(math.exp(a_shape) - a_shape + 1.0) - a_shape)


def _check_flags(flags) -> np.ndarray:
    arr = np.asarray(flags, dtype=bool)
    if arr.size == 0:
        raise DomainError("success metric needs a non-empty episode")
    if (np.diff(arr.astype(int)) < 0).any():
        raise UsageError("success flags must be monotone (latched)")
    return arr


def avg_episode_success(success_flags) -> float:
    """Mean of the latched per-step success flags over one episode."""
    return float(_check_flags(success_flags).mean())


def terminal_success(success_flags) -> float:
    """The final latched flag: did the task ever complete."""
    return float(_check_flags(success_flags)[-1])


# ------------------------------------------------------------ trajectories

@dataclass
class Trajectory:
    """One full episode of one task, with per-step latents attached."""
    task_index: int
    states: np.ndarray      # (T+1, s)
    actions: np.ndarray     # (T, a)
    presquash: np.ndarray   # (T, a) pre-tanh policy samples
    r_ext: np.ndarray       # (T,) raw rewards
    r_shaped: np.ndarray    # (T,) shaped rewards
    r_in: np.ndarray        # (T,) intrinsic rewards
    log_probs: np.ndarray   # (T,)
    values: np.ndarray      # (T,)
    y: np.ndarray           # (T, K)
    z: np.ndarray           # (T, a)
    h: np.ndarray           # (T, d) hidden-state snapshots at acting time
    success: np.ndarray     # (T,) latched flags
    clamp_count: int = 0

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    @property
    def r_total(self) -> np.ndarray:
        return self.r_shaped + self.r_in

    def transitions(self):
        T = self.length
        for t in range(T):
            yield Transition(
                s=self.states[t], a=self.actions[t], r_ext=float(self.r_ext[t]),
                r_shaped=float(self.r_shaped[t]), s_next=self.states[t + 1],
                done=t == T - 1, success=bool(self.success[t]), r_in=float(self.r_in[t]),
                y=self.y[t], z=self.z[t], h=self.h[t],
                log_prob=float(self.log_probs[t]), value=float(self.values[t]))

    def to_record(self) -> dict:
        return {
            "task_index": self.task_index,
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "presquash": self.presquash.tolist(),
            "r_ext": self.r_ext.tolist(),
            "r_shaped": self.r_shaped.tolist(),
            "r_in": self.r_in.tolist(),
            "log_probs": self.log_probs.tolist(),
            "values": self.values.tolist(),
            "y": self.y.tolist(),
            "z": self.z.tolist(),
            "h": self.h.tolist(),
            "success": [bool(v) for v in self.success],
            "clamp_count": self.clamp_count,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        return cls(
            task_index=int(rec["task_index"]),
            states=np.asarray(rec["states"], dtype=float),
            actions=np.asarray(rec["actions"], dtype=float),
            presquash=np.asarray(rec["presquash"], dtype=float),
            r_ext=np.asarray(rec["r_ext"], dtype=float),
            r_shaped=np.asarray(rec["r_shaped"], dtype=float),
            r_in=np.asarray(rec["r_in"], dtype=float),
            log_probs=np.asarray(rec["log_probs"], dtype=float),
            values=np.asarray(rec["values"], dtype=float),
            y=np.asarray(rec["y"], dtype=float),
            z=np.asarray(rec["z"], dtype=float),
            h=np.asarray(rec["h"], dtype=float),
            success=np.asarray(rec["success"], dtype=bool),
            clamp_count=int(rec.get("clamp_count", 0)),
        )


def save_trajectories(path, trajectories: list[Trajectory]) -> None:
    """Line-delimited JSON: one trajectory record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_record()) + "\n")


def load_trajectories(path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Trajectory.from_record(json.loads(line)))
    return out
