"""Toy control environments, scripted experts, and demonstration datasets.

Both environments are value types whose ``step`` works on a single state or a
batch of states (leading axis).  ``observe`` gives the part of the state that
learners see: the reacher hides its target (it must be recovered from the
demonstration through the embedding) and the walker hides its unbounded
position coordinate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

TARGET_SPEEDS = (-1.0, 0.0, 1.0, 3.0)


class RolloutError(RuntimeError):
    pass


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("Trajectory: states and actions must be 2-D")
        if len(self.states) != len(self.actions) + 1:
            raise ValueError(f"Trajectory: {len(self.states)} states for {len(self.actions)} actions")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.actions))):
            raise ValueError("Trajectory: non-finite entries")

    @property
    def T(self) -> int:
        return len(self.actions)

    def to_record(self) -> dict:
        return {"states": self.states.tolist(), "actions": self.actions.tolist(), "meta": self.meta}

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        return cls(np.array(rec["states"], dtype=np.float64).reshape(len(rec["states"]), -1),
                   np.array(rec["actions"], dtype=np.float64).reshape(len(rec["actions"]), -1),
                   dict(rec.get("meta", {})))


def _check_action(action):
    a = np.asarray(action, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("env step: non-finite action")
    return a


@dataclass(frozen=True)
class ReacherEnv:
    """Point mass in the plane driven by a clamped acceleration.

    state = [pos(2), vel(2), target(2)].
    """

    dt: float = 0.05
    horizon: int = 50
    kind = "reacher"
    state_dim = 6
    action_dim = 2
    obs_dim = 4
    action_bound = 1.0

    def initial_state(self, target) -> np.ndarray:
        return np.concatenate([np.zeros(4), np.asarray(target, dtype=np.float64)])

    def clamp(self, action):
        return np.clip(action, -self.action_bound, self.action_bound)

    def step(self, state, action):
        a = self.clamp(_check_action(action))
        s = np.asarray(state, dtype=np.float64)
        vel = s[..., 2:4] + self.dt * a
        pos = s[..., 0:2] + self.dt * vel
        return np.concatenate([pos, vel, s[..., 4:6]], axis=-1)

    def observe(self, states):
        return np.asarray(states)[..., :4]

    def for_demo(self, traj: Trajectory) -> "ReacherEnv":
        return self


@dataclass(frozen=True, eq=False)
class WalkerEnv:
    """One-dimensional walker with a gait phase.

    state = [position, velocity, sin(phase), cos(phase)]; the phase advances
    at ``style_freq`` Hz (scalar, or one value per batch row).
    """

    dt: float = 0.025
    horizon: int = 400
    style_freq: object = 1.0
    drag: float = 0.1
    kind = "walker"
    state_dim = 4
    action_dim = 1
    obs_dim = 3
    action_bound = 4.0

    def initial_state(self, phase: float = 0.0) -> np.ndarray:
        return np.array([0.0, 0.0, np.sin(phase), np.cos(phase)])

    def clamp(self, action):
        return np.clip(action, -self.action_bound, self.action_bound)

    def step(self, state, action):
        a = self.clamp(_check_action(action))
        s = np.asarray(state, dtype=np.float64)
        vel = s[..., 1:2] + self.dt * (a - self.drag * s[..., 1:2])
        pos = s[..., 0:1] + self.dt * vel
        freq = np.asarray(self.style_freq, dtype=np.float64)
        if freq.ndim:
            freq = freq.reshape(np.shape(s)[:-1])
        phase = np.arctan2(s[..., 2], s[..., 3]) + self.dt * 2.0 * np.pi * freq
        return np.concatenate([pos, vel, np.sin(phase)[..., None], np.cos(phase)[..., None]], axis=-1)

    def observe(self, states):
        return np.asarray(states)[..., 1:]

    def for_demo(self, traj: Trajectory) -> "WalkerEnv":
        return WalkerEnv(self.dt, self.horizon, traj.meta.get("style_freq", 1.0), self.drag)


def make_env(kind: str, **kwargs):
    if kind == "reacher":
        return ReacherEnv(**kwargs)
    if kind == "walker":
        return WalkerEnv(**kwargs)
    raise ValueError(f"unknown environment kind '{kind}'")


def env_step(env, state, action):
    return env.step(state, action)


def batch_env(env, demos):
    """Environment whose per-row parameters follow a list of demonstrations."""
    if isinstance(env, WalkerEnv):
        freqs = np.array([d.meta.get("style_freq", env.style_freq) for d in demos], dtype=np.float64)
        return WalkerEnv(env.dt, env.horizon, freqs, env.drag)
    return env


def scripted_expert_action(kind: str, task_param, style_param, state) -> np.ndarray:
    """Analytic demonstrator.

    reacher: PD control towards the target; walker: proportional speed
    control plus a phase-locked style term of amplitude ``style_param``.
    """
    s = np.asarray(state, dtype=np.float64)
    if kind == "reacher":
        target = np.asarray(task_param, dtype=np.float64)
        return np.clip(4.0 * (target - s[..., 0:2]) - 2.0 * s[..., 2:4], -1.0, 1.0)
    if kind == "walker":
        amp = 0.0 if style_param is None else style_param
        a = 3.0 * (task_param - s[..., 1:2]) + amp * s[..., 2:3]
        return np.clip(a, -4.0, 4.0)
    raise ValueError(f"unknown expert kind '{kind}'")


def rollout(env, policy: Callable, T: int, rng: np.random.Generator, x0, meta=None) -> Trajectory:
    """Run ``policy(state, rng, t) -> action`` for T steps from ``x0``.

    Recorded actions are the executed (clamped) ones.
    """
    if T < 1:
        raise ValueError("rollout: T must be >= 1")
    states = [np.asarray(x0, dtype=np.float64)]
    actions = []
    for t in range(T):
        a = np.asarray(policy(states[-1], rng, t), dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise RolloutError(f"rollout: policy returned a non-finite action at step {t}")
        a = env.clamp(a)
        actions.append(a)
        states.append(env.step(states[-1], a))
    return Trajectory(np.stack(states), np.stack(actions), dict(meta or {}))


def batch_rollout(env, policy: Callable, T: int, rng: np.random.Generator, x0) -> tuple:
    """Vectorised rollout of B episodes; returns states (B, T+1, S) and actions (B, T, A)."""
    if T < 1:
        raise ValueError("rollout: T must be >= 1")
    x = np.asarray(x0, dtype=np.float64)
    states, actions = [x], []
    for t in range(T):
        a = np.asarray(policy(x, rng, t), dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise RolloutError(f"rollout: policy returned a non-finite action at step {t}")
        a = env.clamp(a)
        actions.append(a)
        x = env.step(x, a)
        states.append(x)
    return np.stack(states, axis=1), np.stack(actions, axis=1)


def expert_policy(kind: str, task, style_amp=None, noise: float = 0.0):
    def act(state, rng, t):
        a = scripted_expert_action(kind, task, style_amp, state)
        if noise > 0:
            a = a + noise * rng.standard_normal(np.shape(a))
        return a
    return act


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "reacher"
    train_targets: int = 50
    test_targets: int = 10
    rollouts: int = 4
    test_rollouts: int = 2
    expert_noise: float = 0.1
    style_amps: tuple = (0.0, 0.5, 1.0)
    style_freqs: tuple = (1.0, 1.5, 2.0)
    target_speeds: tuple = TARGET_SPEEDS
    seed: int = 0


def _unit_disc(rng, n):
    r = np.sqrt(rng.uniform(size=n))
    th = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


def generate_dataset(config: DatasetConfig, rng: np.random.Generator | None = None):
    """Build (train, test) demonstration lists, deterministic in the seed.

    reacher: ``train_targets`` experts with ``rollouts`` noisy rollouts each,
    plus ``test_targets`` held-out experts.  walker: one expert per
    (target speed, style) with ``rollouts`` train and ``test_rollouts`` test
    episodes each (``train_targets``/``test_targets`` unused).
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if config.kind == "reacher":
        env = ReacherEnv()
        targets = _unit_disc(rng, config.train_targets + config.test_targets)
        train, test = [], []
        for e, target in enumerate(targets):
            split = "train" if e < config.train_targets else "test"
            reps = config.rollouts if split == "train" else config.test_rollouts
            for m in range(reps):
                meta = {"env": "reacher", "expert": e, "task": target.tolist(), "rollout": m,
                        "split": split}
                traj = rollout(env, expert_policy("reacher", target, noise=config.expert_noise),
                               env.horizon, rng, env.initial_state(target), meta)
                (train if split == "train" else test).append(traj)
        return train, test
    if config.kind == "walker":
        train, test = [], []
        e = 0
        for speed in config.target_speeds:
            for amp, freq in zip(config.style_amps, config.style_freqs):
                env = WalkerEnv(style_freq=float(freq))
                for split, reps in (("train", config.rollouts), ("test", config.test_rollouts)):
                    for m in range(reps):
                        meta = {"env": "walker", "expert": e, "task": float(speed),
                                "style_amp": float(amp), "style_freq": float(freq),
                                "rollout": m, "split": split}
                        x0 = env.initial_state(rng.uniform(0.0, 2.0 * np.pi))
                        traj = rollout(env, expert_policy("walker", speed, amp, config.expert_noise),
                                       env.horizon, rng, x0, meta)
                        (train if split == "train" else test).append(traj)
                e += 1
        return train, test
    raise ValueError(f"unknown environment kind '{config.kind}'")


# ------------------------------------------------------------- file format

def save_trajectories(path, trajs: Iterable[Trajectory]) -> None:
    """One JSON object per line; floats use the shortest exact round-trip repr."""
    with open(path, "w") as fh:
        for t in trajs:
            fh.write(json.dumps(t.to_record(), allow_nan=False, separators=(",", ":")) + "\n")


def load_trajectories(path) -> list[Trajectory]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    with open(path) as fh:
        return [Trajectory.from_record(json.loads(line)) for line in fh if line.strip()]
