"""Desk-scale locomotion environments and gait metrics.

``GaitWalkerEnv`` replaces rigid-body physics with four foot-phase
oscillators: a foot is on the ground while the fractional part of its phase
is below the duty factor.  The policy sets forward acceleration and the four
stepping rates, so gait pattern and cadence are direct functions of the
action sequence while velocity tracking supplies the environment reward.

``PointMassEnv`` is the 1-D velocity-tracking sanity task for PPO.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_DT = 0.05
DUTY_FACTOR = 0.6
TARGET_HEIGHT = 0.34
FEET = ("front_left", "front_right", "rear_left", "rear_right")


@dataclass
class EnvConfig:
    kind: str = "gait_walker"
    dt: float = DEFAULT_DT
    episode_length: int = 240
    drag: float = 0.5
    accel_scale: float = 2.0
    command_low: float = 0.5
    command_high: float = 2.0
    nominal_rate: float = 2.5
    rate_scale: float = 1.0
    rate_low: float = 0.5
    rate_high: float = 5.0
    action_penalty: float = 0.01
    max_velocity: float = 3.0

    def __post_init__(self):
        if self.kind not in ("gait_walker", "point_mass"):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.episode_length < 1:
            raise ValueError("episode_length must be positive")


def tracking_reward(command, velocity):
    return math.exp(-((command - velocity) ** 2) / 0.25)


class _VelocityEnv:
    """Shared 1-D forward-velocity dynamics with drag."""

    action_dim = 1

    def __init__(self, config=None, seed=0):
        self.config = config or EnvConfig()
        self.rng = np.random.default_rng(seed)
        self.command = 0.0
        self.velocity = 0.0
        self.step_index = 0

    def _integrate_velocity(self, accel):
        c = self.config
        v = self.velocity + accel * c.dt - c.drag * self.velocity * c.dt
        self.velocity = min(max(v, 0.0), c.max_velocity)

    def _check_action(self, action):
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape[0] != self.action_dim:
            raise ValueError(f"expected an action of size {self.action_dim}, got {action.shape[0]}")
        if not np.all(np.isfinite(action)):
            raise ValueError("action contains non-finite values")
        return action

    def _sample_command(self):
        return float(self.rng.uniform(self.config.command_low, self.config.command_high))


class GaitWalkerEnv(_VelocityEnv):
    action_dim = 5
    obs_dim = 19

    def __init__(self, config=None, seed=0):
        super().__init__(config, seed)
        self.phases = np.zeros(4)
        self.yaw = 0.0
        self.prev_contacts = np.ones(4)

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.command = self._sample_command()
        self.velocity = 0.0
        self.phases = self.rng.uniform(0.0, 1.0, size=4)
        self.yaw = float(self.rng.uniform(-0.1, 0.1))
        self.step_index = 0
        self.prev_contacts = self.contacts()
        return self.observation()

    def contacts(self):
        return (np.mod(self.phases, 1.0) < DUTY_FACTOR).astype(np.float64)

    def step_rates(self, action):
        c = self.config
        return np.clip(c.nominal_rate + c.rate_scale * action[1:5], c.rate_low, c.rate_high)

    def observation(self):
        angle = 2.0 * math.pi * self.phases
        front = angle[0] - angle[1]
        rear = angle[2] - angle[3]
        return np.concatenate(
            [
                [self.command, self.velocity, self.command - self.velocity],
                np.sin(angle),
                np.cos(angle),
                self.contacts(),
                [math.sin(front), math.cos(front), math.sin(rear), math.cos(rear)],
            ]
        )

    @staticmethod
    def _posture(contacts):
        """Body (height, roll, pitch) implied by which feet are loaded."""
        b = contacts
        roll = 0.05 * ((b[0] + b[2]) - (b[1] + b[3])) / 2.0
        pitch = 0.05 * ((b[0] + b[1]) - (b[2] + b[3])) / 2.0
        return TARGET_HEIGHT - 0.03 * (1.0 - b.sum() / 4.0), roll, pitch

    def channels(self):
        b = self.contacts()
        height, roll, pitch = self._posture(b)
        prev_height, prev_roll, prev_pitch = self._posture(self.prev_contacts)
        dt = self.config.dt
        return {
            "commands": np.array(self.command),
            "base_linear_velocity": np.array([self.velocity, 0.2 * roll, (height - prev_height) / dt]),
            "base_angular_velocity": np.array([(roll - prev_roll) / dt, (pitch - prev_pitch) / dt, 0.0]),
            "base_height": np.array(height),
            "base_roll_pitch_yaw": np.array([roll, pitch, self.yaw]),
            "feet_contacts": b,
        }

    def step(self, action):
        action = self._check_action(action)
        c = self.config
        self._integrate_velocity(c.accel_scale * action[0])
        self.prev_contacts = self.contacts()
        self.phases = self.phases + self.step_rates(action) * c.dt
        self.step_index += 1
        reward = tracking_reward(self.command, self.velocity) - c.action_penalty * float(action @ action)
        return StepResult(self.observation(), reward, self.step_index >= c.episode_length, self.channels())

    def get_state(self):
        return {
            "command": self.command,
            "velocity": self.velocity,
            "phases": self.phases.tolist(),
            "yaw": self.yaw,
            "step_index": self.step_index,
            "prev_contacts": self.prev_contacts.tolist(),
            "rng": self.rng.bit_generator.state,
        }

    def set_state(self, state):
        self.command = state["command"]
        self.velocity = state["velocity"]
        self.phases = np.array(state["phases"], dtype=np.float64)
        self.prev_contacts = np.array(state["prev_contacts"], dtype=np.float64)
        self.yaw = state["yaw"]
        self.step_index = state["step_index"]
        self.rng.bit_generator.state = state["rng"]


class PointMassEnv(_VelocityEnv):
    """Track a commanded speed by choosing an acceleration."""

    action_dim = 1
    obs_dim = 3

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.command = self._sample_command()
        self.velocity = 0.0
        self.step_index = 0
        return self.observation()

    def observation(self):
        return np.array([self.command, self.velocity, self.command - self.velocity])

    def channels(self):
        return {
            "commands": np.array(self.command),
            "base_linear_velocity": np.array([self.velocity, 0.0, 0.0]),
        }

    def step(self, action):
        action = self._check_action(action)
        self._integrate_velocity(self.config.accel_scale * action[0])
        self.step_index += 1
        reward = tracking_reward(self.command, self.velocity)
        return StepResult(self.observation(), reward, self.step_index >= self.config.episode_length, self.channels())

    def get_state(self):
        return {
            "command": self.command,
            "velocity": self.velocity,
            "step_index": self.step_index,
            "rng": self.rng.bit_generator.state,
        }

    def set_state(self, state):
        self.command = state["command"]
        self.velocity = state["velocity"]
        self.step_index = state["step_index"]
        self.rng.bit_generator.state = state["rng"]


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


def make_env(config, seed=0):
    if config.kind == "gait_walker":
        return GaitWalkerEnv(config, seed)
    return PointMassEnv(config, seed)


def env_dims(config):
    cls = GaitWalkerEnv if config.kind == "gait_walker" else PointMassEnv
    return cls.obs_dim, cls.action_dim


# gait metrics


def _contacts(segment_or_array):
    if hasattr(segment_or_array, "channels"):
        if "feet_contacts" not in segment_or_array.channels:
            raise KeyError("segment has no 'feet_contacts' channel")
        arr = segment_or_array.channels["feet_contacts"]
    else:
        arr = np.asarray(segment_or_array, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"contacts must have shape (N, 4), got {arr.shape}")
    return arr


def sync_error(segment):
    """Mean per-step |FL - FR| + |RL - RR|; 0 for a perfect bounding pairing."""
    b = _contacts(segment)
    return float(np.mean(np.abs(b[:, 0] - b[:, 1]) + np.abs(b[:, 2] - b[:, 3])))


def cadence(segment, dt=DEFAULT_DT):
    """Touch-down events (0 -> 1) per foot per second."""
    b = _contacts(segment)
    if b.shape[0] < 2:
        raise ValueError("cadence needs at least two steps")
    if dt <= 0:
        raise ValueError("dt must be positive")
    onsets = np.sum((b[1:] == 1.0) & (b[:-1] == 0.0))
    return float(onsets) / (4.0 * b.shape[0] * dt)


def tracking_error(segment):
    v = segment.channels["base_linear_velocity"]
    v = v[:, 0] if v.ndim == 2 else v
    return float(np.mean(np.abs(segment.channels["commands"].reshape(-1) - v)))


def height_error(segment):
    return float(np.mean(np.abs(segment.channels["base_height"] - TARGET_HEIGHT)))


SEGMENT_FEATURES = {
    "tracking_error": lambda seg, dt: tracking_error(seg),
    "sync_error": lambda seg, dt: sync_error(seg),
    "cadence": cadence,
    "height_error": lambda seg, dt: height_error(seg),
}


def segment_feature(name, segment, dt=DEFAULT_DT):
    try:
        fn = SEGMENT_FEATURES[name]
    except KeyError:
        raise KeyError(f"unknown segment feature {name!r}") from None
    return fn(segment, dt)
