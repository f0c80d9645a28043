"""Toy continuous-control environments with known dynamics and reward tasks.

Environments are stateless: ``step(s, a, rng)`` is a pure function of its
arguments. Every environment also exposes ``mean_step`` (the noise-free
dynamics), which lets tests and oracles plan against the true model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import kernels
from .numkit import NumericError, RngStream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    noise_std: float

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("state and action dimensions must be >= 1")
        lo = np.asarray(self.action_low, dtype=np.float64).reshape(self.action_dim)
        hi = np.asarray(self.action_high, dtype=np.float64).reshape(self.action_dim)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ValueError("action bounds must be finite with low < high")
        object.__setattr__(self, "action_low", lo)
        object.__setattr__(self, "action_high", hi)


@dataclass(frozen=True)
class Task:
    name: str
    reward: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    aggregation: str = "sum"

    def __post_init__(self):
        if self.aggregation not in ("sum", "max"):
            raise ValueError("aggregation must be 'sum' or 'max'")

    def aggregate(self, rewards) -> float:
        r = np.asarray(rewards, dtype=np.float64)
        if r.size == 0:
            return 0.0
        return float(r.sum() if self.aggregation == "sum" else r.max())


class Env:
    name = "env"
    spec: EnvSpec
    tasks: dict[str, Task]

    def reset(self, rng: RngStream) -> np.ndarray:
        raise NotImplementedError

    def mean_step(self, S: np.ndarray, A: np.ndarray) -> np.ndarray:
        """Noise-free batched dynamics."""
        return self._step_batch(S, A, np.zeros_like(np.atleast_2d(S), dtype=np.float64))

    def _step_batch(self, S, A, noise) -> np.ndarray:
        raise NotImplementedError

    def clip_action(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        c = np.clip(a, self.spec.action_low, self.spec.action_high)
        if np.any(c != a):
            log.debug("%s: action clipped to bounds", self.name)
        return c

    def step_batch(self, S, A, rng: RngStream) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        A = self.clip_action(np.atleast_2d(A))
        noise = self.spec.noise_std * rng.standard_normal(S.shape) if self.spec.noise_std \
            else np.zeros_like(S)
        with np.errstate(invalid="ignore", over="ignore"):
            out = self._step_batch(S, A, noise)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{self.name}: non-finite state")
        return out

    def step(self, s, a, rng: RngStream) -> np.ndarray:
        return self.step_batch(np.reshape(s, (1, -1)), np.reshape(a, (1, -1)), rng)[0]

    def sample_action(self, rng: RngStream) -> np.ndarray:
        return rng.uniform(self.spec.action_low, self.spec.action_high)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Arena:
    """Two 1x1 chambers separated by a wall band with a narrow corridor."""

    x_lo: float = 0.0
    x_hi: float = 2.0
    y_lo: float = 0.0
    y_hi: float = 1.0
    w_lo: float = 0.9
    w_hi: float = 1.1
    g_lo: float = 0.45
    g_hi: float = 0.55


class PointMass2D(Env):
    """State (x, y, vx, vy), action = 2-D acceleration."""

    name = "pointmass2d"

    def __init__(self, noise_std: float = 0.01, dt: float = 0.05, drag: float = 0.02,
                 a_max: float = 2.0, vmax: float = 1.5, horizon: int = 200,
                 arena: Arena = Arena(), start_center=(0.25, 0.5), start_halfwidth=0.15,
                 gap_width: float | None = None):
        if gap_width is not None:
            mid = 0.5 * (arena.y_lo + arena.y_hi)
            arena = replace(arena, g_lo=mid - 0.5 * gap_width, g_hi=mid + 0.5 * gap_width)
        if vmax * dt + 3 * noise_std >= arena.w_hi - arena.w_lo:
            raise ValueError("one step could tunnel through the dividing wall")
        self.spec = EnvSpec(4, 2, [-a_max] * 2, [a_max] * 2, horizon, noise_std)
        self.dt, self.drag, self.vmax = dt, drag, vmax
        self.arena = arena
        self.start_center = np.asarray(start_center, dtype=np.float64)
        self.start_halfwidth = start_halfwidth
        ar = arena
        self.goal_a = np.array([ar.x_lo, ar.y_hi])
        self.goal_b = np.array([ar.x_hi, ar.y_lo])
        self.tasks = {
            "ReachA": Task("ReachA", self._reach(self.goal_a), "max"),
            "ReachB": Task("ReachB", self._reach(self.goal_b), "max"),
        }

    @staticmethod
    def _reach(goal):
        def reward(s, a, sp):
            sp = np.atleast_2d(sp)
            d2 = np.sum((sp[:, :2] - goal) ** 2, axis=1)
            return 100.0 * np.exp(-d2 / 0.1)
        return reward

    @property
    def bounds(self) -> tuple[tuple[float, float], tuple[float, float]]:
        a = self.arena
        return (a.x_lo, a.x_hi), (a.y_lo, a.y_hi)

    def reset(self, rng):
        pos = self.start_center + rng.uniform(-self.start_halfwidth, self.start_halfwidth, 2)
        return np.concatenate([pos, [0.0, 0.0]])

    def _step_batch(self, S, A, noise):
        a = self.arena
        return kernels.pointmass_step(S, A, noise, dt=self.dt, drag=self.drag, vmax=self.vmax,
                                      x_lo=a.x_lo, x_hi=a.x_hi, y_lo=a.y_lo, y_hi=a.y_hi,
                                      w_lo=a.w_lo, w_hi=a.w_hi, g_lo=a.g_lo, g_hi=a.g_hi)


def angle_normalize(x):
    return ((x + np.pi) % (2 * np.pi)) - np.pi


class Pendulum(Env):
    """Swing-up pendulum; state (cos φ, sin φ, ω) with φ = 0 upright."""

    name = "pendulum"
    max_speed = 8.0
    max_torque = 2.0

    def __init__(self, noise_std: float = 0.01, dt: float = 0.05, g: float = 10.0,
                 m: float = 1.0, l: float = 1.0, horizon: int = 200):
        self.spec = EnvSpec(3, 1, [-self.max_torque], [self.max_torque], horizon, noise_std)
        self.dt, self.g, self.m, self.l = dt, g, m, l
        worst = np.pi ** 2 + 0.1 * self.max_speed ** 2 + 0.001 * self.max_torque ** 2
        self.tasks = {
            "SwingUp": Task("SwingUp", lambda s, a, sp: self._swing(s, a, worst), "sum"),
            "Spin": Task("Spin", lambda s, a, sp: np.clip(np.abs(np.atleast_2d(s)[:, 2]),
                                                         0.0, 100.0), "sum"),
        }

    @staticmethod
    def _swing(s, a, worst):
        s, a = np.atleast_2d(s), np.atleast_2d(a)
        phi = np.arctan2(s[:, 1], s[:, 0])
        cost = phi ** 2 + 0.1 * s[:, 2] ** 2 + 0.001 * a[:, 0] ** 2
        return 100.0 * (1.0 - cost / worst)

    def reset(self, rng):
        phi = np.pi + rng.uniform(-0.05, 0.05)
        return np.array([np.cos(phi), np.sin(phi), 0.0])

    def _step_batch(self, S, A, noise):
        phi = np.arctan2(S[:, 1], S[:, 0])
        w = S[:, 2]
        u = A[:, 0]
        w2 = w + (3 * self.g / (2 * self.l) * np.sin(phi)
                  + 3.0 / (self.m * self.l ** 2) * u) * self.dt
        w2 = np.clip(w2 + noise[:, 2], -self.max_speed, self.max_speed)
        phi2 = phi + w2 * self.dt + noise[:, 0]
        return np.stack([np.cos(phi2), np.sin(phi2), w2], axis=1)


class LinGauss(Env):
    """s' = A s + B a + η with η ~ N(0, σ² I)."""

    name = "lingauss"

    def __init__(self, noise_std: float = 0.0, horizon: int = 50, s0=(0.0, 0.0),
                 s0_std: float = 0.0, a_max: float = 1.0):
        self.spec = EnvSpec(2, 1, [-a_max], [a_max], horizon, noise_std)
        self.A = np.array([[0.9, 0.1], [0.0, 0.9]])
        self.B = np.array([[0.0], [0.5]])
        self.s0 = np.asarray(s0, dtype=np.float64)
        self.s0_std = s0_std
        self.tasks = {"Origin": Task("Origin", lambda s, a, sp: -np.sum(np.atleast_2d(sp) ** 2,
                                                                        axis=1), "sum")}

    def reset(self, rng):
        if self.s0_std:
            return self.s0 + self.s0_std * rng.standard_normal(2)
        return self.s0.copy()

    def _step_batch(self, S, A, noise):
        return S @ self.A.T + A @ self.B.T + noise


ENVS = {"pointmass2d": PointMass2D, "pendulum": Pendulum, "lingauss": LinGauss}


def make_env(name: str, **params) -> Env:
    try:
        cls = ENVS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
    return cls(**params)


def env_reset(env: Env, rng: RngStream) -> np.ndarray:
    return env.reset(rng)


def env_step(env: Env, s, a, rng: RngStream) -> np.ndarray:
    return env.step(s, a, rng)
