"""Model-predictive planning with the cross-entropy method.

Both the exploration policy (scored by an information utility) and the task
policies (scored by a task reward) are built here by optimizing open-loop
action sequences through rollouts of a posterior dynamics model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .envs import Task
from .infogain import UtilitySpec, utility_batch
from .numkit import RngStream
from .posterior import Posterior

MODES = ("mean", "sample", "member")


@dataclass
class CemConfig:
    horizon: int = 25
    population: int = 64
    elite_frac: float = 0.125
    iterations: int = 4
    smoothing: float = 0.5
    n_act: int = 128
    mode: str = "member"
    init_std: float = 0.5
    replan_every: int = 1

    def __post_init__(self):
        if not 0 < self.elite_frac <= 1:
            raise ValueError("elite_frac must lie in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.population < self.n_elites or self.n_elites < 1:
            raise ValueError("population must be >= elites >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")
        if self.iterations < 1 or self.n_act < 1 or self.replan_every < 1:
            raise ValueError("iterations, n_act and replan_every must be >= 1")

    @property
    def n_elites(self) -> int:
        return max(1, int(np.ceil(self.population * self.elite_frac)))


Score = "Task | UtilitySpec | Callable"


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    values: np.ndarray
    truncated: bool = False


@dataclass
class PlanResult:
    action: np.ndarray
    sequence: np.ndarray
    score: float
    trace: list[float] = field(default_factory=list)


def _step_values(post, score, S, A, SP, handles) -> np.ndarray:
    if score is None:
        return np.zeros(len(S))
    if isinstance(score, Task):
        return np.asarray(score.reward(S, A, SP), dtype=np.float64)
    return utility_batch(post, S, A, score, handles=handles)


def rollout_batch(post: Posterior, S0: np.ndarray, actions: np.ndarray, mode: str,
                  rng: RngStream, score=None, handles: list | None = None,
                  chunk: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Roll ``P`` open-loop sequences ``actions`` (P, H, m) from ``S0`` (P, d).

    Returns states (P, H+1, d), per-step values (P, H) and a per-row flag for
    rollouts truncated by non-finite states. All randomness is drawn up front
    so results do not depend on the chunk size.
    """
    P, H, _ = actions.shape
    d = S0.shape[1]
    if handles is None:
        handles = post.draw(rng.child("handles"))
    N = len(handles)
    assign = np.arange(P) % N
    noise = rng.child("noise").standard_normal((P, H, d)) if mode == "sample" else None
    pick = rng.child("pick").integers(0, N, (P, H)) if mode == "sample" else None
    states = np.empty((P, H + 1, d))
    states[:, 0] = S0
    values = np.zeros((P, H))
    bad = np.zeros(P, dtype=bool)
    chunk = chunk or P
    for lo in range(0, P, chunk):
        sl = slice(lo, min(P, lo + chunk))
        S = states[sl, 0]
        for t in range(H):
            A = actions[sl, t]
            ok = ~bad[sl]
            SP = np.full_like(S, np.nan)
            if ok.any():
                Sk, Ak = S[ok], A[ok]
                if mode == "mean":
                    SP[ok] = post.predict_mean(Sk, Ak)[0]
                elif mode == "member":
                    SP[ok] = post.predict_assigned(handles, assign[sl][ok], Sk, Ak)[0]
                else:
                    m, v = post.predict_assigned(handles, pick[sl, t][ok], Sk, Ak)
                    SP[ok] = m + np.sqrt(v) * noise[sl, t][ok]
                vals = np.full(len(S), -np.inf)
                vals[ok] = _step_values(post, score, Sk, Ak, SP[ok], handles)
                values[sl, t] = vals
            else:
                values[sl, t] = -np.inf
            newly_bad = ~np.all(np.isfinite(SP), axis=1) & ok
            if newly_bad.any():
                idx = np.arange(sl.start, sl.stop)[newly_bad]
                bad[idx] = True
                values[idx, t] = -np.inf
            states[sl, t + 1] = SP
            S = SP
    return states, values, bad


def rollout_model(post: Posterior, s0, actions, horizon: int, mode: str, rng: RngStream,
                  score=None) -> Trajectory:
    """One rollout driven by an action sequence (H, m) or a policy ``(s, rng) -> a``."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    s0 = np.asarray(s0, dtype=np.float64).ravel()
    if horizon == 0:
        return Trajectory(s0[None], np.zeros((0, post.action_dim)), np.zeros(0))
    if not callable(actions):
        seq = np.asarray(actions, dtype=np.float64).reshape(-1, post.action_dim)[:horizon]
        if len(seq) < horizon:
            raise ValueError(f"action sequence shorter than horizon {horizon}")
        states, values, bad = rollout_batch(post, s0[None], seq[None], mode, rng, score)
        return Trajectory(states[0], seq, values[0], bool(bad[0]))
    # policy: step one action at a time with a single sampled model
    handles = post.draw(rng.child("handles"))
    member = int(rng.child("member").integers(0, len(handles)))
    policy_rng = rng.child("policy")
    states, acts, vals = [s0], [], []
    truncated = False
    for t in range(horizon):
        a = np.asarray(actions(states[-1], policy_rng), dtype=np.float64).reshape(1, -1)
        S = states[-1][None]
        if mode == "mean":
            sp = post.predict_mean(S, a)[0]
        elif mode == "member":
            sp = post.predict_one(handles[member], S, a)[0]
        else:
            j = int(rng.child("pick", t).integers(0, len(handles)))
            m, v = post.predict_one(handles[j], S, a)
            sp = m + np.sqrt(v) * rng.child("noise", t).standard_normal(m.shape)
        acts.append(a[0])
        if not np.all(np.isfinite(sp)):
            truncated = True
            break
        vals.append(float(_step_values(post, score, S, a, sp, handles)[0]))
        states.append(sp[0])
    return Trajectory(np.array(states), np.array(acts), np.array(vals), truncated)


def _aggregate(score, values: np.ndarray) -> np.ndarray:
    if isinstance(score, Task) and score.aggregation == "max":
        return values.max(axis=1)
    return values.sum(axis=1)


def plan_cem(post: Posterior, score, s0, cfg: CemConfig, rng: RngStream,
             bounds: tuple[np.ndarray, np.ndarray], init_mean: np.ndarray | None = None
             ) -> PlanResult:
    """Cross-entropy search over open-loop action sequences.

    The best sequence found so far is re-injected into every population
    (elitism), so the best score in ``trace`` never decreases. Sampled noise
    is low-pass filtered along time with a variance-preserving AR(1) filter.
    Elites are chosen by rank only, so shifting all scores by a constant does
    not change the plan.
    """
    low, high = (np.asarray(b, dtype=np.float64).ravel() for b in bounds)
    H, m, P = cfg.horizon, low.size, cfg.population
    s0 = np.asarray(s0, dtype=np.float64).ravel()
    mean = np.zeros((H, m)) + 0.5 * (low + high) if init_mean is None \
        else np.clip(np.asarray(init_mean, dtype=np.float64).reshape(H, m), low, high)
    std = np.broadcast_to(cfg.init_std * 0.5 * (high - low), (H, m)).copy()
    handles = post.draw(rng.child("handles"))
    beta = cfg.smoothing
    best_seq, best_score = None, -np.inf
    trace = []
    S0 = np.repeat(s0[None], P, axis=0)
    for it in range(cfg.iterations):
        it_rng = rng.child("iter", it)
        eps = it_rng.standard_normal((P, H, m))
        for t in range(1, H):
            eps[:, t] = beta * eps[:, t - 1] + np.sqrt(1 - beta * beta) * eps[:, t]
        samples = np.clip(mean + std * eps, low, high)
        if best_seq is not None:
            samples[0] = best_seq
        _, values, _ = rollout_batch(post, S0, samples, cfg.mode, it_rng.child("rollout"),
                                     score, handles, chunk=cfg.n_act)
        scores = _aggregate(score, values)
        scores = np.where(np.isnan(scores), -np.inf, scores)
        order = np.argsort(-scores, kind="stable")
        if best_seq is None or scores[order[0]] > best_score:
            best_seq, best_score = samples[order[0]].copy(), float(scores[order[0]])
        elites = samples[order[:cfg.n_elites]]
        mean = elites.mean(axis=0)
        std = elites.std(axis=0)
        trace.append(best_score)
    return PlanResult(best_seq[0].copy(), best_seq, best_score, trace)
