"""Exploration and evaluation loops.

Exploration: random warm-up, then repeatedly refit the posterior on the whole
buffer, plan with the information utility and execute the first ``n_pol``
planned actions in the real environment. Evaluation: train a fresh
MC-dropout model on a buffer snapshot and solve each task by replanning
against it.

Every random draw is keyed by ``(master seed, purpose, step or cycle)``, so a
run resumed from a checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .buffer import ReplayBuffer
from .config import ExperimentConfig
from .envs import Env, Task
from .infogain import utility_batch
from .numkit import NumericError, RngStream
from .planner import plan_cem
from .posterior import (BackendConfig, Posterior, fit_backend, load_posterior,
                        save_posterior)

log = logging.getLogger(__name__)


class ExplorationFault(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CountingEnv:
    """Wraps an environment and counts real ``step`` calls."""

    def __init__(self, env: Env):
        self.env = env
        self.steps = 0

    def __getattr__(self, name):
        return getattr(self.env, name)

    def step(self, s, a, rng):
        self.steps += 1
        return self.env.step(s, a, rng)

    def step_batch(self, S, A, rng):
        self.steps += len(np.atleast_2d(S))
        return self.env.step_batch(S, A, rng)


def state_hash(s: np.ndarray) -> str:
    return hashlib.sha1(np.asarray(s, dtype="<f8").tobytes()).hexdigest()[:16]


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("BMAX_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ExploreResult:
    buffer: ReplayBuffer
    events: list[dict]
    snapshots: list[int]
    env_steps: int = 0
    fit_seconds: list[float] = field(default_factory=list)


def _derive_seed(rng: RngStream) -> int:
    return int(rng.integers(0, 2 ** 62))


def _cycle_train(cfg: ExperimentConfig, cycle_rng: RngStream):
    return replace(cfg.train, seed=_derive_seed(cycle_rng.child("train")))


class _Run:
    """Mutable explore state; everything needed to resume lives here."""

    def __init__(self, env: Env, cfg: ExperimentConfig):
        self.cfg = cfg
        self.master = RngStream(cfg.seed)
        self.buffer = ReplayBuffer(env.spec.state_dim, env.spec.action_dim)
        self.events: list[dict] = []
        self.cycle = 0
        self.episode = 0
        self.t_ep = 0
        self.s = env.reset(self.master.child("reset", 0))
        self.post: Posterior | None = None

    # --- checkpoints

    def save(self, run_dir: Path) -> Path:
        ck = run_dir / "checkpoints"
        ck.mkdir(parents=True, exist_ok=True)
        self.buffer.to_csv(run_dir / "buffer.csv")
        with open(run_dir / "events.jsonl", "w") as fh:
            for e in self.events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
        state = {"cycle": self.cycle, "episode": self.episode, "t_ep": self.t_ep,
                 "s": [repr(float(x)) for x in self.s], "n": len(self.buffer),
                 "has_post": self.post is not None}
        if self.post is not None and self.cfg.backend.kind != "ensemble":
            save_posterior(self.post, ck / "posterior")
        tmp = ck / "state.json.tmp"
        tmp.write_text(json.dumps(state, sort_keys=True))
        tmp.replace(ck / "state.json")
        return ck

    def load(self, run_dir: Path) -> bool:
        ck = run_dir / "checkpoints" / "state.json"
        if not ck.exists():
            return False
        state = json.loads(ck.read_text())
        self.buffer = ReplayBuffer.from_csv(run_dir / "buffer.csv").prefix(state["n"])
        with open(run_dir / "events.jsonl") as fh:
            self.events = [json.loads(line) for line in fh if line.strip()]
        self.cycle, self.episode, self.t_ep = state["cycle"], state["episode"], state["t_ep"]
        self.s = np.array([float(x) for x in state["s"]])
        if state["has_post"] and self.cfg.backend.kind != "ensemble":
            self.post = load_posterior(run_dir / "checkpoints" / "posterior")
        return True


def _env_step(run: _Run, env, a, phase: str, utility: float | None) -> None:
    step = len(run.buffer)
    sp = env.step(run.s, a, run.master.child("env", step))
    run.buffer.append(run.s, a, sp, step, phase)
    run.events.append({"step": step, "phase": phase, "cycle": run.cycle if phase == "active"
                       else None, "utility": utility,
                       "action": [float(x) for x in a], "state_hash": state_hash(sp)})
    n_eval = run.cfg.counters.n_eval
    if len(run.buffer) % n_eval == 0:
        run.events.append({"event": "snapshot", "n": len(run.buffer)})
    run.s = sp
    run.t_ep += 1
    if run.t_ep >= env.spec.horizon:
        run.episode += 1
        run.t_ep = 0
        run.s = env.reset(run.master.child("reset", run.episode))


def explore(env: Env, cfg: ExperimentConfig, run_dir: str | Path | None = None,
            resume: bool = False, stop_after_cycles: int | None = None) -> ExploreResult:
    """Collect ``n_ex_steps`` real transitions with the configured utility.

    With ``run_dir`` set, the buffer, event log and a resumable checkpoint are
    written after the warm-up and after every active cycle.
    ``stop_after_cycles`` interrupts the run deliberately (used to test resume).
    """
    counters = cfg.counters
    wrapped = env if isinstance(env, CountingEnv) else CountingEnv(env)
    run = _Run(env, cfg)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None and resume:
        run.load(run_dir)
    low, high = env.spec.action_low, env.spec.action_high
    fit_seconds = []
    try:
        while len(run.buffer) < counters.n_ex_warm:
            a = run.master.child("warmup", len(run.buffer)).uniform(low, high)
            _env_step(run, wrapped, a, "warmup", None)
        if run_dir is not None:
            run.save(run_dir)
        cycles_done = 0
        while len(run.buffer) < counters.n_ex_steps:
            if stop_after_cycles is not None and cycles_done >= stop_after_cycles:
                break
            cycle_rng = run.master.child("cycle", run.cycle)
            t0 = time.perf_counter()
            run.post = fit_backend(run.buffer, cfg.backend, _cycle_train(cfg, cycle_rng),
                                   run.post)
            fit_seconds.append(time.perf_counter() - t0)
            plan = plan_cem(run.post, cfg.utility, run.s, cfg.planner, cycle_rng.child("plan"),
                            (low, high))
            handles = run.post.draw(cycle_rng.child("log"))
            n_exec = min(counters.n_pol, len(plan.sequence),
                         counters.n_ex_steps - len(run.buffer))
            episode = run.episode
            for a in plan.sequence[:n_exec]:
                u = float(utility_batch(run.post, run.s[None], a[None], cfg.utility, handles)[0])
                _env_step(run, wrapped, a, "active", u)
                if run.episode != episode:
                    break  # plan was made for the previous episode
            run.cycle += 1
            cycles_done += 1
            if run_dir is not None:
                run.save(run_dir)
    except NumericError as exc:
        ck = run.save(run_dir) if run_dir is not None else None
        raise ExplorationFault(f"environment fault at step {len(run.buffer)}: {exc}", ck) from exc
    snapshots = [n for n in range(counters.n_eval, len(run.buffer) + 1, counters.n_eval)]
    return ExploreResult(run.buffer, run.events, snapshots, wrapped.steps, fit_seconds)


def random_explore(env: Env, n_steps: int, seed: int, n_eval: int = 500) -> ExploreResult:
    """Uniform-random baseline with the same episode handling as :func:`explore`."""
    cfg = ExperimentConfig(seed=seed)
    cfg.counters = replace(cfg.counters, n_ex_steps=n_steps, n_ex_warm=n_steps, n_eval=n_eval,
                           n_pol=n_eval)
    return explore(env, cfg)


# ---------------------------------------------------------------------------
# evaluation


EVAL_BACKEND_KIND = "mc_dropout"


def eval_backend(cfg: ExperimentConfig) -> BackendConfig:
    b = cfg.backend
    return BackendConfig(kind=EVAL_BACKEND_KIND, n_samples=b.n_samples,
                         p=b.p if b.p > 0 else 0.25, gamma2=b.gamma2)


def run_task(env: Env, post: Posterior, task: Task, cfg: ExperimentConfig,
             rng: RngStream) -> float:
    """Act ``n_ev_steps`` in the real env, replanning on the task reward."""
    pcfg = cfg.eval_planner
    low, high = env.spec.action_low, env.spec.action_high
    s = env.reset(rng.child("reset"))
    rewards = []
    seq, pos = None, 0
    for t in range(cfg.counters.n_ev_steps):
        if seq is None or pos >= pcfg.replan_every or pos >= len(seq):
            init = None
            if seq is not None:
                init = np.concatenate([seq[pos:], np.repeat(seq[-1:], pos, axis=0)])
            seq = plan_cem(post, task, s, pcfg, rng.child("plan", t), (low, high), init).sequence
            pos = 0
        a = seq[pos]
        pos += 1
        sp = env.step(s, a, rng.child("env", t))
        rewards.append(float(task.reward(s[None], a[None], sp[None])[0]))
        s = sp
    return task.aggregate(rewards)


@dataclass
class EvalTable:
    snapshot: int
    tasks: list[str]
    rewards: dict[str, list[float | None]]

    def mean(self, task: str) -> float:
        vals = [v for v in self.rewards[task] if v is not None]
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        return {"snapshot": self.snapshot, "rewards": self.rewards}


def evaluate(env: Env, buffer: ReplayBuffer, tasks: list[str], cfg: ExperimentConfig,
             posterior: Posterior | None = None) -> EvalTable:
    """Reward table (task x repeat) for one buffer snapshot.

    The evaluation model is always MC-dropout, trained from scratch per
    repeat; ``posterior`` overrides it (oracle injection in tests). A repeat
    that raises is recorded as ``None``.
    """
    if len(buffer) == 0:
        raise ValueError("cannot evaluate an empty buffer")
    master = RngStream(cfg.seed).child("eval", len(buffer))
    backend = eval_backend(cfg)
    models: dict[int, Posterior] = {}

    def model_for(k: int) -> Posterior:
        if posterior is not None:
            return posterior
        if k not in models:
            tcfg = replace(cfg.eval_train, seed=_derive_seed(master.child("train", k)))
            models[k] = fit_backend(buffer, backend, tcfg)
        return models[k]

    def one(job):
        name, k = job
        try:
            return run_task(env, model_for(k), env.tasks[name], cfg,
                            master.child("task", name, k))
        except Exception as exc:  # recorded as missing, not zero
            log.warning("evaluation repeat %s/%d failed: %s", name, k, exc)
            return None

    for k in range(cfg.counters.n_k):
        model_for(k)
    jobs = [(name, k) for name in tasks for k in range(cfg.counters.n_k)]
    with ThreadPoolExecutor(max_workers()) as pool:
        results = list(pool.map(one, jobs))
    rewards = {name: [] for name in tasks}
    for (name, _), r in zip(jobs, results):
        rewards[name].append(r)
    return EvalTable(len(buffer), list(tasks), rewards)


def step_budget_report(cfg: ExperimentConfig | int, n_tasks: int, n_sac: int,
                       n_k: int | None = None) -> dict:
    """Real-robot steps of the model-based pipeline vs a model-free baseline
    that needs ``n_tasks * n_k * n_sac`` interactions."""
    if isinstance(cfg, ExperimentConfig):
        n_ex, n_k = cfg.counters.n_ex_steps, cfg.counters.n_k if n_k is None else n_k
    else:
        n_ex, n_k = int(cfg), 1 if n_k is None else n_k
    model_free = n_tasks * n_k * n_sac
    ratio = None if n_sac == 0 or n_ex == 0 else model_free / n_ex
    return {"real_steps": n_ex, "model_free_steps": model_free, "ratio": ratio,
            "ratio_defined": ratio is not None}
