import json

import numpy as np
import pytest

from bmax.buffer import ReplayBuffer
from bmax.config import from_dict
from bmax.envs import LinGauss, PointMass2D
from bmax.pipeline import (CountingEnv, evaluate, explore, random_explore, state_hash,
                           step_budget_report)
from bmax.posterior import KnownDynamics


def small_cfg(**over):
    d = {"env": "pointmass2d", "tasks": ["ReachA", "ReachB"],
         "backend": {"kind": "mc_dropout", "N": 4},
         "utility": {"kind": "jensen_renyi2"},
         "train": {"hidden": [16, 16], "epochs": 5, "max_updates": 40},
         "eval_train": {"hidden": [16, 16], "epochs": 5, "max_updates": 40},
         "planner": {"horizon": 10, "population": 16, "iterations": 2},
         "eval_planner": {"horizon": 5, "population": 16, "iterations": 2, "replan_every": 5},
         "counters": {"n_ex_steps": 60, "n_ex_warm": 20, "n_pol": 10, "n_eval": 20, "n_k": 2,
                      "n_ev_steps": 10},
         "seed": 3}
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return from_dict(d)


def test_warmup_only_run():
    cfg = small_cfg(counters={"n_ex_steps": 10, "n_ex_warm": 10, "n_eval": 10})
    res = explore(PointMass2D(), cfg)
    assert len(res.buffer) == 10
    assert set(res.buffer.phases) == {"warmup"}
    assert res.fit_seconds == []


def test_explore_length_phases_and_env_calls():
    cfg = small_cfg()
    res = explore(PointMass2D(), cfg)
    assert len(res.buffer) == 60 and res.env_steps == 60
    assert res.buffer.phases[:20] == ["warmup"] * 20
    assert res.buffer.phases[20:] == ["active"] * 40
    assert np.array_equal(res.buffer.steps, np.arange(60))
    assert res.snapshots == [20, 40, 60]
    steps = [e for e in res.events if "step" in e]
    assert [e["step"] for e in steps] == list(range(60))
    assert all(e["utility"] is None for e in steps[:20])
    assert all(isinstance(e["utility"], float) for e in steps[20:])
    assert steps[5]["state_hash"] == state_hash(res.buffer.next_states[5])


def test_explore_deterministic(tmp_path):
    cfg = small_cfg()
    explore(PointMass2D(), cfg, tmp_path / "a")
    explore(PointMass2D(), cfg, tmp_path / "b")
    assert (tmp_path / "a/buffer.csv").read_bytes() == (tmp_path / "b/buffer.csv").read_bytes()
    assert (tmp_path / "a/events.jsonl").read_bytes() == (tmp_path / "b/events.jsonl").read_bytes()


def test_warmup_identical_across_utilities():
    a = explore(PointMass2D(), small_cfg())
    b = explore(PointMass2D(), small_cfg(backend={"kind": "laplace", "n_sub": 30},
                                         utility={"kind": "entropy_laplace"}))
    wa, wb = a.buffer.prefix(20), b.buffer.prefix(20)
    for x, y in ((wa.states, wb.states), (wa.actions, wb.actions),
                 (wa.next_states, wb.next_states)):
        assert np.array_equal(x, y)
    assert [e for e in a.events[:20]] == [e for e in b.events[:20]]


@pytest.mark.parametrize("kind,util", [("mc_dropout", "jensen_renyi2"),
                                       ("laplace", "entropy_laplace"),
                                       ("ensemble", "entropy_samples")])
def test_resume_is_byte_exact(tmp_path, kind, util):
    cfg = small_cfg(backend={"kind": kind, "N": 3, "n_sub": 30}, utility={"kind": util})
    explore(PointMass2D(), cfg, tmp_path / "full")
    explore(PointMass2D(), cfg, tmp_path / "cut", stop_after_cycles=2)
    assert len(ReplayBuffer.from_csv(tmp_path / "cut/buffer.csv")) == 40
    explore(PointMass2D(), cfg, tmp_path / "cut", resume=True)
    for name in ("buffer.csv", "events.jsonl"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "cut" / name).read_bytes()


def test_evaluate_entries_and_env_calls():
    cfg = small_cfg()
    buf = random_explore(PointMass2D(), 100, seed=0).buffer
    env = CountingEnv(PointMass2D())
    table = evaluate(env, buf, ["ReachA", "ReachB"], cfg)
    assert env.steps == 2 * 2 * 10
    assert sum(len(v) for v in table.rewards.values()) == 4
    assert all(0.0 <= r <= 100.0 for v in table.rewards.values() for r in v)
    again = evaluate(PointMass2D(), buf, ["ReachA", "ReachB"], cfg)
    assert again.rewards == table.rewards
    assert json.loads(json.dumps(table.to_dict()))["snapshot"] == 100


def test_evaluate_empty_buffer():
    with pytest.raises(ValueError):
        evaluate(PointMass2D(), ReplayBuffer(4, 2), ["ReachA"], small_cfg())


def test_evaluate_failed_repeat_is_missing():
    cfg = small_cfg()
    buf = random_explore(PointMass2D(), 40, seed=0).buffer

    def broken(S, A):
        raise FloatingPointError("boom")

    table = evaluate(PointMass2D(), buf, ["ReachA"], cfg,
                     posterior=KnownDynamics(broken, 4, 2))
    assert table.rewards["ReachA"] == [None, None]
    assert np.isnan(table.mean("ReachA"))


def test_lingauss_evaluation_close_to_true_model():
    env = LinGauss(noise_std=0.0, s0=(1.0, 1.0))
    cfg = from_dict({"env": "lingauss", "env_params": {"s0": [1.0, 1.0]}, "tasks": ["Origin"],
                     "backend": {"kind": "mc_dropout", "N": 4, "p": 0.05},
                     "utility": {"kind": "jensen_renyi2"},
                     "eval_train": {"hidden": [32, 32], "epochs": 150},
                     "eval_planner": {"horizon": 10, "population": 64, "iterations": 4},
                     "counters": {"n_ex_steps": 500, "n_ex_warm": 500, "n_pol": 25,
                                  "n_eval": 500, "n_k": 1, "n_ev_steps": 20},
                     "seed": 0})
    buf = random_explore(env, 500, seed=0).buffer
    learned = evaluate(env, buf, ["Origin"], cfg).mean("Origin")
    oracle = evaluate(env, buf, ["Origin"], cfg,
                      posterior=KnownDynamics(env.mean_step, 2, 1)).mean("Origin")
    assert oracle < 0
    assert abs(learned - oracle) <= 0.15 * abs(oracle)


def test_step_budget_report():
    r = step_budget_report(20000, n_tasks=2, n_sac=200000, n_k=3)
    assert r["ratio"] == 60 and r["model_free_steps"] == 1200000
    assert step_budget_report(20000, n_tasks=2, n_sac=200000)["ratio"] == 20
    r = step_budget_report(small_cfg(), n_tasks=2, n_sac=0)
    assert r["ratio"] is None and r["ratio_defined"] is False
