import numpy as np
import pytest

from bmax.buffer import ReplayBuffer
from bmax.dyn_model import (VAR_MAX, VAR_MIN, GaussianMLP, Normalizer, TrainConfig,
                            fit_normalizer, nll_map_loss, predict, train_map)
from bmax.numkit import MlpParams, NumericError, RngStream, ShapeError, init_mlp
from conftest import lingauss_buffer


def linear_1d_buffer(n=500, seed=0, lo=-1.0, hi=1.0):
    rng = RngStream(seed)
    s = rng.uniform(lo, hi, (n, 1))
    a = rng.uniform(lo, hi, (n, 1))
    return ReplayBuffer.from_arrays(s, a, 0.9 * s + 0.1 * a)


def zero_model(sdim=1, adim=1, logvar=0.0):
    p = init_mlp([sdim + adim, 4, 2 * sdim], "tanh", RngStream(0))
    p = p.with_flat(np.zeros(p.n_params))
    p.biases[-1][sdim:] = logvar
    return GaussianMLP(p, Normalizer.identity(sdim, adim), sdim, adim)


def test_fit_normalizer_examples():
    b = ReplayBuffer.from_arrays([[0.0], [2.0]], [[1.0], [1.0]], [[0.0], [2.0]])
    n = fit_normalizer(b)
    assert n.in_mean[0] == 1.0 and n.in_std[0] == 1.0
    assert n.in_std[1] == 1e-8 and n.in_mean[1] == 1.0
    same = ReplayBuffer.from_arrays([[3.0, 4.0]] * 4, [[1.0]] * 4, [[3.0, 4.0]] * 4)
    ns = fit_normalizer(same)
    assert np.all(ns.in_std == 1e-8) and np.all(ns.in_mean == [3.0, 4.0, 1.0])
    with pytest.raises(ValueError):
        fit_normalizer(ReplayBuffer(1, 1))


def test_normalizer_statistics_and_roundtrip():
    b = lingauss_buffer(300, seed=3)
    n = fit_normalizer(b)
    x = n.norm_inputs(b.states, b.actions)
    assert np.abs(x.mean(axis=0)).max() < 1e-10
    assert np.abs(x.std(axis=0) - 1).max() < 1e-10
    back = n.denorm_inputs(x)
    assert np.abs(back - np.hstack([b.states, b.actions])).max() < 1e-10
    ds = b.next_states - b.states
    assert np.abs(n.denorm_targets(n.norm_targets(ds)) - ds).max() < 1e-10


def test_predict_delta_and_clamp():
    m = zero_model(logvar=-100.0)
    pred = predict(m, [0.7], [0.3])
    assert pred.mean[0] == 0.7
    assert pred.cov[0] == VAR_MIN
    m_hi = zero_model(logvar=100.0)
    assert predict(m_hi, [0.7], [0.3]).cov[0] == VAR_MAX


def test_predict_errors():
    m = zero_model()
    with pytest.raises(ShapeError):
        m.predict_batch(np.zeros((1, 2)), np.zeros((1, 1)))
    bad = zero_model()
    bad.params.biases[-1][0] = np.nan
    with pytest.raises(NumericError):
        bad.predict_batch(np.zeros((1, 1)), np.zeros((1, 1)))


def test_nll_examples():
    m = zero_model(logvar=0.0)
    loss, _ = nll_map_loss(m, ([[0.0]], [[0.0]], [[0.0]]), 0.0)
    assert loss == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-12)
    rng = RngStream(1)
    m2 = m.with_params(init_mlp([2, 4, 2], "tanh", rng))
    batch = (rng.normal(size=(5, 1)), rng.normal(size=(5, 1)), rng.normal(size=(5, 1)))
    l0, _ = nll_map_loss(m2, batch, 0.0)
    l1, _ = nll_map_loss(m2, batch, 1.0)
    l2, _ = nll_map_loss(m2, batch, 2.0)
    theta = m2.params.flat()
    assert l1 - l0 == pytest.approx(0.5 / 5 * theta @ theta, rel=1e-12)
    assert l2 - l0 == pytest.approx(2 * (l1 - l0), rel=1e-12)
    with pytest.raises(ValueError):
        nll_map_loss(m2, (np.zeros((0, 1)),) * 3, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_nll_gradient_matches_finite_differences(seed):
    rng = RngStream(seed)
    buf = lingauss_buffer(20, seed=seed, noise_std=0.1)
    m = GaussianMLP(init_mlp([3, 6, 6, 4], "tanh", rng), fit_normalizer(buf), 2, 1)
    batch = (buf.states, buf.actions, buf.next_states)
    _, g = nll_map_loss(m, batch, 0.3)
    theta = m.params.flat()
    h = 1e-6
    fd = np.empty_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fd[i] = (nll_map_loss(m.with_params(m.params.with_flat(tp)), batch, 0.3)[0]
                 - nll_map_loss(m.with_params(m.params.with_flat(tm)), batch, 0.3)[0]) / (2 * h)
    assert np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))) < 1e-4


def test_train_map_learns_linear_dynamics():
    buf = linear_1d_buffer(500)
    cfg = TrainConfig(epochs=200, hidden=(32, 32), seed=0)
    m = train_map(buf, cfg)
    rng = RngStream(99)
    s, a = rng.uniform(-0.9, 0.9, (200, 1)), rng.uniform(-0.9, 0.9, (200, 1))
    mean, _ = m.predict_batch(s, a)
    rmse = np.sqrt(np.mean((mean - (0.9 * s + 0.1 * a)) ** 2))
    assert rmse < 1e-2
    assert np.abs(mean - (0.9 * s + 0.1 * a)).max() < 1e-2


def test_train_map_zero_epochs_and_determinism():
    buf = linear_1d_buffer(128)
    init = init_mlp([2, 8, 2], "tanh", RngStream(4))
    m = train_map(buf, TrainConfig(epochs=0, hidden=(8,)), init)
    assert m.params.flat().tobytes() == init.flat().tobytes()
    cfg = TrainConfig(epochs=3, hidden=(8, 8), seed=11)
    a, b = train_map(buf, cfg), train_map(buf, cfg)
    assert a.params.flat().tobytes() == b.params.flat().tobytes()
    assert len(a.loss_trace) == 3


def test_train_map_requires_batch():
    with pytest.raises(ValueError):
        train_map(linear_1d_buffer(10), TrainConfig(batch_size=64))


def test_variances_within_clamp():
    buf = lingauss_buffer(200, noise_std=0.05)
    m = train_map(buf, TrainConfig(epochs=5, hidden=(16,)))
    rng = RngStream(5)
    _, v = m.predict_batch(rng.normal(scale=50, size=(500, 2)), rng.normal(scale=50, size=(500, 1)))
    assert v.min() >= VAR_MIN and v.max() <= VAR_MAX


def test_delta_parameterization_translation_invariance():
    buf = lingauss_buffer(256, seed=2)
    c = np.array([5.0, -3.0])
    moved = ReplayBuffer.from_arrays(buf.states + c, buf.actions, buf.next_states + c)
    cfg = TrainConfig(epochs=20, hidden=(16, 16))
    m1, m2 = train_map(buf, cfg), train_map(moved, cfg)
    q = RngStream(7).uniform(-1, 1, (50, 2))
    qa = RngStream(8).uniform(-1, 1, (50, 1))
    d1 = m1.predict_batch(q, qa)[0] - q
    d2 = m2.predict_batch(q + c, qa)[0] - (q + c)
    assert np.abs(d1 - d2).max() < 1e-6


def test_loss_trace_mostly_non_increasing():
    ok = 0
    for seed in range(20):
        buf = lingauss_buffer(256, seed=seed)
        m = train_map(buf, TrainConfig(epochs=15, hidden=(16, 16), seed=seed))
        ok += bool(np.all(np.diff(m.loss_trace) <= 0))
    assert ok >= 18
