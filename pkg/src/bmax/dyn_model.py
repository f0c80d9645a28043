"""Gaussian dynamics network and its MAP training.

The network maps normalized ``(s, a)`` to a normalized mean of ``Δs = s' - s``
and a log-variance per state dimension. Training minimises the Gaussian
negative log-likelihood plus an explicit ``γ²/2 ‖θ‖²`` prior term with Adam.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .buffer import ReplayBuffer
from .gaussian import GaussianPrediction
from .numkit import (MlpParams, NumericError, RngStream, ShapeError, init_mlp,
                     mlp_backward, mlp_forward)

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
STD_FLOOR = 1e-8
VAR_MIN = 1e-6
VAR_MAX = 1e2


@dataclass(frozen=True)
class Normalizer:
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def norm_inputs(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1)
        return (x - self.in_mean) / self.in_std

    def denorm_inputs(self, x: np.ndarray) -> np.ndarray:
        return x * self.in_std + self.in_mean

    def norm_targets(self, ds: np.ndarray) -> np.ndarray:
        return (ds - self.out_mean) / self.out_std

    def denorm_targets(self, y: np.ndarray) -> np.ndarray:
        return y * self.out_std + self.out_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("in_mean", "in_std", "out_mean", "out_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(*(np.asarray(d[k], dtype=np.float64)
                     for k in ("in_mean", "in_std", "out_mean", "out_std")))

    @classmethod
    def identity(cls, state_dim: int, action_dim: int) -> "Normalizer":
        n_in = state_dim + action_dim
        return cls(np.zeros(n_in), np.ones(n_in), np.zeros(state_dim), np.ones(state_dim))


def fit_normalizer(buffer: ReplayBuffer) -> Normalizer:
    if len(buffer) == 0:
        raise ValueError("cannot fit a normalizer on an empty buffer")
    x = np.concatenate([buffer.states, buffer.actions], axis=1)
    ds = buffer.next_states - buffer.states
    return Normalizer(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR),
                      ds.mean(axis=0), np.maximum(ds.std(axis=0), STD_FLOOR))


@dataclass
class TrainConfig:
    """MAP training settings.

    ``gamma2`` is the prior precision. ``max_updates`` optionally caps the
    number of Adam steps regardless of epochs, which keeps retraining cost flat
    while the buffer grows.
    """

    gamma2: float = 1e-4
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64, 64)
    activation: str = "tanh"
    max_updates: int | None = None

    def __post_init__(self):
        if self.gamma2 < 0:
            raise ValueError("gamma2 must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class GaussianMLP:
    params: MlpParams
    normalizer: Normalizer
    state_dim: int
    action_dim: int
    dropout_layer: int | None = None
    dropout_p: float = 0.0
    var_min: float = VAR_MIN
    var_max: float = VAR_MAX
    loss_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        w = self.params.widths
        if w[0] != self.state_dim + self.action_dim or w[-1] != 2 * self.state_dim:
            raise ShapeError(f"network widths {w} do not fit |S|={self.state_dim}, "
                             f"|A|={self.action_dim}")

    def logvar_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Clamp bounds for the normalized log-variance head.

        Chosen so that the variance in state units lies in [var_min, var_max].
        """
        shift = 2.0 * np.log(self.normalizer.out_std)
        return np.log(self.var_min) - shift, np.log(self.var_max) - shift

    def head(self, out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Split raw output into (mean, clamped logvar, unclamped mask)."""
        d = self.state_dim
        lo, hi = self.logvar_bounds()
        raw = out[:, d:]
        lv = np.clip(raw, lo, hi)
        return out[:, :d], lv, (raw > lo) & (raw < hi)

    def forward_norm(self, x: np.ndarray, mask: np.ndarray | None = None):
        cache = mlp_forward(self.params, x, mask, self.dropout_layer if mask is not None else None)
        mu, lv, _ = self.head(cache.out)
        return mu, lv

    def predict_batch(self, S: np.ndarray, A: np.ndarray,
                      mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Means and variances (state units) for rows of ``S``, ``A``."""
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        if S.shape[1] != self.state_dim or A.shape[1] != self.action_dim:
            raise ShapeError(f"state/action widths {S.shape[1]}/{A.shape[1]} vs "
                             f"{self.state_dim}/{self.action_dim}")
        mu, lv = self.forward_norm(self.normalizer.norm_inputs(S, A), mask)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(lv))):
            raise NumericError("non-finite network output")
        mean = S + self.normalizer.denorm_targets(mu)
        var = np.clip(np.exp(lv) * self.normalizer.out_std ** 2, self.var_min, self.var_max)
        # exp(log v) is not exactly v; clamped entries report the bound itself
        lo, hi = self.logvar_bounds()
        var = np.where(lv <= lo, self.var_min, np.where(lv >= hi, self.var_max, var))
        return mean, var

    def predict(self, s: np.ndarray, a: np.ndarray, mask: np.ndarray | None = None
                ) -> GaussianPrediction:
        mean, var = self.predict_batch(np.reshape(s, (1, -1)), np.reshape(a, (1, -1)), mask)
        return GaussianPrediction(mean[0], var[0])

    def with_params(self, params: MlpParams) -> "GaussianMLP":
        return replace(self, params=params, loss_trace=[])

    def dropout_width(self) -> int:
        return self.params.weights[self.dropout_layer].shape[0]

    def sample_masks(self, n: int, rng: RngStream) -> np.ndarray:
        """Inverted-dropout masks: kept units scaled by 1/(1-p)."""
        keep = rng.random((n, self.dropout_width())) >= self.dropout_p
        return keep / (1.0 - self.dropout_p)


def predict(model: GaussianMLP, s, a) -> GaussianPrediction:
    return model.predict(s, a)


def nll_map_loss(model: GaussianMLP, batch: tuple[np.ndarray, np.ndarray, np.ndarray],
                 gamma2: float, mask: np.ndarray | None = None,
                 n_data: int | None = None) -> tuple[float, np.ndarray]:
    """Mean Gaussian NLL over ``batch=(s, a, s')`` in normalized target space
    plus ``gamma2 / (2 n) ‖θ‖²``.

    ``n_data`` defaults to the batch size; pass the dataset size when the batch
    is a minibatch so that ``n · loss`` is the full negative log posterior.
    """
    s, a, sp = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in batch)
    n = s.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    nd = n if n_data is None else n_data
    x = model.normalizer.norm_inputs(s, a)
    y = model.normalizer.norm_targets(sp - s)
    cache = mlp_forward(model.params, x, mask, model.dropout_layer if mask is not None else None)
    mu, lv, free = model.head(cache.out)
    inv_var = np.exp(-lv)
    r = y - mu
    nll = 0.5 * (LOG_2PI + lv + r * r * inv_var)
    theta = model.params.flat()
    loss = float(nll.sum() / n + 0.5 * gamma2 / nd * theta @ theta)
    d_mu = -r * inv_var / n
    d_lv = 0.5 * (1.0 - r * r * inv_var) / n * free
    grad = mlp_backward(model.params, cache, np.concatenate([d_mu, d_lv], axis=1))
    grad += gamma2 / nd * theta
    return loss, grad


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def default_dropout_layer(n_hidden: int) -> int:
    """Index of the middle hidden layer."""
    return n_hidden // 2


def new_model(state_dim: int, action_dim: int, cfg: TrainConfig, rng: RngStream,
              normalizer: Normalizer, dropout_p: float = 0.0) -> GaussianMLP:
    widths = [state_dim + action_dim, *cfg.hidden, 2 * state_dim]
    params = init_mlp(widths, cfg.activation, rng)
    layer = default_dropout_layer(len(cfg.hidden)) if dropout_p > 0 else None
    return GaussianMLP(params, normalizer, state_dim, action_dim, layer, dropout_p)


def train_map(buffer: ReplayBuffer, cfg: TrainConfig,
              init: MlpParams | GaussianMLP | None = None, *, dropout_p: float = 0.0,
              rng: RngStream | None = None) -> GaussianMLP:
    """Minibatch Adam on :func:`nll_map_loss`; returns the fitted model.

    The per-epoch mean loss is stored on ``model.loss_trace``. A
    :class:`GaussianMLP` passed as ``init`` is warm-started (its normalizer is
    refitted on ``buffer``).
    """
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    n = len(buffer)
    if n < cfg.batch_size and cfg.epochs > 0:
        raise ValueError(f"buffer has {n} transitions, fewer than batch size {cfg.batch_size}")
    rng = RngStream(cfg.seed) if rng is None else rng
    init_rng, shuffle_rng, mask_rng = rng.child("init"), rng.child("shuffle"), rng.child("mask")
    norm = fit_normalizer(buffer)
    if isinstance(init, GaussianMLP):
        model = GaussianMLP(init.params.copy(), norm, init.state_dim, init.action_dim,
                            init.dropout_layer, init.dropout_p, init.var_min, init.var_max)
    else:
        model = new_model(buffer.state_dim, buffer.action_dim, cfg, init_rng, norm, dropout_p)
        if init is not None:
            model.params = init.copy()
    S, A, SP = buffer.states, buffer.actions, buffer.next_states
    opt = Adam(cfg.lr)
    theta = model.params.flat()
    updates = 0
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            mask = None
            if model.dropout_p > 0:
                mask = model.sample_masks(len(idx), mask_rng)
            loss, grad = nll_map_loss(model, (S[idx], A[idx], SP[idx]), cfg.gamma2, mask, n)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss in epoch {epoch}")
            theta = opt.step(theta, grad)
            model.params = model.params.with_flat(theta)
            total += loss
            count += 1
            updates += 1
            if cfg.max_updates is not None and updates >= cfg.max_updates:
                break
        model.loss_trace.append(total / max(count, 1))
        if cfg.max_updates is not None and updates >= cfg.max_updates:
            break
    return model
