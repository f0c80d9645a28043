"""Approximate weight posteriors: deep ensemble, MC-dropout and subnetwork Laplace.

Every posterior exposes the same sampling interface. ``draw`` returns ``N``
component handles (an ensemble member, a dropout mask, a Laplace weight draw);
``predict_components`` evaluates all handles on a batch and
``predict_assigned`` evaluates one handle per row, which is what
member-consistent rollouts need.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .buffer import ReplayBuffer
from .dyn_model import GaussianMLP, Normalizer, TrainConfig, train_map
from .gaussian import GaussianPrediction
from .numkit import (MlpParams, RngStream, ShapeError, cholesky_logdet, load_params,
                     mlp_forward, per_sample_grads, save_params)


class Posterior:
    kind = "base"
    n_samples: int

    def draw(self, rng: RngStream) -> list:
        raise NotImplementedError

    def predict_one(self, handle, S, A) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def predict_mean(self, S, A) -> tuple[np.ndarray, np.ndarray]:
        """Single deterministic prediction used by mean-mode rollouts."""
        raise NotImplementedError

    def predict_components(self, handles: Sequence, S, A) -> tuple[np.ndarray, np.ndarray]:
        """Means and variances of shape (B, N, |S|)."""
        outs = [self.predict_one(h, S, A) for h in handles]
        return (np.stack([o[0] for o in outs], axis=1), np.stack([o[1] for o in outs], axis=1))

    def predict_assigned(self, handles: Sequence, assign: np.ndarray, S, A):
        """Row ``i`` is predicted by ``handles[assign[i]]``."""
        S = np.atleast_2d(S)
        mean = np.empty_like(S, dtype=np.float64)
        var = np.empty_like(mean)
        for j in np.unique(assign):
            rows = assign == j
            mean[rows], var[rows] = self.predict_one(handles[j], S[rows], np.atleast_2d(A)[rows])
        return mean, var

    @property
    def state_dim(self) -> int:
        raise NotImplementedError

    @property
    def action_dim(self) -> int:
        raise NotImplementedError


@dataclass
class Ensemble(Posterior):
    members: list[GaussianMLP]
    kind = "ensemble"

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")

    @property
    def n_samples(self) -> int:
        return len(self.members)

    @property
    def state_dim(self):
        return self.members[0].state_dim

    @property
    def action_dim(self):
        return self.members[0].action_dim

    def draw(self, rng):
        return list(range(len(self.members)))

    def predict_one(self, handle, S, A):
        return self.members[handle].predict_batch(S, A)

    def predict_mean(self, S, A):
        means, vars_ = self.predict_components(self.draw(None), S, A)
        mu = means.mean(axis=1)
        return mu, vars_.mean(axis=1) + means.var(axis=1)


@dataclass
class MCDropout(Posterior):
    model: GaussianMLP
    p: float
    n_samples: int = 8
    kind = "mc_dropout"

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")

    @property
    def state_dim(self):
        return self.model.state_dim

    @property
    def action_dim(self):
        return self.model.action_dim

    def draw(self, rng):
        if self.p == 0:
            return [None] * self.n_samples
        return list(self.model.sample_masks(self.n_samples, rng))

    def predict_one(self, handle, S, A):
        return self.model.predict_batch(S, A, handle)

    def predict_components(self, handles, S, A):
        S, A = np.atleast_2d(S), np.atleast_2d(A)
        B, N = S.shape[0], len(handles)
        if handles[0] is None:
            m, v = self.model.predict_batch(S, A)
            return np.repeat(m[:, None], N, axis=1), np.repeat(v[:, None], N, axis=1)
        masks = np.tile(np.stack(handles), (B, 1))
        m, v = self.model.predict_batch(np.repeat(S, N, axis=0), np.repeat(A, N, axis=0), masks)
        d = S.shape[1]
        return m.reshape(B, N, d), v.reshape(B, N, d)

    def predict_assigned(self, handles, assign, S, A):
        if handles[0] is None:
            return self.model.predict_batch(S, A)
        return self.model.predict_batch(S, A, np.stack(handles)[assign])

    def predict_mean(self, S, A):
        return self.model.predict_batch(S, A)


@dataclass
class LaplaceSub(Posterior):
    """Gaussian posterior ``N(θ_MAP, H⁻¹)`` over a weight subset.

    ``chol`` is the lower Cholesky factor of ``H`` (normalized output space).
    Weights outside ``indices`` stay at their MAP value.
    """

    model: GaussianMLP
    indices: np.ndarray
    chol: np.ndarray
    gamma2: float
    n_samples: int = 8
    kind = "laplace"
    _theta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if np.any(np.diff(self.indices) <= 0):
            raise ValueError("subnetwork indices must be unique and sorted")
        if self.chol.shape != (self.indices.size,) * 2:
            raise ShapeError("Cholesky factor does not match the subnetwork size")
        self._theta = self.model.params.flat()

    @property
    def state_dim(self):
        return self.model.state_dim

    @property
    def action_dim(self):
        return self.model.action_dim

    @property
    def precision(self) -> np.ndarray:
        return self.chol @ self.chol.T

    def sample_weights(self, n: int, rng: RngStream) -> np.ndarray:
        z = rng.standard_normal((self.indices.size, n))
        # L^T x = z gives x ~ N(0, H^-1)
        return sla.solve_triangular(self.chol, z, lower=True, trans="T").T

    def draw(self, rng):
        out = []
        for eps in self.sample_weights(self.n_samples, rng):
            theta = self._theta.copy()
            theta[self.indices] += eps
            out.append(self.model.params.with_flat(theta))
        return out

    def predict_one(self, handle, S, A):
        return self.model.with_params(handle).predict_batch(S, A)

    def predict_mean(self, S, A):
        return self.model.predict_batch(S, A)

    def jacobian(self, S, A) -> tuple[np.ndarray, np.ndarray]:
        """Mean-head Jacobian in normalized output space, shape (B, |S|, k),
        and the normalized aleatoric variance (B, |S|)."""
        return _mean_jacobian(self.model, self.indices, S, A)

    def epistemic_cov(self, S, A) -> np.ndarray:
        """``J H⁻¹ Jᵀ`` in state units, shape (B, |S|, |S|)."""
        J, _ = self.jacobian(S, A)
        B, d, k = J.shape
        W = sla.solve_triangular(self.chol, J.reshape(B * d, k).T, lower=True)
        W = W.T.reshape(B, d, k)
        cov = W @ W.transpose(0, 2, 1)
        sd = self.model.normalizer.out_std
        return cov * sd[None, :, None] * sd[None, None, :]


@dataclass
class KnownDynamics(Posterior):
    """Deterministic dynamics injected as a one-component posterior.

    Used as an oracle: plans against the true environment model.
    """

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    sdim: int
    adim: int
    variance: float = 1e-6
    n_samples: int = 1
    kind = "known"

    @property
    def state_dim(self):
        return self.sdim

    @property
    def action_dim(self):
        return self.adim

    def draw(self, rng):
        return [None] * self.n_samples

    def predict_one(self, handle, S, A):
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        m = np.asarray(self.fn(S, np.atleast_2d(A)), dtype=np.float64)
        return m, np.full_like(m, self.variance)

    def predict_mean(self, S, A):
        return self.predict_one(None, S, A)


# ---------------------------------------------------------------------------
# fitting


def fit_ensemble(buffer: ReplayBuffer, n: int, cfg: TrainConfig) -> Ensemble:
    """``n`` members from independent initializations and shuffles.

    Member 0 uses the stream of a plain ``train_map(buffer, cfg)`` call, so a
    one-member ensemble equals the single MAP model.
    """
    if n < 1:
        raise ValueError("ensemble size must be >= 1")
    base = RngStream(cfg.seed)
    members = []
    for i in range(n):
        rng = base if i == 0 else base.child("member", i)
        try:
            members.append(train_map(buffer, cfg, rng=rng))
        except Exception as exc:
            raise type(exc)(f"ensemble member {i}: {exc}") from exc
    return Ensemble(members)


def fit_mc_dropout(buffer: ReplayBuffer, p: float, n: int, cfg: TrainConfig,
                   init: GaussianMLP | None = None) -> MCDropout:
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    model = train_map(buffer, cfg, init, dropout_p=p)
    return MCDropout(model, p, n)


def select_subnetwork(model: GaussianMLP | MlpParams | np.ndarray, n_sub: int) -> np.ndarray:
    """Flat indices of the ``n_sub`` largest-magnitude weights (ties: lower index)."""
    if isinstance(model, GaussianMLP):
        theta = model.params.flat()
    elif isinstance(model, MlpParams):
        theta = model.flat()
    else:
        theta = np.asarray(model, dtype=np.float64)
    if not 1 <= n_sub <= theta.size:
        raise ValueError(f"n_sub={n_sub} outside [1, {theta.size}]")
    order = np.argsort(-np.abs(theta), kind="stable")
    return np.sort(order[:n_sub])


def _mean_jacobian(model: GaussianMLP, indices: np.ndarray, S, A, mask=None):
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    x = model.normalizer.norm_inputs(S, A)
    cache = mlp_forward(model.params, x, mask, model.dropout_layer if mask is not None else None)
    _, lv, _ = model.head(cache.out)
    B, d = S.shape[0], model.state_dim
    J = np.empty((B, d, indices.size))
    up = np.zeros_like(cache.out)
    for k in range(d):
        up[:] = 0.0
        up[:, k] = 1.0
        J[:, k, :] = per_sample_grads(model.params, cache, up, indices)
    return J, np.exp(lv)


def ggn_precision(model: GaussianMLP, indices: np.ndarray, S, A, gamma2: float,
                  chunk: int = 512) -> np.ndarray:
    """``Σ_n J_nᵀ diag(σ²_n)⁻¹ J_n + γ² I`` over the subnetwork."""
    H = gamma2 * np.eye(indices.size)
    for start in range(0, len(S), chunk):
        J, var = _mean_jacobian(model, indices, S[start:start + chunk], A[start:start + chunk])
        for k in range(model.state_dim):
            G = J[:, k, :]
            H += G.T @ (G / var[:, k:k + 1])
    return 0.5 * (H + H.T)


def fit_laplace(model: GaussianMLP, buffer: ReplayBuffer, n_sub: int, gamma2: float,
                n_samples: int = 8, indices: np.ndarray | None = None) -> LaplaceSub:
    """Subnetwork Laplace with generalized Gauss-Newton curvature at ``model``."""
    idx = select_subnetwork(model, n_sub) if indices is None else np.sort(np.asarray(indices))
    H = ggn_precision(model, idx, buffer.states, buffer.actions, gamma2)
    L, _ = cholesky_logdet(H)
    return LaplaceSub(model, idx, L, gamma2, n_samples)


def laplace_predictive_linearized(lap: LaplaceSub, s, a) -> GaussianPrediction:
    mean, var = lap.model.predict_batch(np.reshape(s, (1, -1)), np.reshape(a, (1, -1)))
    epi = lap.epistemic_cov(np.reshape(s, (1, -1)), np.reshape(a, (1, -1)))[0]
    cov = 0.5 * (epi + epi.T) + np.diag(var[0])
    return GaussianPrediction(mean[0], cov, aleatoric=var[0])


def posterior_samples(post: Posterior, s, a, rng: RngStream) -> list[GaussianPrediction]:
    means, vars_ = post.predict_components(post.draw(rng), np.reshape(s, (1, -1)),
                                           np.reshape(a, (1, -1)))
    return [GaussianPrediction(m, v) for m, v in zip(means[0], vars_[0])]


# ---------------------------------------------------------------------------
# checkpoints: one member file per network plus a JSON sidecar


def _model_header(m: GaussianMLP) -> dict:
    return {"normalizer": m.normalizer.to_dict(), "state_dim": m.state_dim,
            "action_dim": m.action_dim, "dropout_layer": m.dropout_layer,
            "dropout_p": m.dropout_p, "var_min": m.var_min, "var_max": m.var_max}


def save_model(path: str | Path, m: GaussianMLP) -> None:
    save_params(path, m.params, _model_header(m))


def load_model(path: str | Path) -> GaussianMLP:
    params, h = load_params(path)
    return GaussianMLP(params, Normalizer.from_dict(h["normalizer"]), h["state_dim"],
                       h["action_dim"], h["dropout_layer"], h["dropout_p"], h["var_min"],
                       h["var_max"])


def save_posterior(post: Posterior, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    side: dict = {"kind": post.kind, "N": post.n_samples}
    if isinstance(post, Ensemble):
        for i, m in enumerate(post.members):
            save_model(d / f"member_{i}.bin", m)
    elif isinstance(post, MCDropout):
        save_model(d / "member_0.bin", post.model)
        side["p"] = post.p
    elif isinstance(post, LaplaceSub):
        save_model(d / "member_0.bin", post.model)
        side.update(gamma2=post.gamma2, indices=post.indices.tolist(),
                    chol=post.chol.ravel().tolist())
    else:
        raise TypeError(f"cannot checkpoint posterior of kind {post.kind!r}")
    (d / "posterior.json").write_text(json.dumps(side, sort_keys=True))


def load_posterior(directory: str | Path) -> Posterior:
    d = Path(directory)
    side = json.loads((d / "posterior.json").read_text())
    if side["kind"] == "ensemble":
        return Ensemble([load_model(d / f"member_{i}.bin") for i in range(side["N"])])
    model = load_model(d / "member_0.bin")
    if side["kind"] == "mc_dropout":
        return MCDropout(model, side["p"], side["N"])
    k = len(side["indices"])
    return LaplaceSub(model, np.array(side["indices"]), np.array(side["chol"]).reshape(k, k),
                      side["gamma2"], side["N"])


# ---------------------------------------------------------------------------
# backend selection


BACKENDS = ("ensemble", "mc_dropout", "laplace")


@dataclass
class BackendConfig:
    kind: str = "ensemble"
    n_samples: int = 8
    p: float = 0.25
    n_sub: int = 200
    gamma2: float = 1.0

    def __post_init__(self):
        self.kind = {"mcdropout": "mc_dropout", "laplacesub": "laplace"}.get(
            self.kind.lower().replace("-", "_"), self.kind.lower().replace("-", "_"))
        if self.kind not in BACKENDS:
            raise ValueError(f"kind must be one of {BACKENDS}, got {self.kind!r}")
        if self.n_samples < 1:
            raise ValueError("N must be >= 1")
        if not 0.0 <= self.p < 1.0:
            raise ValueError("p must lie in [0, 1)")
        if self.n_sub < 1:
            raise ValueError("n_sub must be >= 1")
        if self.gamma2 < 0:
            raise ValueError("gamma2 must be >= 0")


def fit_backend(buffer: ReplayBuffer, backend: BackendConfig, train: TrainConfig,
                prev: Posterior | None = None) -> Posterior:
    """Fit the configured posterior; ``train.gamma2`` is replaced by ``backend.gamma2``.

    MC-dropout and Laplace warm-start from ``prev`` when it is of the same
    kind; ensembles always retrain from fresh initializations. The batch size
    is capped at the buffer length so early cycles on small buffers still train.
    """
    cfg = replace(train, gamma2=backend.gamma2,
                  batch_size=max(1, min(train.batch_size, len(buffer))))
    if backend.kind == "ensemble":
        return fit_ensemble(buffer, backend.n_samples, cfg)
    init = prev.model if isinstance(prev, (MCDropout, LaplaceSub)) and prev.kind == backend.kind \
        else None
    if backend.kind == "mc_dropout":
        return fit_mc_dropout(buffer, backend.p, backend.n_samples, cfg, init)
    model = train_map(buffer, cfg, init)
    n_sub = min(backend.n_sub, model.params.n_params)
    return fit_laplace(model, buffer, n_sub, backend.gamma2, backend.n_samples)
