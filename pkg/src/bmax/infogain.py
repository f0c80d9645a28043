"""Entropies, divergences and the exploration utilities built on them.

Utilities are defined up to an additive constant and are oriented so that
larger means more epistemic uncertainty (more worth exploring).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from . import kernels
from .gaussian import GaussianPrediction
from .numkit import RngStream, ShapeError, cholesky_logdet
from .posterior import LaplaceSub, Posterior, _mean_jacobian

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_4PI = float(np.log(4.0 * np.pi))
UTILITY_KINDS = ("jensen_renyi2", "entropy_samples", "entropy_laplace")
_KIND_ALIASES = {
    "jensenrenyi2": "jensen_renyi2", "jr": "jensen_renyi2",
    "entropysamples": "entropy_samples", "entropylaplace": "entropy_laplace",
}


@dataclass(frozen=True)
class UtilitySpec:
    kind: str = "jensen_renyi2"
    epsilon: float = 1e-6
    homoscedastic: bool = True

    def __post_init__(self):
        kind = _KIND_ALIASES.get(self.kind.lower().replace("-", "").replace("_", ""),
                                 self.kind.lower())
        if kind not in UTILITY_KINDS:
            raise ValueError(f"unknown utility kind {self.kind!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        object.__setattr__(self, "kind", kind)


# ---------------------------------------------------------------------------
# single Gaussians


def _logdet_psd(C: np.ndarray) -> float:
    C = 0.5 * (C + C.T)
    w = np.linalg.eigvalsh(C)
    if w.min() < -1e-10 * max(1.0, abs(w.max())):
        raise ValueError("covariance is not positive semi-definite")
    return cholesky_logdet(C)[1]


def gaussian_entropy(pred: GaussianPrediction) -> float:
    d = pred.dim
    if pred.full:
        return 0.5 * (d * (LOG_2PI + 1.0) + _logdet_psd(pred.cov))
    return 0.5 * float(np.sum(LOG_2PI + 1.0 + np.log(pred.cov)))


def gaussian_kl(p: GaussianPrediction, q: GaussianPrediction) -> float:
    """KL(p ‖ q) in nats."""
    if p.dim != q.dim:
        raise ShapeError(f"dimension mismatch {p.dim} vs {q.dim}")
    diff = q.mean - p.mean
    if not p.full and not q.full:
        r = p.cov / q.cov
        return 0.5 * float(np.sum(r - 1.0 - np.log(r) + diff * diff / q.cov))
    Sp, Sq = p.cov_matrix(), q.cov_matrix()
    Lq, ldq = cholesky_logdet(0.5 * (Sq + Sq.T))
    ldp = _logdet_psd(Sp)
    A = sla.cho_solve((Lq, True), np.column_stack([Sp, diff]))
    kl = 0.5 * (np.trace(A[:, :-1]) + diff @ A[:, -1] - p.dim + ldq - ldp)
    return max(float(kl), 0.0)


# ---------------------------------------------------------------------------
# mixtures (batched over leading axis: means/vars of shape (B, N, D))


def renyi2_mixture_entropy_batch(means: np.ndarray, vars: np.ndarray) -> np.ndarray:
    N = means.shape[1]
    return 2.0 * np.log(N) - kernels.renyi2_logsum(means, vars)


def renyi2_component_entropy(vars: np.ndarray) -> np.ndarray:
    """½ log((4π)^d det Σ) for diagonal ``vars`` (..., D)."""
    return 0.5 * (vars.shape[-1] * LOG_4PI + np.log(vars).sum(axis=-1))


def utility_jr_batch(means: np.ndarray, vars: np.ndarray) -> np.ndarray:
    h_mix = renyi2_mixture_entropy_batch(means, vars)
    return h_mix - renyi2_component_entropy(vars).mean(axis=1)


def utility_entropy_samples_batch(means: np.ndarray, eps: float) -> np.ndarray:
    mu = means.mean(axis=1, keepdims=True)
    c = means - mu
    S = np.einsum("bni,bnj->bij", c, c) / means.shape[1]
    S += eps * np.eye(means.shape[2])
    sign, ld = np.linalg.slogdet(S)
    return ld


def _stack(components: Sequence[GaussianPrediction]) -> tuple[np.ndarray, np.ndarray]:
    if len(components) == 0:
        raise ValueError("need at least one component")
    if any(c.full for c in components):
        raise ValueError("mixture components must have diagonal covariance")
    means = np.stack([c.mean for c in components])[None]
    vars_ = np.stack([c.cov for c in components])[None]
    return means, vars_


def renyi2_mixture_entropy(components: Sequence[GaussianPrediction]) -> float:
    """Rényi-2 entropy of the equal-weight mixture, −log ∫ p²."""
    return float(renyi2_mixture_entropy_batch(*_stack(components))[0])


def utility_jr(components: Sequence[GaussianPrediction]) -> float:
    """Jensen-Rényi divergence: mixture Rényi-2 entropy minus mean component Rényi-2."""
    return float(utility_jr_batch(*_stack(components))[0])


def moment_match(components: Sequence[GaussianPrediction]) -> GaussianPrediction:
    means, vars_ = _stack(components)
    means, vars_ = means[0], vars_[0]
    mu = means.mean(axis=0)
    second = np.mean([np.diag(v) + np.outer(m, m) for m, v in zip(means, vars_)], axis=0)
    cov = second - np.outer(mu, mu)
    return GaussianPrediction(mu, 0.5 * (cov + cov.T))


def utility_entropy_samples(components: Sequence[GaussianPrediction], eps: float = 1e-6) -> float:
    """log det of the mean-scatter matrix (+ εI) of the component means."""
    if len(components) < 2:
        raise ValueError("entropy of samples needs at least two components")
    means, _ = _stack(components)
    return float(utility_entropy_samples_batch(means, eps)[0])


def utility_entropy_laplace(pred: GaussianPrediction, homoscedastic: bool = True,
                            eps: float = 1e-6) -> float:
    """log det of the epistemic (or full, if not homoscedastic) covariance + εI."""
    if not pred.full:
        raise ValueError("Laplace entropy needs a full covariance prediction")
    C = pred.cov
    if homoscedastic and pred.aleatoric is not None:
        C = C - np.diag(pred.aleatoric)
    C = 0.5 * (C + C.T)
    w = np.linalg.eigvalsh(C)
    if w.min() < -1e-10 * max(1.0, abs(w.max())):
        raise ValueError("epistemic covariance is not positive semi-definite")
    return float(np.linalg.slogdet(C + eps * np.eye(pred.dim))[1])


def utility_entropy_laplace_batch(lap: LaplaceSub, S, A, homoscedastic: bool,
                                  eps: float) -> np.ndarray:
    C = lap.epistemic_cov(S, A)
    if not homoscedastic:
        _, var = lap.model.predict_batch(S, A)
        C = C + var[:, :, None] * np.eye(C.shape[1])
    return np.linalg.slogdet(C + eps * np.eye(C.shape[1]))[1]


def laplace_information_gain(lap: LaplaceSub, z: tuple) -> float:
    """KL between the subnetwork posterior after and before adding ``z=(s, a, s')``.

    The mean is held at θ_MAP, so only the curvature update
    ``H + Jᵀ Λ⁻¹ J`` matters and ``s'`` does not enter.
    """
    s, a = z[0], z[1]
    J, var = _mean_jacobian(lap.model, lap.indices, np.reshape(s, (1, -1)),
                            np.reshape(a, (1, -1)))
    return information_gain_from_factor(lap.chol, J[0], var[0])


def information_gain_from_factor(L: np.ndarray, J: np.ndarray, var: np.ndarray) -> float:
    """KL(N(0,(H + Jᵀdiag(var)⁻¹J)⁻¹) ‖ N(0,H⁻¹)) with ``H = L Lᵀ``; ``J`` is (d, k)."""
    M = sla.solve_triangular(L, (J / np.sqrt(var)[:, None]).T, lower=True)  # (k, d)
    lam = np.clip(np.linalg.eigvalsh(M.T @ M), 0.0, None)
    return float(0.5 * np.sum(1.0 / (1.0 + lam) - 1.0 + np.log1p(lam)))


# ---------------------------------------------------------------------------
# dispatch


UtilityFn = Callable[[Posterior, np.ndarray, np.ndarray, list], np.ndarray]


def utility_batch(post: Posterior, S: np.ndarray, A: np.ndarray,
                  spec: "UtilitySpec | UtilityFn", handles: list | None = None,
                  rng: RngStream | None = None) -> np.ndarray:
    """Utility for each row of ``(S, A)``.

    Sample-based kinds evaluate all ``handles`` (drawn from ``rng`` when not
    given); the Laplace kind uses the linearized predictive. ``spec`` may also
    be a plain callable with the same arguments, which is how tests inject
    stub utilities.
    """
    S = np.atleast_2d(S)
    A = np.atleast_2d(A)
    if callable(spec) and not isinstance(spec, UtilitySpec):
        return np.asarray(spec(post, S, A, handles), dtype=np.float64)
    if spec.kind == "entropy_laplace":
        if not isinstance(post, LaplaceSub):
            raise TypeError("entropy_laplace utility requires a Laplace posterior")
        return utility_entropy_laplace_batch(post, S, A, spec.homoscedastic, spec.epsilon)
    if handles is None:
        handles = post.draw(rng if rng is not None else RngStream(0))
    if spec.kind == "entropy_samples" and len(handles) < 2:
        raise ValueError("entropy of samples needs at least two components")
    means, vars_ = post.predict_components(handles, S, A)
    if spec.kind == "jensen_renyi2":
        return utility_jr_batch(means, vars_)
    return utility_entropy_samples_batch(means, spec.epsilon)


def action_utility(post: Posterior, s, a, spec: "UtilitySpec | UtilityFn",
                   rng: RngStream) -> float:
    return float(utility_batch(post, np.reshape(s, (1, -1)), np.reshape(a, (1, -1)), spec,
                               rng=rng)[0])


def policy_utility_mc(post: Posterior, policy: Callable, s0, horizon: int, n_rollouts: int,
                      spec: "UtilitySpec | UtilityFn", rng: RngStream,
                      mode: str = "member") -> float:
    """Monte-Carlo estimate of the expected per-step utility along policy rollouts.

    ``policy(s, rng) -> a``. Each rollout fixes one sampled model
    (member-consistent) unless ``mode`` says otherwise.
    """
    from .planner import rollout_model

    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if horizon == 0 or n_rollouts == 0:
        return 0.0
    vals = []
    for r in range(n_rollouts):
        traj = rollout_model(post, s0, policy, horizon, mode, rng.child("rollout", r), score=spec)
        vals.append(np.mean(traj.values))
    return float(np.mean(vals))
