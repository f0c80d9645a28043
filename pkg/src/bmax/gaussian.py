from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import ShapeError


@dataclass(frozen=True)
class GaussianPrediction:
    """Predicted next-state distribution.

    ``cov`` is either a vector of variances (diagonal) or a full matrix.
    ``aleatoric`` optionally keeps the per-dimension noise variance that was
    folded into a full covariance (the Laplace linearized predictive does this).
    """

    mean: np.ndarray
    cov: np.ndarray
    aleatoric: np.ndarray | None = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = cov.reshape(1)
        d = mean.shape[0]
        if cov.shape not in ((d,), (d, d)):
            raise ShapeError(f"covariance shape {cov.shape} for mean of dimension {d}")
        if cov.ndim == 1 and np.any(~(cov > 0)):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if self.aleatoric is not None:
            object.__setattr__(self, "aleatoric", np.asarray(self.aleatoric, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def full(self) -> bool:
        return self.cov.ndim == 2

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy() if self.full else self.cov

    def cov_matrix(self) -> np.ndarray:
        return self.cov if self.full else np.diag(self.cov)
