"""Pure numpy versions of the compiled kernels (reference + fallback)."""

import numpy as np
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)


def renyi2_logsum(means: np.ndarray, vars: np.ndarray) -> np.ndarray:
    """log Σ_ij N(μ_i | μ_j, Σ_i + Σ_j) per batch row, diagonal covariances.

    ``means`` and ``vars`` have shape (B, N, D).
    """
    v = vars[:, :, None, :] + vars[:, None, :, :]
    diff = means[:, :, None, :] - means[:, None, :, :]
    logz = -0.5 * (LOG_2PI + np.log(v) + diff * diff / v).sum(axis=-1)
    return logsumexp(logz.reshape(logz.shape[0], -1), axis=1)


def pointmass_step(S, A, noise, dt, drag, vmax, x_lo, x_hi, y_lo, y_hi,
                   w_lo, w_hi, g_lo, g_hi):
    """Velocity-Verlet point mass with linear drag and inelastic wall clamps."""
    x, y, vx, vy = S.T
    k = drag / dt
    acc = A - k * S[:, 2:]
    pos = S[:, :2] + S[:, 2:] * dt + 0.5 * acc * dt * dt
    acc2 = A - k * (S[:, 2:] + acc * dt)
    vel = S[:, 2:] + 0.5 * (acc + acc2) * dt
    pos = pos + noise[:, :2]
    vel = np.clip(vel + noise[:, 2:], -vmax, vmax)
    nx, ny = pos[:, 0].copy(), pos[:, 1].copy()
    nvx, nvy = vel[:, 0].copy(), vel[:, 1].copy()

    for lo, hi, p, v in ((x_lo, x_hi, nx, nvx), (y_lo, y_hi, ny, nvy)):
        hit = (p < lo) | (p > hi)
        np.clip(p, lo, hi, out=p)
        v[hit] = 0.0

    blocked = (nx > w_lo) & (nx < w_hi) & ~((ny >= g_lo) & (ny <= g_hi))
    in_corridor = blocked & (x > w_lo) & (x < w_hi)
    from_side = blocked & ~in_corridor
    ny[in_corridor] = np.where(ny[in_corridor] < g_lo, g_lo, g_hi)
    nvy[in_corridor] = 0.0
    nx[from_side] = np.where(x[from_side] <= w_lo, w_lo, w_hi)
    nvx[from_side] = 0.0
    return np.stack([nx, ny, nvx, nvy], axis=1)
