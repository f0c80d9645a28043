# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see ``_pykernels`` for the reference semantics."""

import numpy as np
from libc.math cimport log, exp, M_PI


def renyi2_logsum(const double[:, :, ::1] means, const double[:, :, ::1] vars):
    """log Σ_ij N(μ_i | μ_j, Σ_i + Σ_j) per batch row, diagonal covariances."""
    cdef Py_ssize_t B = means.shape[0], N = means.shape[1], D = means.shape[2]
    cdef Py_ssize_t b, i, j, d
    cdef double acc, v, diff, m, s
    out = np.empty(B)
    tmp = np.empty(N * N)
    cdef double[::1] o = out
    cdef double[::1] t = tmp
    cdef double log2pi = log(2.0 * M_PI)
    for b in range(B):
        m = -1e308
        for i in range(N):
            for j in range(i, N):
                acc = 0.0
                for d in range(D):
                    v = vars[b, i, d] + vars[b, j, d]
                    diff = means[b, i, d] - means[b, j, d]
                    acc += log2pi + log(v) + diff * diff / v
                acc = -0.5 * acc
                t[i * N + j] = acc
                if acc > m:
                    m = acc
        s = 0.0
        for i in range(N):
            s += exp(t[i * N + i] - m)
            for j in range(i + 1, N):
                s += 2.0 * exp(t[i * N + j] - m)
        o[b] = m + log(s)
    return out


def pointmass_step(const double[:, ::1] S, const double[:, ::1] A,
                   const double[:, ::1] noise, double dt, double drag, double vmax,
                   double x_lo, double x_hi, double y_lo, double y_hi,
                   double w_lo, double w_hi, double g_lo, double g_hi):
    cdef Py_ssize_t B = S.shape[0], b
    cdef double x, y, vx, vy, ux, uy, k, ax, ay, ax2, ay2, nx, ny, nvx, nvy
    out = np.empty((B, 4))
    cdef double[:, ::1] o = out
    k = drag / dt
    for b in range(B):
        x = S[b, 0]; y = S[b, 1]; vx = S[b, 2]; vy = S[b, 3]
        ux = A[b, 0]; uy = A[b, 1]
        ax = ux - k * vx
        ay = uy - k * vy
        nx = x + vx * dt + 0.5 * ax * dt * dt
        ny = y + vy * dt + 0.5 * ay * dt * dt
        ax2 = ux - k * (vx + ax * dt)
        ay2 = uy - k * (vy + ay * dt)
        nvx = vx + 0.5 * (ax + ax2) * dt
        nvy = vy + 0.5 * (ay + ay2) * dt
        nx = nx + noise[b, 0]
        ny = ny + noise[b, 1]
        nvx = nvx + noise[b, 2]
        nvy = nvy + noise[b, 3]
        if nvx > vmax: nvx = vmax
        elif nvx < -vmax: nvx = -vmax
        if nvy > vmax: nvy = vmax
        elif nvy < -vmax: nvy = -vmax
        if nx < x_lo:
            nx = x_lo; nvx = 0.0
        elif nx > x_hi:
            nx = x_hi; nvx = 0.0
        if ny < y_lo:
            ny = y_lo; nvy = 0.0
        elif ny > y_hi:
            ny = y_hi; nvy = 0.0
        if w_lo < nx < w_hi and not (g_lo <= ny <= g_hi):
            if w_lo < x < w_hi:
                if ny < g_lo:
                    ny = g_lo
                else:
                    ny = g_hi
                nvy = 0.0
            else:
                if x <= w_lo:
                    nx = w_lo
                else:
                    nx = w_hi
                nvx = 0.0
        o[b, 0] = nx; o[b, 1] = ny; o[b, 2] = nvx; o[b, 3] = nvy
    return out
