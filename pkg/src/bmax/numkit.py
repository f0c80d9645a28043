"""Dense linear algebra, small-MLP forward/backward passes and seeded randomness.

All arrays are float64. MLP parameters live in a single flat index space
(layer by layer, weights row-major then bias) so that subnetwork selection
and checkpoints can address individual weights.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla

log = logging.getLogger(__name__)

MAX_JITTER = 1e-3
FIRST_JITTER = 1e-12
ACTIVATIONS = ("tanh", "relu", "linear")


class ShapeError(ValueError):
    pass


class SingularError(np.linalg.LinAlgError):
    pass


class NumericError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# randomness


class RngStream:
    """Counter-based (Philox) generator keyed by ``(seed, stream)``.

    Identical ``(seed, stream)`` pairs yield identical draws on every platform.
    ``child`` derives an independent sub-stream; string keys are hashed with
    CRC32 so that stream ids are stable across interpreter runs.
    """

    def __init__(self, seed: int, stream: Sequence[int | str] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = tuple(_stream_key(k) for k in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int | str) -> "RngStream":
        return RngStream(self.seed, self.stream + tuple(_stream_key(k) for k in keys))

    def __getattr__(self, name):
        # delegate normal/uniform/integers/permutation/... to the generator
        return getattr(self.gen, name)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"


def _stream_key(k: int | str) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    if k < 0:
        raise ValueError("stream ids must be non-negative")
    return int(k)


def as_rng(rng: "RngStream | int | None", default_seed: int = 0) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(default_seed)
    return RngStream(int(rng))


# ---------------------------------------------------------------------------
# linear algebra


def _check_square_symmetric(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if A.size and np.max(np.abs(A - A.T)) > 1e-9 * scale:
        raise ShapeError("matrix is not symmetric within 1e-9")
    return A


def cholesky_logdet(A: np.ndarray, jitter: float = 0.0) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A`` and ``log det A``.

    On factorization failure a diagonal jitter is added and escalated by x10
    until ``MAX_JITTER``; beyond that :class:`SingularError` is raised.
    """
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    A = _check_square_symmetric(A)
    n = A.shape[0]
    jit = float(jitter)
    eye = np.eye(n)
    while True:
        try:
            L = np.linalg.cholesky(A + jit * eye if jit else A)
            if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0):
                break
        except np.linalg.LinAlgError:
            pass
        jit = FIRST_JITTER if jit == 0.0 else jit * 10.0
        if jit > MAX_JITTER * (1 + 1e-12):
            raise SingularError("factorization failed after maximum jitter 1e-3")
    if jit:
        log.debug("cholesky needed jitter %.1e", jit)
    return L, float(2.0 * np.sum(np.log(np.diag(L))))


def solve_psd(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    L, _ = cholesky_logdet(A)
    B = np.asarray(B, dtype=np.float64)
    if B.shape[0] != L.shape[0]:
        raise ShapeError(f"rhs has {B.shape[0]} rows, matrix is {L.shape[0]}x{L.shape[0]}")
    return sla.cho_solve((L, True), B)


def chol_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``(L Lᵀ) X = B`` given a lower factor."""
    return sla.cho_solve((L, True), B)


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpParams:
    """Per-layer weights ``W[l]`` of shape (out, in) and biases ``b[l]``.

    ``activations[l]`` is applied after layer ``l``; the last one is normally
    ``"linear"``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {l}: weight {W.shape} / bias {b.shape} mismatch")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeError(f"layer {l} input width does not chain")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def offsets(self) -> list[tuple[int, int]]:
        """Flat start offset of (weights, bias) for every layer."""
        out, o = [], 0
        for W, b in zip(self.weights, self.biases):
            out.append((o, o + W.size))
            o += W.size + b.size
        return out

    def flat(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, theta: np.ndarray) -> "MlpParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {theta.shape}")
        Ws, bs, o = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(theta[o:o + W.size].reshape(W.shape).copy())
            o += W.size
            bs.append(theta[o:o + b.size].copy())
            o += b.size
        return MlpParams(Ws, bs, self.activations)

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.activations)


def init_mlp(widths: Sequence[int], activation: str, rng: RngStream) -> MlpParams:
    """Glorot-uniform weights, zero biases; hidden layers use ``activation``."""
    Ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        Ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    acts = (activation,) * (len(widths) - 2) + ("linear",)
    return MlpParams(Ws, bs, acts)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer (after mask, if any)
    pre: list[np.ndarray]
    post: list[np.ndarray]
    mask: np.ndarray | None = None
    mask_layer: int | None = None
    out: np.ndarray = field(default=None)


def _check_mask(params: MlpParams, mask, mask_layer, n):
    if mask is None:
        return None
    if mask_layer is None or not 0 <= mask_layer < len(params.weights) - 1:
        raise ShapeError("dropout mask given without a valid hidden layer index")
    width = params.weights[mask_layer].shape[0]
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape not in ((width,), (n, width)):
        raise ShapeError(f"mask shape {mask.shape} does not match layer width {width}")
    return mask


def mlp_forward(params: MlpParams, X: np.ndarray, mask: np.ndarray | None = None,
                mask_layer: int | None = None) -> ForwardCache:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.widths[0]:
        raise ShapeError(f"input of shape {X.shape}, network expects width {params.widths[0]}")
    mask = _check_mask(params, mask, mask_layer, X.shape[0])
    cache = ForwardCache([], [], [], mask, mask_layer)
    h = X
    for l, (W, b, a) in enumerate(zip(params.weights, params.biases, params.activations)):
        cache.inputs.append(h)
        z = h @ W.T + b
        h = _act(a, z)
        cache.pre.append(z)
        cache.post.append(h)
        if mask is not None and l == mask_layer:
            h = h * mask
    cache.out = h
    return cache


def mlp_apply(params: MlpParams, X: np.ndarray, dropout_mask: np.ndarray | None = None,
              dropout_layer: int | None = None) -> np.ndarray:
    """Forward pass; ``dropout_mask`` multiplies the post-activation of hidden
    layer ``dropout_layer`` (shape ``(width,)`` or ``(n, width)``)."""
    return mlp_forward(params, X, dropout_mask, dropout_layer).out


def _backprop(params: MlpParams, cache: ForwardCache, upstream: np.ndarray):
    """Yield ``(layer, delta, layer_input)`` from the output layer backwards.

    ``delta`` is d(Σ upstream·out)/d(pre-activation) for each batch row.
    """
    g = upstream
    for l in range(len(params.weights) - 1, -1, -1):
        if cache.mask is not None and l == cache.mask_layer:
            g = g * cache.mask
        delta = g * _act_grad(params.activations[l], cache.pre[l], cache.post[l])
        yield l, delta, cache.inputs[l]
        g = delta @ params.weights[l]


def mlp_backward(params: MlpParams, cache: ForwardCache, upstream: np.ndarray) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.out.shape:
        raise ShapeError(f"upstream {upstream.shape} vs output {cache.out.shape}")
    grads = [None] * (2 * len(params.weights))
    for l, delta, inp in _backprop(params, cache, upstream):
        grads[2 * l] = (delta.T @ inp).ravel()
        grads[2 * l + 1] = delta.sum(axis=0)
    return np.concatenate(grads)


def mlp_grads(params: MlpParams, X: np.ndarray, upstream: np.ndarray,
              dropout_mask: np.ndarray | None = None,
              dropout_layer: int | None = None) -> np.ndarray:
    """Gradient of ``Σ upstream ⊙ mlp_apply(params, X)`` w.r.t. the flat parameters."""
    cache = mlp_forward(params, X, dropout_mask, dropout_layer)
    return mlp_backward(params, cache, upstream)


def per_sample_grads(params: MlpParams, cache: ForwardCache, upstream: np.ndarray,
                     indices: np.ndarray) -> np.ndarray:
    """Per-row gradients restricted to flat ``indices``: shape (n, len(indices)).

    Row ``i`` is the gradient of ``upstream[i] · out[i]``; used to build
    Jacobians of one output against a parameter subset without forming the
    full per-sample gradient.
    """
    indices = np.asarray(indices, dtype=np.int64)
    n = cache.out.shape[0]
    G = np.zeros((n, indices.size))
    offsets = params.offsets()
    for l, delta, inp in _backprop(params, cache, upstream):
        w0, b0 = offsets[l]
        W = params.weights[l]
        b_end = b0 + W.shape[0]
        in_w = (indices >= w0) & (indices < b0)
        if in_w.any():
            rel = indices[in_w] - w0
            rows, cols = np.divmod(rel, W.shape[1])
            G[:, in_w] = delta[:, rows] * inp[:, cols]
        in_b = (indices >= b0) & (indices < b_end)
        if in_b.any():
            G[:, in_b] = delta[:, indices[in_b] - b0]
    return G


# ---------------------------------------------------------------------------
# checkpoints


def save_params(path: str | Path, params: MlpParams, extra: dict | None = None) -> None:
    """JSON header line, then the flat parameters as little-endian float64."""
    header = {"widths": params.widths, "activations": list(params.activations),
              "count": params.n_params}
    if extra:
        header.update(extra)
    data = params.flat().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(data)


def load_params(path: str | Path) -> tuple[MlpParams, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        theta = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if theta.size != header["count"]:
        raise ShapeError(f"{path}: header count {header['count']} but {theta.size} floats")
    widths = header["widths"]
    Ws = [np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])]
    bs = [np.zeros(o) for o in widths[1:]]
    skeleton = MlpParams(Ws, bs, tuple(header["activations"]))
    return skeleton.with_flat(theta), header
