"""Append-only replay buffer of real-environment transitions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkit import ShapeError

PHASES = ("warmup", "active")


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    sp: np.ndarray
    step: int
    phase: str


class ReplayBuffer:
    def __init__(self, state_dim: int, action_dim: int, capacity: int = 256):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self._s = np.zeros((capacity, state_dim))
        self._a = np.zeros((capacity, action_dim))
        self._sp = np.zeros((capacity, state_dim))
        self._step = np.zeros(capacity, dtype=np.int64)
        self._phase: list[str] = []
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def _grow(self):
        cap = max(2 * self._s.shape[0], 16)
        for name in ("_s", "_a", "_sp", "_step"):
            old = getattr(self, name)
            new = np.zeros((cap,) + old.shape[1:], dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)

    def append(self, s, a, sp, step: int, phase: str) -> None:
        s, a, sp = (np.asarray(x, dtype=np.float64).ravel() for x in (s, a, sp))
        if s.shape != (self.state_dim,) or sp.shape != (self.state_dim,) \
                or a.shape != (self.action_dim,):
            raise ShapeError("transition dimensions differ from the buffer's")
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        if self._n and step <= self._step[self._n - 1]:
            raise ValueError(f"step index {step} not greater than {self._step[self._n - 1]}")
        if self._n == self._s.shape[0]:
            self._grow()
        i = self._n
        self._s[i], self._a[i], self._sp[i], self._step[i] = s, a, sp, step
        self._phase.append(phase)
        self._n += 1

    @property
    def states(self) -> np.ndarray:
        return self._s[: self._n]

    @property
    def actions(self) -> np.ndarray:
        return self._a[: self._n]

    @property
    def next_states(self) -> np.ndarray:
        return self._sp[: self._n]

    @property
    def steps(self) -> np.ndarray:
        return self._step[: self._n]

    @property
    def phases(self) -> list[str]:
        return list(self._phase)

    def __getitem__(self, i: int) -> Transition:
        if not -self._n <= i < self._n:
            raise IndexError(i)
        i %= self._n
        return Transition(self._s[i].copy(), self._a[i].copy(), self._sp[i].copy(),
                          int(self._step[i]), self._phase[i])

    def prefix(self, n: int) -> "ReplayBuffer":
        """Immutable-by-convention copy of the first ``n`` transitions."""
        n = min(n, self._n)
        out = ReplayBuffer(self.state_dim, self.action_dim, capacity=max(n, 1))
        out._s[:n], out._a[:n], out._sp[:n] = self._s[:n], self._a[:n], self._sp[:n]
        out._step[:n] = self._step[:n]
        out._phase = self._phase[:n]
        out._n = n
        return out

    def snapshot(self) -> "ReplayBuffer":
        return self.prefix(self._n)

    @classmethod
    def from_arrays(cls, s, a, sp, phase: str = "warmup") -> "ReplayBuffer":
        s, a, sp = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (s, a, sp))
        buf = cls(s.shape[1], a.shape[1], capacity=max(len(s), 1))
        for i in range(len(s)):
            buf.append(s[i], a[i], sp[i], i, phase)
        return buf

    # --- CSV: s_0..s_k,a_0..a_m,sp_0..sp_k,step,phase; floats via repr (round-trip exact)

    def header(self) -> list[str]:
        return ([f"s_{i}" for i in range(self.state_dim)]
                + [f"a_{i}" for i in range(self.action_dim)]
                + [f"sp_{i}" for i in range(self.state_dim)] + ["step", "phase"])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for i in range(self._n):
                row = [repr(float(x)) for x in self._s[i]]
                row += [repr(float(x)) for x in self._a[i]]
                row += [repr(float(x)) for x in self._sp[i]]
                row += [str(int(self._step[i])), self._phase[i]]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path: str | Path) -> "ReplayBuffer":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        sd = sum(1 for h in header if h.startswith("s_"))
        ad = sum(1 for h in header if h.startswith("a_"))
        buf = cls(sd, ad, capacity=max(len(rows) - 1, 1))
        for r in rows[1:]:
            vals = [float(x) for x in r[: 2 * sd + ad]]
            buf.append(vals[:sd], vals[sd:sd + ad], vals[sd + ad:], int(r[-2]), r[-1])
        return buf
