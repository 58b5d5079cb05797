"""Synchronization index sets with a bounded gap."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


def gap(indices):
    """Largest difference between consecutive sync indices, counting from 0."""
    idx = [int(i) for i in indices]
    if not idx:
        raise ParameterError("gap of an empty index set is undefined")
    prev = 0
    worst = 0
    for i in idx:
        if i <= prev:
            raise ParameterError(f"sync indices must be strictly increasing and positive, got {idx}")
        worst = max(worst, i - prev)
        prev = i
    return worst


@dataclass(frozen=True)
class SyncSchedule:
    per_worker: tuple
    T: int
    H: int
    mode: str = "explicit"
    seed: int | None = None

    def __post_init__(self):
        table = np.zeros((len(self.per_worker), self.T + 1), dtype=bool)
        for r, idx in enumerate(self.per_worker):
            table[r, list(idx)] = True
        object.__setattr__(self, "_table", table)

    @property
    def R(self):
        return len(self.per_worker)

    @property
    def synchronous(self):
        first = self.per_worker[0]
        return all(tuple(p) == tuple(first) for p in self.per_worker)

    def syncs(self, r, t):
        """True when t is a sync index of worker r."""
        return bool(self._table[r, t])

    def syncing(self, t):
        """Workers whose schedule contains t, ascending."""
        return np.flatnonzero(self._table[:, t])

    def gaps(self):
        return [gap(p) for p in self.per_worker]

    def to_dict(self):
        doc = {"mode": self.mode, "H": int(self.H)}
        if self.mode == "random-async":
            doc["seed"] = int(self.seed)
        elif self.mode == "explicit":
            doc["indices"] = [list(map(int, p)) for p in self.per_worker]
        return doc


def _check(T, H):
    if not (isinstance(T, (int, np.integer)) and isinstance(H, (int, np.integer))):
        raise ParameterError(f"T and H must be integers, got T={T!r}, H={H!r}")
    if not 1 <= H <= T:
        raise ParameterError(f"need 1 <= H <= T, got H={H}, T={T}")


def make_periodic(T, H, R=1):
    """Every worker syncs at H, 2H, ... and at T."""
    _check(T, H)
    idx = list(range(H, T + 1, H))
    if idx[-1] != T:
        idx.append(T)
    idx = tuple(idx)
    return SyncSchedule(tuple(idx for _ in range(R)), int(T), int(H), "periodic")


def make_random_async(T, H, R, rng):
    """Per-worker intervals drawn uniformly from {1, ..., H}, T always included.

    ``rng`` is a numpy Generator or an integer seed.
    """
    _check(T, H)
    if R < 1:
        raise ParameterError(f"R must be >= 1, got {R}")
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    out = []
    for _ in range(R):
        idx = []
        t = 0
        while True:
            t += int(rng.integers(1, H + 1))
            if t >= T:
                idx.append(T)
                break
            idx.append(t)
        out.append(tuple(idx))
    return SyncSchedule(tuple(out), int(T), int(H), "random-async", seed)


def from_indices(per_worker, T, H=None):
    """Validate user-supplied schedules; H defaults to the largest gap."""
    per = []
    for r, idx in enumerate(per_worker):
        idx = tuple(int(i) for i in idx)
        if not idx or idx[-1] != T:
            raise ParameterError(f"worker {r}: schedule must end with T={T}")
        if any(i < 1 or i > T for i in idx):
            raise ParameterError(f"worker {r}: indices must lie in [1, {T}]")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ParameterError(f"worker {r}: indices must be strictly increasing")
        per.append(idx)
    worst = max(gap(p) for p in per)
    if H is None:
        H = worst
    elif worst > H:
        raise ParameterError(f"schedule gap {worst} exceeds H={H}")
    return SyncSchedule(tuple(per), int(T), int(H), "explicit")
