"""Diffusion step: Euler-Monte-Carlo paths and the recombining cubature lattice."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Optional, Sequence

import numpy as np

from .grids import TimeGrid
from .models import ModelSpec


def euler_step(model: ModelSpec, p, dt: float, dw) -> np.ndarray:
    """p + b(p) dt + sigma(p) dw, batched over the leading axes of p and dw."""
    p = np.asarray(p, dtype=float)
    dw = np.asarray(dw, dtype=float)
    noise = np.einsum("...ij,...j->...i", model.vol(p), dw)
    return p + model.drift(p) * dt + noise


@dataclass(frozen=True)
class EulerSampler:
    model: ModelSpec
    timegrid: TimeGrid
    seed: int = 0
    p0: Optional[np.ndarray] = None

    @property
    def start(self) -> np.ndarray:
        return self.model.p0 if self.p0 is None else np.asarray(self.p0, dtype=float)


@dataclass
class PathEnsemble:
    """paths: (count, N + 1, d) states; increments: (count, N, d) Brownian steps."""

    paths: np.ndarray
    increments: np.ndarray

    def __len__(self) -> int:
        return self.paths.shape[0]


def _path_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    # one Philox counter block per (stream, path): streams never overlap and
    # changing the ensemble size leaves earlier paths untouched
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, stream, index]))


def sample_paths(sampler: EulerSampler, count: int, stream: int = 0) -> PathEnsemble:
    """Simulate ``count`` independent Euler paths of P over the time grid."""
    if count < 1:
        raise ValueError("need at least one path")
    tg = sampler.timegrid
    d = sampler.model.dim
    dt = tg.h
    inc = np.empty((count, tg.N, d))
    for i in range(count):
        inc[i] = _path_rng(sampler.seed, stream, i).standard_normal((tg.N, d))
    inc *= np.sqrt(dt)
    paths = np.empty((count, tg.N + 1, d))
    paths[:, 0] = sampler.start
    for n in range(tg.N):
        paths[:, n + 1] = euler_step(sampler.model, paths[:, n], dt, inc[:, n])
    return PathEnsemble(paths, inc)


# ---------------------------------------------------------------------------
# cubature


def cubature_increments(d: int, h: float) -> tuple[np.ndarray, np.ndarray]:
    """The 2d points +-sqrt(d h) e_l, each with probability 1/(2d).

    Points are ordered +e_1, -e_1, +e_2, -e_2, ...; the weighted mean is 0
    and the weighted covariance is h * I.
    """
    if d < 1 or not h > 0:
        raise ValueError("need d >= 1 and h > 0")
    steps = np.zeros((2 * d, d))
    r = np.sqrt(d * h)
    for ell in range(d):
        steps[2 * ell, ell] = r
        steps[2 * ell + 1, ell] = -r
    return steps, np.full(2 * d, 1.0 / (2 * d))


def lattice_size(d: int, n: int) -> int:
    """Number of k in Z^d with |k|_1 <= n and |k|_1 = n (mod 2)."""

    def sphere(r):
        if r == 0:
            return 1
        return sum(2**i * comb(d, i) * comb(r - 1, i - 1) for i in range(1, min(d, r) + 1))

    return sum(sphere(r) for r in range(n % 2, n + 1, 2))


def _unit_steps(d: int) -> np.ndarray:
    steps = np.zeros((2 * d, d), dtype=np.int64)
    for ell in range(d):
        steps[2 * ell, ell] = 1
        steps[2 * ell + 1, ell] = -1
    return steps


@dataclass
class CubatureLattice:
    """Recombining support of the cubature random walk.

    Level n holds the integer keys k with |k|_1 <= n, |k|_1 = n (mod 2),
    sorted lexicographically; the node position is sqrt(d h) * k.  A node's
    children are the 2d keys k +- e_l at level n + 1, in the same order as
    :func:`cubature_increments`.
    """

    dim: int
    h: float
    N: int
    _levels: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        steps = _unit_steps(self.dim)
        level = np.zeros((1, self.dim), dtype=np.int64)
        self._levels = [level]
        for _ in range(self.N):
            nxt = (level[:, None, :] + steps[None, :, :]).reshape(-1, self.dim)
            level = np.unique(nxt, axis=0)
            self._levels.append(level)

    def keys(self, n: int) -> np.ndarray:
        return self._levels[n]

    def positions(self, n: int) -> np.ndarray:
        return np.sqrt(self.dim * self.h) * self._levels[n]

    def size(self, n: int) -> int:
        return self._levels[n].shape[0]

    def _codes(self, keys: np.ndarray) -> np.ndarray:
        base = 2 * self.N + 3
        shifted = keys + (self.N + 1)
        code = np.zeros(keys.shape[0], dtype=np.int64)
        for ell in range(self.dim):
            code = code * base + shifted[:, ell]
        return code

    def children(self, n: int) -> np.ndarray:
        """(size(n), 2d) indices of each level-n node's children in level n + 1."""
        parents = self._levels[n]
        kids = (parents[:, None, :] + _unit_steps(self.dim)[None]).reshape(-1, self.dim)
        level_codes = self._codes(self._levels[n + 1])
        want = self._codes(kids)
        idx = np.searchsorted(level_codes, want)
        idx = np.minimum(idx, len(level_codes) - 1)
        if not np.array_equal(level_codes[idx], want):
            raise RuntimeError("lattice child missing from next level")
        return idx.reshape(parents.shape[0], 2 * self.dim)


MERGE_RULES = ("rank", "mean")


def _thin(pooled: np.ndarray, k: int, rule: str) -> np.ndarray:
    if rule == "rank":
        return pooled[..., k - 1::k]
    if rule == "mean":
        blocks = pooled.reshape(pooled.shape[:-1] + (-1, k))
        # clamping to the block range absorbs rounding: equal blocks map to
        # themselves exactly and consecutive means stay ordered
        return np.clip(blocks.mean(axis=-1), blocks[..., 0], blocks[..., -1])
    raise ValueError(f"unknown merge rule {rule!r}; expected one of {MERGE_RULES}")


def merge_particles(clouds: Sequence[np.ndarray], rule: str = "rank") -> np.ndarray:
    """Pool 2d sorted clouds of M particles and thin the result back to M.

    With the pooled cloud sorted as e~_1 <= ... <= e~_{2dM}, split it into M
    consecutive blocks of 2d.  ``rule="rank"`` keeps the last element of each
    block, (e~_{2d}, e~_{4d}, ..., e~_{2dM}); ``rule="mean"`` keeps each
    block's mean.  Both stay within 1/M of the pooled empirical CDF, but the
    rank rule rounds that CDF down at every merge while the mean rule
    preserves the first moment, so only the latter is free of drift over
    many levels.
    """
    clouds = [np.asarray(c, dtype=float) for c in clouds]
    sizes = {c.shape[-1] for c in clouds}
    if len(sizes) != 1:
        raise ValueError(f"particle clouds differ in size: {sorted(sizes)}")
    pooled = np.sort(np.concatenate(clouds, axis=-1), axis=-1)
    return _thin(pooled, len(clouds), rule)


def diffusion_merge_step(lattice: CubatureLattice, n: int,
                         child_payloads: np.ndarray, rule: str = "rank") -> np.ndarray:
    """Particle clouds at level n from the clouds at level n + 1.

    ``child_payloads`` has shape (size(n + 1), M); the result has shape
    (size(n), M).  The empirical CDF of each result is within 1/M of the
    cubature average of its children's CDFs.
    """
    child_payloads = np.asarray(child_payloads, dtype=float)
    if child_payloads.shape[0] != lattice.size(n + 1):
        raise RuntimeError(
            f"level {n + 1} has {lattice.size(n + 1)} nodes but "
            f"{child_payloads.shape[0]} payloads were given")
    idx = lattice.children(n)
    gathered = child_payloads[idx]  # (nodes, 2d, M)
    k = gathered.shape[1]
    pooled = np.sort(gathered.reshape(gathered.shape[0], -1), axis=-1)
    return _thin(pooled, k, rule)
