"""Space and time grids, the projection box for P and the CFL bookkeeping.

Grid functions (values of a candidate decoupling field on the e-grid) are
plain float arrays of length J; stacks of them have shape ``(..., J)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .models import ModelSpec


@dataclass(frozen=True)
class EGrid:
    J: int
    e_min: float
    e_max: float

    def __post_init__(self):
        if self.J < 3:
            raise ValueError(f"e-grid needs J >= 3 nodes, got {self.J}")
        if not self.e_min < self.e_max:
            raise ValueError("e-grid needs e_min < e_max")

    @property
    def delta(self) -> float:
        return (self.e_max - self.e_min) / (self.J - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.e_min, self.e_max, self.J)

    @property
    def width(self) -> float:
        return self.e_max - self.e_min


@dataclass(frozen=True)
class TimeGrid:
    N: int
    T: float = 1.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("time grid needs N >= 1 steps")
        if not self.T > 0:
            raise ValueError("horizon must be positive")

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.T / self.N


@dataclass(frozen=True)
class SubGrid:
    """K uniform transport sub-steps covering one splitting step of length h."""

    K: int
    h: float

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("sub-grid needs K >= 1")
        if not self.h > 0:
            raise ValueError("transport horizon must be positive")

    @property
    def step(self) -> float:
        return self.h / self.K


@dataclass(frozen=True)
class PBox:
    """Projection box [-B, B]^d, or [1/B, B]^d for positive state models."""

    bound: float
    positive: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.bound) and self.bound > 0):
            raise ValueError(f"box bound must be finite and positive, got {self.bound}")
        if self.positive and self.bound < 1:
            raise ValueError("positive box needs B >= 1 so that 1/B <= B")

    @property
    def lo(self) -> float:
        return 1.0 / self.bound if self.positive else -self.bound

    @property
    def hi(self) -> float:
        return self.bound


def default_box(model: ModelSpec) -> PBox:
    """Box covering the Euler paths with at least 3 standard deviations."""
    sigma = model.params.get("sigma", 0.0)
    spread = 3.0 * sigma * np.sqrt(model.horizon)
    if model.positive_state:
        a = abs(model.params.get("gbm_drift", 0.0))
        return PBox(float(np.exp(a * model.horizon + spread)) * float(np.max(model.p0)),
                    positive=True)
    bound = spread + float(np.max(np.abs(model.p0)))
    # degenerate sigma = 0 case still needs a box with B > 0
    return PBox(bound if bound > 0 else 1.0)


def default_egrid(model: ModelSpec, J: int) -> EGrid:
    return EGrid(J, *model.e_range)


def project_p(p, box: PBox) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=float), box.lo, box.hi)


def discretize_terminal(model: ModelSpec, p, grid: EGrid) -> np.ndarray:
    """theta_j = phi(p, e_j); p of shape (..., d) gives (..., J)."""
    p = np.asarray(p, dtype=float)
    return np.asarray(model.terminal(p[..., None, :], grid.nodes), dtype=float)


def _box_samples(d: int, box: PBox, n_random: int, seed: int) -> np.ndarray:
    lo, hi = box.lo, box.hi
    if d <= 12:
        corners = np.array(list(itertools.product((lo, hi), repeat=d)), dtype=float)
    else:
        corners = np.array([np.full(d, lo), np.full(d, hi)])
    u = np.random.default_rng(seed).random((n_random, d))
    return np.concatenate([corners, np.zeros((1, d)) + 0.5 * (lo + hi), lo + u * (hi - lo)])


def cfl_certificate(model: ModelSpec, box: PBox, grid: EGrid, sub: SubGrid,
                    n_random: int = 512, seed: int = 0) -> float:
    """c* = sup |mu(p, y)| * d_t / delta over sampled p in the box and y in [0, 1].

    Box corners are always included, so for coefficients monotone in each
    coordinate of p (all built-in models) the supremum is attained exactly.
    """
    p = _box_samples(model.dim, box, n_random, seed)
    y = np.linspace(0.0, 1.0, 101)
    speed = np.max(np.abs(model.emission_rate(p[:, None, :], y[None, :])))
    return float(speed * sub.step / grid.delta)


def min_emission_rate(model: ModelSpec, box: PBox, n_random: int = 512,
                      seed: int = 0) -> float:
    p = _box_samples(model.dim, box, n_random, seed)
    y = np.linspace(0.0, 1.0, 101)
    return float(np.min(model.emission_rate(p[:, None, :], y[None, :])))


def is_class_k(values, atol: float = 0.0) -> bool:
    """True when a grid function lies in [0, 1] and is non-decreasing."""
    v = np.asarray(values, dtype=float)
    return bool(np.all(v >= -atol) and np.all(v <= 1 + atol)
                and np.all(np.diff(v, axis=-1) >= -atol))
