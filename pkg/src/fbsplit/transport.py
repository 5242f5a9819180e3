"""Discrete transport operators for the backward conservation law

    d_t w + d_e M(p, w) = 0  on [0, h],   w(h, .) = theta,

with p frozen.  Characteristics carry w at speed mu(p, w); for constant
mu = c the exact solution is w(0, e) = theta(e + c h).

Two grid schemes (Lax-Friedrichs, Upwind for mu >= 0) act on stacks of
grid functions of shape ``(..., J)``; sticky particle dynamics act on
sorted particle clouds whose empirical CDF represents the grid function.
"""

from __future__ import annotations

import warnings

import numpy as np

from .grids import EGrid, SubGrid
from .models import ModelSpec, flux

BOUNDARY_TOL = 1e-3


class BoundaryLayerWarning(UserWarning):
    """The solution is not flat at the ends of the e-grid."""


def _prepare(p, theta):
    theta = np.asarray(theta, dtype=float)
    p = np.asarray(p, dtype=float)
    if p.shape[:-1] != theta.shape[:-1]:
        if p.ndim != 1:
            raise ValueError(
                f"p batch shape {p.shape[:-1]} does not match theta batch shape {theta.shape[:-1]}")
    return p[..., None, :], theta


def _check_boundaries(out: np.ndarray) -> None:
    if out.shape[-1] < 2:
        return
    left = np.abs(out[..., 1] - out[..., 0])
    right = np.abs(out[..., -1] - out[..., -2])
    if np.any(left > BOUNDARY_TOL) or np.any(right > BOUNDARY_TOL):
        warnings.warn("transport output varies at the e-grid boundary; "
                      "widen the grid", BoundaryLayerWarning, stacklevel=3)


def lax_friedrichs(model: ModelSpec, p, theta, sub: SubGrid, grid: EGrid,
                   clamp: bool = True) -> np.ndarray:
    """Lax-Friedrichs transport, K backward sub-steps of size sub.step.

    Interior update
        V_j <- (V_{j+1} + V_{j-1}) / 2 + (dt / (2 delta)) (M(V_{j+1}) - M(V_{j-1})),
    end nodes frozen.  Monotone when |mu| dt / delta <= 1.
    """
    if np.shape(theta)[-1] != grid.J:
        raise ValueError(f"theta has {np.shape(theta)[-1]} nodes, grid has {grid.J}")
    pb, v = _prepare(p, theta)
    ratio = 0.5 * sub.step / grid.delta
    for _ in range(sub.K):
        m = flux(model, pb, v)
        nxt = v.copy()
        nxt[..., 1:-1] = 0.5 * (v[..., 2:] + v[..., :-2]) + ratio * (m[..., 2:] - m[..., :-2])
        v = np.clip(nxt, 0.0, 1.0) if clamp else nxt
    _check_boundaries(v)
    return v


def upwind(model: ModelSpec, p, theta, sub: SubGrid, grid: EGrid,
           clamp: bool = True) -> np.ndarray:
    """Upwind transport for mu >= 0 (information travels from larger e).

        V_j <- V_j + (dt / delta) (M(V_{j+1}) - M(V_j)),   V_J frozen.
    """
    if np.shape(theta)[-1] != grid.J:
        raise ValueError(f"theta has {np.shape(theta)[-1]} nodes, grid has {grid.J}")
    pb, v = _prepare(p, theta)
    if np.min(model.emission_rate(pb, np.linspace(0.0, 1.0, 11))) < 0:
        raise ValueError("upwind transport needs mu >= 0 on [0, 1] at every p")
    ratio = sub.step / grid.delta
    for _ in range(sub.K):
        m = flux(model, pb, v)
        nxt = v.copy()
        nxt[..., :-1] = v[..., :-1] + ratio * (m[..., 1:] - m[..., :-1])
        v = np.clip(nxt, 0.0, 1.0) if clamp else nxt
    _check_boundaries(v)
    return v


GRID_SCHEMES = {"lf": lax_friedrichs, "upwind": upwind}


# ---------------------------------------------------------------------------
# sticky particles


def spd_velocities(model: ModelSpec, p, M: int) -> np.ndarray:
    """Mass-averaged characteristic speeds -M * int_{(m-1)/M}^{m/M} mu(p, y) dy.

    ``p`` of shape (..., d) gives velocities of shape (..., M), non-decreasing
    in m for any emission rate decreasing in y.
    """
    if M < 1:
        raise ValueError("need at least one particle")
    p = np.asarray(p, dtype=float)
    y = np.arange(M + 1) / M
    m = flux(model, p[..., None, :], y)
    vel = -M * np.diff(m, axis=-1)
    # rounding in the flux differences must not reorder particles
    return np.maximum.accumulate(vel, axis=-1)


def spd_transport(model: ModelSpec, p, particles, h: float) -> np.ndarray:
    """Move each particle by its velocity for a time h (no collisions occur)."""
    particles = np.asarray(particles, dtype=float)
    if h == 0:
        return particles.copy()
    return particles + h * spd_velocities(model, p, particles.shape[-1])


def cdf_eval(particles, e) -> np.ndarray:
    """Empirical CDF #{m : e_m <= e} / M of a sorted particle cloud."""
    particles = np.asarray(particles, dtype=float)
    return np.searchsorted(particles, e, side="right") / particles.shape[-1]
