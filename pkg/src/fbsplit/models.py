"""Coefficient families for singular FBSDEs of carbon-market type.

A model is the quadruple (b, sigma, mu, phi) driving

    dP = b(P) dt + sigma(P) dW,    dE = mu(P, Y) dt,    dY = Z . dW,

with terminal condition Y_T = phi(P_T, E_T).

Array conventions used throughout the package:

* ``p`` has shape ``(..., d)``;
* ``emission_rate(p, y)`` and ``antiderivative(p, y)`` broadcast ``y``
  against ``p.shape[:-1]`` (pass ``p[..., None, :]`` to pair each p with a
  row of y values);
* ``terminal(p, e)`` follows the same rule with ``e`` in place of ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Optional

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import ConfigError

ArrayFn = Callable[..., np.ndarray]


@dataclass(frozen=True)
class ModelSpec:
    """Immutable description of one FBSDE instance.

    ``terminal_jump`` is the location of the jump when ``terminal`` is an
    indicator of a half-line, which the particle scheme needs to seed its
    particle clouds; it is ``None`` for any other terminal function.
    """

    name: str
    dim: int
    drift: ArrayFn
    vol: ArrayFn
    emission_rate: ArrayFn
    terminal: ArrayFn
    p0: np.ndarray
    horizon: float = 1.0
    brownian_map: Optional[ArrayFn] = None
    antiderivative: Optional[ArrayFn] = None
    terminal_jump: Optional[float] = None
    params: Mapping[str, float] = field(default_factory=dict)
    e_range: tuple[float, float] = (-2.0, 2.0)
    positive_state: bool = False

    def __post_init__(self):
        p0 = np.asarray(self.p0, dtype=float).reshape(self.dim)
        p0.setflags(write=False)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))


def _level(p: np.ndarray) -> np.ndarray:
    """(1/sqrt(d)) * sum_l p^l over the last axis."""
    p = np.asarray(p, dtype=float)
    return p.sum(axis=-1) / np.sqrt(p.shape[-1])


def _constant_vol(d: int, sigma: float) -> ArrayFn:
    def vol(p):
        p = np.asarray(p, dtype=float)
        return np.broadcast_to(sigma * np.eye(d), p.shape + (d,)).copy()

    return vol


def _zero_drift(p):
    return np.zeros_like(np.asarray(p, dtype=float))


def _check_common(d: int, sigma: float, horizon: float, degenerate: bool = False) -> None:
    if int(d) != d or d < 1:
        raise ConfigError(f"dimension must be a positive integer, got {d!r}")
    if not (sigma > 0 or (degenerate and sigma == 0)):
        raise ConfigError(f"sigma must be positive, got {sigma!r}")
    if not horizon > 0:
        raise ConfigError(f"horizon must be positive, got {horizon!r}")


def _indicator(threshold: float, closed: bool) -> ArrayFn:
    def terminal(p, e):
        level = np.zeros(np.asarray(p).shape[:-1])
        e = np.asarray(e, dtype=float) + level
        hit = e >= threshold if closed else e > threshold
        return hit.astype(float)

    return terminal


def make_linear_model(d: int = 1, sigma: float = 1.0, cap: float = 0.0,
                      horizon: float = 1.0, degenerate: bool = False) -> ModelSpec:
    """Brownian state, mu(p, y) = mean-level(p) - y, phi = 1{e > cap}.

    ``degenerate=True`` admits sigma = 0 (deterministic state), which the
    scheme tests use as an oracle; every other constructor path requires
    sigma > 0.
    """
    _check_common(d, sigma, horizon, degenerate)
    d = int(d)

    def mu(p, y):
        return _level(p) - np.asarray(y, dtype=float)

    def flux(p, y):
        y = np.asarray(y, dtype=float)
        return _level(p) * y - 0.5 * y * y

    def bmap(t, w):
        return sigma * np.asarray(w, dtype=float)

    return ModelSpec(
        name="linear", dim=d, drift=_zero_drift, vol=_constant_vol(d, sigma),
        emission_rate=mu, terminal=_indicator(cap, closed=False),
        p0=np.zeros(d), horizon=horizon, brownian_map=bmap,
        antiderivative=flux, terminal_jump=float(cap),
        params={"sigma": sigma, "cap": cap}, e_range=(cap - 2.0, cap + 4.0),
    )


def make_bm_positive_model(d: int = 1, sigma: float = 1.0,
                           horizon: float = 1.0, degenerate: bool = False) -> ModelSpec:
    """Brownian state with positive emission 1 + sigmoid(level) - y."""
    _check_common(d, sigma, horizon, degenerate)
    d = int(d)

    def _a(p):
        return 1.0 + 1.0 / (1.0 + np.exp(-_level(p)))

    def mu(p, y):
        return _a(p) - np.asarray(y, dtype=float)

    def flux(p, y):
        y = np.asarray(y, dtype=float)
        return _a(p) * y - 0.5 * y * y

    def bmap(t, w):
        return sigma * np.asarray(w, dtype=float)

    return ModelSpec(
        name="bm_positive", dim=d, drift=_zero_drift, vol=_constant_vol(d, sigma),
        emission_rate=mu, terminal=_indicator(0.0, closed=True),
        p0=np.zeros(d), horizon=horizon, brownian_map=bmap,
        antiderivative=flux, terminal_jump=0.0,
        params={"sigma": sigma}, e_range=(-3.0, 1.0),
    )


def make_multiplicative_model(d: int = 1, gbm_drift: float = 0.0,
                              sigma: float = 1.0, theta: float = 1.0,
                              horizon: float = 1.0, degenerate: bool = False) -> ModelSpec:
    """Geometric Brownian state with emission (prod p)^(1/sqrt d) exp(-theta y)."""
    _check_common(d, sigma, horizon, degenerate)
    if not theta > 0:
        raise ConfigError(f"theta must be positive, got {theta!r}")
    d = int(d)
    root = np.sqrt(d)

    def _a(p):
        # geometric level computed in log space; p lives in the positive orthant
        return np.exp(np.log(np.asarray(p, dtype=float)).sum(axis=-1) / root)

    def mu(p, y):
        return _a(p) * np.exp(-theta * np.asarray(y, dtype=float))

    def flux(p, y):
        y = np.asarray(y, dtype=float)
        return _a(p) * (-np.expm1(-theta * y)) / theta

    def drift(p):
        return gbm_drift * np.asarray(p, dtype=float)

    def vol(p):
        p = np.asarray(p, dtype=float)
        return sigma * p[..., :, None] * np.eye(d)

    def bmap(t, w):
        w = np.asarray(w, dtype=float)
        return np.exp((gbm_drift - 0.5 * sigma**2) * t + sigma * w)

    return ModelSpec(
        name="multiplicative", dim=d, drift=drift, vol=vol,
        emission_rate=mu, terminal=_indicator(0.0, closed=True),
        p0=np.ones(d), horizon=horizon, brownian_map=bmap,
        antiderivative=flux, terminal_jump=0.0,
        params={"sigma": sigma, "theta": theta, "gbm_drift": gbm_drift},
        e_range=(-3.0, 1.0), positive_state=True,
    )


MODELS: dict[str, Callable[..., ModelSpec]] = {
    "linear": lambda cfg: make_linear_model(
        cfg["dim"], cfg["sigma"], cfg["cap"], cfg["horizon"], cfg.get("degenerate", False)),
    "bm_positive": lambda cfg: make_bm_positive_model(
        cfg["dim"], cfg["sigma"], cfg["horizon"], cfg.get("degenerate", False)),
    "multiplicative": lambda cfg: make_multiplicative_model(
        cfg["dim"], cfg["gbm_drift"], cfg["sigma"], cfg["theta"], cfg["horizon"],
        cfg.get("degenerate", False)),
}


# ---------------------------------------------------------------------------
# flux


_GL_NODES, _GL_WEIGHTS = leggauss(20)


def _gauss_legendre(f: Callable[[np.ndarray], np.ndarray], y: np.ndarray,
                    tol: float = 1e-12, max_level: int = 12) -> np.ndarray:
    """Composite 20-point Gauss-Legendre of f over [0, y], panels doubled
    until two successive estimates agree to ``tol`` everywhere."""

    def composite(panels):
        total = 0.0
        width = y / panels
        for k in range(panels):
            mid = (k + 0.5) * width
            for x, w in zip(_GL_NODES, _GL_WEIGHTS):
                total = total + w * f(mid + 0.5 * width * x)
        return 0.5 * width * total

    est = composite(1)
    for level in range(1, max_level):
        new = composite(2**level)
        if np.all(np.abs(new - est) <= tol):
            return new
        est = new
    return est


def flux(model: ModelSpec, p, y) -> np.ndarray:
    """Flux M(p, y) = int_0^y mu(p, u) du with y clamped to [0, 1]."""
    y = np.clip(np.asarray(y, dtype=float), 0.0, 1.0)
    if model.antiderivative is not None:
        return model.antiderivative(p, y)
    p = np.asarray(p, dtype=float)
    shape = np.broadcast_shapes(p.shape[:-1], y.shape)
    y = np.broadcast_to(y, shape)
    return _gauss_legendre(lambda u: model.emission_rate(p, u), y)


# ---------------------------------------------------------------------------
# reduction


def reduce_to_1d(model: ModelSpec) -> ModelSpec:
    """Equivalent scalar-state model with the same law of V(0, P0, .).

    The additive models only see P through (1/sqrt d) sum_l P^l, itself a
    Brownian motion with volatility sigma.  For the geometric model
    (prod P^l)^(1/sqrt d) is again a geometric Brownian motion whose
    log-drift is sqrt(d) (a - sigma^2/2).
    """
    if model.dim == 1:
        return model
    s = model.params.get("sigma")
    zero = s == 0
    if model.name == "linear":
        return make_linear_model(1, s, model.params["cap"], model.horizon, zero)
    if model.name == "bm_positive":
        return make_bm_positive_model(1, s, model.horizon, zero)
    if model.name == "multiplicative":
        a = model.params["gbm_drift"]
        reduced_drift = np.sqrt(model.dim) * (a - 0.5 * s**2) + 0.5 * s**2
        return make_multiplicative_model(1, reduced_drift, s,
                                         model.params["theta"], model.horizon, zero)
    raise ValueError(f"no one-dimensional reduction registered for {model.name!r}")


# ---------------------------------------------------------------------------
# structural validation


@dataclass
class ValidationReport:
    l1: float
    l2: float
    mu_lipschitz: float
    phi_lipschitz: float
    phi_monotone: bool
    phi_in_range: bool
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


def _box_bounds(p_box, d: int) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(p_box, "lo"):
        return (np.broadcast_to(p_box.lo, (d,)).astype(float),
                np.broadcast_to(p_box.hi, (d,)).astype(float))
    lo, hi = p_box
    return (np.broadcast_to(np.asarray(lo, float), (d,)),
            np.broadcast_to(np.asarray(hi, float), (d,)))


def validate_class(model: ModelSpec, p_box, samples: int = 2000,
                   seed: int = 0) -> ValidationReport:
    """Monte-Carlo check of the structural conditions on (mu, phi).

    Estimates the coercivity constants l1 <= (y-y')(mu(p,y')-mu(p,y))/|y-y'|^2 <= l2,
    the Lipschitz constants of mu in (p, y) and of phi in p, and checks
    that phi takes values in [0, 1] and is non-decreasing in e.  Violations
    are reported, never raised.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    d = model.dim
    lo, hi = _box_bounds(p_box, d)
    p = lo + rng.random((samples, d)) * (hi - lo)
    p2 = lo + rng.random((samples, d)) * (hi - lo)
    y = rng.random(samples)
    y2 = rng.random(samples)
    keep = y != y2
    p, p2, y, y2 = p[keep], p2[keep], y[keep], y2[keep]

    mu_y = model.emission_rate(p, y)
    mu_y2 = model.emission_rate(p, y2)
    ratio = (y - y2) * (mu_y2 - mu_y) / (y - y2) ** 2
    l1, l2 = float(ratio.min()), float(ratio.max())

    dist = np.sqrt(((p - p2) ** 2).sum(-1) + (y - y2) ** 2)
    mu_lip = float(np.max(np.abs(model.emission_rate(p2, y2) - mu_y) / dist))

    span = model.e_range[1] - model.e_range[0]
    e = model.e_range[0] - span + rng.random(samples) * 3 * span
    e2 = model.e_range[0] - span + rng.random(samples) * 3 * span
    e = np.concatenate([e, [model.terminal_jump or 0.0]])
    e2 = np.concatenate([e2, [np.nextafter(model.terminal_jump or 0.0, np.inf)]])
    pe = np.concatenate([p, p[:1]])
    pe2 = np.concatenate([p2, p2[:1]])
    phi = model.terminal(pe, e)
    phi2 = model.terminal(pe, e2)
    monotone = bool(np.all((phi2 - phi) * np.sign(e2 - e) >= 0))
    in_range = bool(np.all((phi >= 0) & (phi <= 1)))
    pdist = np.sqrt(((pe - pe2) ** 2).sum(-1))
    phi_lip = float(np.max(np.abs(model.terminal(pe2, e) - phi) / pdist))

    violations = []
    if not l1 > 0:
        violations.append(f"emission rate not strictly decreasing in y (l1={l1:.6g})")
    if not monotone:
        violations.append("terminal condition not non-decreasing in e")
    if not in_range:
        violations.append("terminal condition leaves [0, 1]")
    return ValidationReport(l1, l2, mu_lip, phi_lip, monotone, in_range, violations)
