"""End-to-end splitting schemes, error metrics and the convergence-rate harness.

Each backward step applies the diffusion operator (a conditional
expectation over one time step of P, with E frozen) and then the
transport operator (the conservation law in e, with P frozen).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import isotonic_regression

from .diffusion import (MERGE_RULES, CubatureLattice, EulerSampler, diffusion_merge_step,
                        lattice_size, sample_paths)
from .errors import CFLError, GridMismatchError, MemoryBudgetError, RateExperimentError
from .grids import (EGrid, PBox, SubGrid, TimeGrid, cfl_certificate, default_box,
                    discretize_terminal, min_emission_rate, project_p)
from .models import ModelSpec, reduce_to_1d
from .neuralreg import RegressionNet, TrainConfig, train_time_step, xavier_init
from .transport import GRID_SCHEMES, cdf_eval, spd_velocities

log = logging.getLogger(__name__)


@dataclass
class SchemeResult:
    """Approximation of e -> V(0, P0, e) on an e-grid.

    ``raw_values`` keeps the scheme output before the final projection
    onto monotone [0, 1]-valued grid functions; ``monotonicity_defect`` is
    its largest adjacent decrease.
    """

    grid: EGrid
    values: np.ndarray
    scheme: str
    config: dict = field(default_factory=dict)
    runtime: float = 0.0
    raw_values: Optional[np.ndarray] = None
    monotonicity_defect: float = 0.0


def monotonicity_defect(values) -> float:
    diffs = np.diff(np.asarray(values, dtype=float))
    return float(max(0.0, -diffs.min())) if diffs.size else 0.0


def project_class_k(values) -> np.ndarray:
    """Clamp to [0, 1], then least-squares projection onto non-decreasing vectors."""
    v = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    return isotonic_regression(v, increasing=True).x


# ---------------------------------------------------------------------------
# alternative scheme: cubature lattice + sticky particles


def run_alt_scheme(model: ModelSpec, N: int, M: int, grid: EGrid,
                   memory_budget_mb: float = 4096.0, merge: str = "mean") -> SchemeResult:
    """Particle scheme on the recombining cubature lattice.

    Every level-N node starts from M particles at the jump of the terminal
    indicator.  Going backward, each level-n node pools its 2d children
    (keeping every 2d-th order statistic) and then moves its particles for
    one time step at the state P = brownian_map(t_n, w) of that node.
    ``merge`` selects the thinning rule of :func:`merge_particles`.
    """
    if model.brownian_map is None:
        raise ValueError(f"model {model.name!r} has no closed-form Brownian map")
    if model.terminal_jump is None:
        raise ValueError("the particle scheme needs an indicator terminal condition")
    if N < 1 or M < 1:
        raise ValueError("need N >= 1 and M >= 1")
    if merge not in MERGE_RULES:
        raise ValueError(f"unknown merge rule {merge!r}")
    need = lattice_size(model.dim, N) * M * 8
    if need > memory_budget_mb * 2**20:
        raise MemoryBudgetError(
            f"lattice payload needs {need / 2**20:.0f} MB, budget is {memory_budget_mb:.0f} MB")

    start = time.perf_counter()
    tg = TimeGrid(N, model.horizon)
    lattice = CubatureLattice(model.dim, tg.h, N)
    payload = np.full((lattice.size(N), M), float(model.terminal_jump))
    for n in range(N - 1, -1, -1):
        merged = diffusion_merge_step(lattice, n, payload, merge)
        p = model.brownian_map(tg.nodes[n], lattice.positions(n))
        payload = merged + tg.h * spd_velocities(model, p, M)
    root = payload[0]
    values = cdf_eval(root, grid.nodes)
    return SchemeResult(
        grid, values, "alt",
        config={"model": model.name, "dim": model.dim, "N": N, "M": M, "merge": merge},
        runtime=time.perf_counter() - start, raw_values=values.copy(),
        monotonicity_defect=monotonicity_defect(values))


def run_proxy(model: ModelSpec, grid: EGrid, N: int = 64, M: int = 3500,
              memory_budget_mb: float = 4096.0, merge: str = "mean") -> SchemeResult:
    """High-resolution particle scheme on the equivalent scalar-state model."""
    res = run_alt_scheme(reduce_to_1d(model), N, M, grid, memory_budget_mb, merge)
    res.scheme = "proxy"
    return res


# ---------------------------------------------------------------------------
# regression scheme: Euler paths + neural nets + finite-difference transport


def check_cfl(model: ModelSpec, box: PBox, grid: EGrid, sub: SubGrid,
              transport: str) -> float:
    if transport not in GRID_SCHEMES:
        raise ValueError(f"unknown grid transport {transport!r}")
    c = cfl_certificate(model, box, grid, sub)
    if c >= 1:
        raise CFLError(f"CFL certificate c* = {c:.4g} >= 1; increase K or J, or shrink B")
    if transport == "upwind" and min_emission_rate(model, box) < 0:
        raise CFLError("upwind transport needs mu >= 0 on the projection box")
    return c


def deterministic_composition(model: ModelSpec, grid: EGrid, N: int, K: int,
                              transport: str = "upwind") -> np.ndarray:
    """N transport steps applied to phi along the deterministic path of P.

    For sigma = 0 every conditional expectation is trivial and the splitting
    scheme collapses to this composition.
    """
    tg = TimeGrid(N, model.horizon)
    sub = SubGrid(K, tg.h)
    op = GRID_SCHEMES[transport]
    p = model.p0.copy()
    path = [p]
    for n in range(N):
        p = p + model.drift(p) * tg.h
        path.append(p)
    v = discretize_terminal(model, path[N], grid)
    for n in range(N, 0, -1):
        v = op(model, path[n], v, sub, grid)
    return v


def _transport_in_chunks(op, model, p, theta, sub, grid, chunk=2048):
    out = np.empty_like(theta)
    for s in range(0, theta.shape[0], chunk):
        out[s:s + chunk] = op(model, p[s:s + chunk], theta[s:s + chunk], sub, grid)
    return out


def run_nn_scheme(model: ModelSpec, grid: EGrid, N: int, K: int,
                  box: Optional[PBox] = None, transport: str = "upwind",
                  train: Optional[TrainConfig] = None, seed: int = 0,
                  paths: int = 10000) -> SchemeResult:
    """Neural-regression splitting scheme.

    For n = N-1, ..., 1 a network is fitted so that Y_n(P_{t_n}) + Z_n(P_{t_n}) dW_n
    regresses T(proj(P_{t_{n+1}}), clamp(Ybar_{n+1}(P_{t_{n+1}}))), with
    Ybar_N = phi and T the finite-difference transport over one step.
    The result is the average of T(proj(P_{t_1}), clamp(Ybar_1(P_{t_1})))
    over a fresh ensemble of ``paths`` Euler paths.
    """
    start = time.perf_counter()
    train = train or TrainConfig()
    box = box or default_box(model)
    tg = TimeGrid(N, model.horizon)
    sub = SubGrid(K, tg.h)
    cfl = check_cfl(model, box, grid, sub, transport)
    op = GRID_SCHEMES[transport]
    sampler = EulerSampler(model, tg, seed)

    def next_values(net, states):
        if net is None:
            return discretize_terminal(model, states, grid)
        return np.clip(net.predict(states), 0.0, 1.0)

    def targets(net, states):
        return _transport_in_chunks(op, model, project_p(states, box),
                                    next_values(net, states), sub, grid)

    net = None
    iterations = []
    if N > 1:
        pool = sample_paths(sampler, train.pool_size, stream=0)
        val = sample_paths(sampler, train.val_size, stream=1)
        for n in range(N - 1, 0, -1):
            tr_target = targets(net, pool.paths[:, n + 1])
            va_target = targets(net, val.paths[:, n + 1])
            if net is None:
                fresh = xavier_init(RegressionNet.zeros(model.dim, grid.J), train.seed)
            else:
                fresh = net.copy()
            fresh.standardize(pool.paths[:, n])
            net, report = train_time_step(
                fresh,
                (pool.paths[:, n], pool.increments[:, n], tr_target),
                (val.paths[:, n], val.increments[:, n], va_target),
                train, step_index=n)
            iterations.append(report.iterations)
            log.info("step %d/%d trained: %d iterations, validation loss %.3e",
                     n, N - 1, report.iterations, report.best_val_loss)

    final = sample_paths(sampler, paths, stream=2)
    raw = targets(net, final.paths[:, 1]).mean(axis=0)
    values = project_class_k(raw)
    return SchemeResult(
        grid, values, "nn",
        config={"model": model.name, "dim": model.dim, "N": N, "K": K, "J": grid.J,
                "transport": transport, "seed": seed, "paths": paths,
                "cfl": cfl, "box": box.bound, "iterations": iterations},
        runtime=time.perf_counter() - start, raw_values=raw,
        monotonicity_defect=monotonicity_defect(raw))


# ---------------------------------------------------------------------------
# errors and convergence rate


def _check_same_grid(a: SchemeResult, b: SchemeResult) -> None:
    if a.grid != b.grid:
        raise GridMismatchError(f"grids differ: {a.grid} vs {b.grid}")


def l1_error(a: SchemeResult, b: SchemeResult) -> float:
    _check_same_grid(a, b)
    return float(a.grid.delta * np.sum(np.abs(a.values - b.values)))


def linf_error(a: SchemeResult, b: SchemeResult) -> float:
    _check_same_grid(a, b)
    return float(np.max(np.abs(a.values - b.values)))


@dataclass
class RateReport:
    Ns: list
    errors: list
    slope: float
    reference: str = ""


def fit_rate(Ns: Sequence[int], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(N)."""
    x = np.log(np.asarray(Ns, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def rate_experiment(Ns: Sequence[int], reference: SchemeResult,
                    runner: Callable[[int], SchemeResult]) -> RateReport:
    """L1 error of ``runner(N)`` against ``reference`` for each N, and the fitted slope."""
    Ns = [int(n) for n in Ns]
    if len(Ns) < 3:
        raise ValueError("a rate experiment needs at least three values of N")
    if Ns != sorted(Ns):
        raise ValueError("Ns must be sorted")
    errors = []
    for n in Ns:
        try:
            res = runner(n)
        except Exception as exc:
            raise RateExperimentError(f"run with N={n} failed: {exc}") from exc
        errors.append(l1_error(res, reference))
    if min(errors) <= 0:
        raise RateExperimentError("zero error against the reference; the rate is undefined")
    desc = f"{reference.scheme} {reference.config}"
    return RateReport(Ns, errors, fit_rate(Ns, errors), desc)
