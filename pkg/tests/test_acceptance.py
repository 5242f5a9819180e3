"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Expensive runs are cached so the class-K invariant (9) and the determinism
check (10) reuse the results of criteria 5 to 8 as first runs.
"""

import functools
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from fbsplit.cli import write_csv
from fbsplit.diffusion import cubature_increments
from fbsplit.grids import EGrid, SubGrid, cfl_certificate, default_box
from fbsplit.models import make_bm_positive_model, make_linear_model, make_multiplicative_model
from fbsplit.splitting import (deterministic_composition, l1_error, linf_error,
                               rate_experiment, run_alt_scheme, run_nn_scheme, run_proxy)
from fbsplit.transport import (BoundaryLayerWarning, cdf_eval, lax_friedrichs,
                               spd_transport, upwind)

from oracles import constant_rate_model, measured_order, sigmoid, sigmoid_quantiles
from test_neuralreg import gradient_check
from test_transport import _random_monotone

pytestmark = pytest.mark.filterwarnings("ignore::fbsplit.transport.BoundaryLayerWarning")


def _timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start


def _write_solution(path: Path, res) -> bytes:
    write_csv(path, ["e", "value"], zip(res.grid.nodes, res.values))
    return path.read_bytes()


def _write_table(path: Path, header, rows) -> bytes:
    write_csv(path, header, rows)
    return path.read_bytes()


# ---------------------------------------------------------------------------
# 1: advection oracle

ADVECTION_JS = (400, 800, 1600)
ADVECTION_H = 0.2


def advection_study():
    rows, orders = [], {}
    for name, op, c in (("upwind", upwind, 0.5), ("lf", lax_friedrichs, 0.5),
                        ("lf", lax_friedrichs, -0.5)):
        m = constant_rate_model(c)
        deltas, errs = [], []
        for J in ADVECTION_JS:
            g = EGrid(J, -3.0, 3.0)
            K = int(np.ceil(abs(c) * ADVECTION_H / (0.5 * g.delta)))  # c* = 0.5
            out = op(m, np.zeros(1), sigmoid(g.nodes), SubGrid(K, ADVECTION_H), g)
            err = float(np.max(np.abs(out - sigmoid(g.nodes + c * ADVECTION_H))))
            deltas.append(g.delta)
            errs.append(err)
            rows.append((name, c, J, K, err))
        orders[(name, c)] = (measured_order(deltas, errs), errs)
    M = 4000
    g = EGrid(ADVECTION_JS[-1], -3.0, 3.0)
    spd = {}
    for c in (-0.5, 0.5):
        parts = spd_transport(constant_rate_model(c), np.zeros(1), sigmoid_quantiles(M),
                              ADVECTION_H)
        exact = sigmoid(g.nodes + c * ADVECTION_H)
        spd[c] = float(g.delta * np.abs(cdf_eval(parts, g.nodes) - exact).sum())
        rows.append(("spd", c, g.J, M, spd[c]))
    return orders, spd, 2.0 / M * g.width, rows


def test_criterion_1_advection_oracle(record, tmp_path):
    (orders, spd, spd_bound, rows), runtime = _timed(advection_study)
    _write_table(tmp_path / "advection.csv", ["scheme", "c", "J", "K_or_M", "error"], rows)
    ok_fd = all(o >= 0.8 and all(np.diff(e) < 0) for o, e in orders.values())
    ok_spd = all(v <= spd_bound for v in spd.values())
    ok = ok_fd and ok_spd and runtime < 10
    detail = ", ".join(f"{n}{c:+g} order {o:.3f}" for (n, c), (o, _) in orders.items())
    detail += f"; spd L1 max {max(spd.values()):.2e} <= {spd_bound:.2e}; {runtime:.1f} s"
    detail += " (upwind at c=-0.5 is refused: it needs mu >= 0)"
    assert record(1, ok, detail), detail


# ---------------------------------------------------------------------------
# 2: monotone-scheme property suite

PROPERTY_CASES = (("linear", lax_friedrichs), ("bm_positive", upwind),
                  ("multiplicative", upwind))
PROPERTY_INPUTS = 10_000


def property_suite():
    models = {"linear": make_linear_model(2, 1.0), "bm_positive": make_bm_positive_model(2, 1.0),
              "multiplicative": make_multiplicative_model(2, sigma=0.3)}
    rows = []
    J, K = 30, 2
    g = EGrid(J, -2, 2)
    for idx, (name, op) in enumerate(PROPERTY_CASES):
        model = models[name]
        rng = np.random.default_rng(100 + idx)
        box = default_box(model)
        if model.positive_state:
            p = np.exp(0.3 * rng.normal(size=(PROPERTY_INPUTS, model.dim)))
        else:
            p = np.clip(rng.normal(size=(PROPERTY_INPUTS, model.dim)), box.lo, box.hi)
        sub = SubGrid(K, 0.9 / cfl_certificate(model, box, g, SubGrid(K, 1.0)))
        a = _random_monotone(rng, PROPERTY_INPUTS, J)
        b = _random_monotone(rng, PROPERTY_INPUTS, J)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryLayerWarning)
            oa = op(model, p, a, sub, g, clamp=False)
            ob = op(model, p, b, sub, g, clamp=False)
        max_principle = int(np.sum(np.any((oa > a.max(1, keepdims=True))
                                          | (oa < a.min(1, keepdims=True)), axis=1)))
        monotone = int(np.sum(np.any(np.diff(oa, axis=1) < 0, axis=1)))
        excess = np.abs(oa - ob).sum(1) - np.abs(a - b).sum(1)
        l1 = int(np.sum(excess > 0))
        rows.append((f"{name}-{op.__name__}", max_principle, monotone, l1,
                     float(max(excess.max(), 0.0))))
    rng = np.random.default_rng(200)
    unsorted = 0
    for model in models.values():
        for _ in range(PROPERTY_INPUTS // 10):
            M = int(rng.integers(1, 200))
            parts = np.sort(rng.uniform(-3, 3, size=M))
            pbar = np.exp(rng.normal(size=model.dim)) if model.positive_state \
                else rng.normal(size=model.dim)
            out = spd_transport(model, pbar, parts, float(rng.uniform(0, 2)))
            unsorted += int(np.any(np.diff(out) < 0))
    rows.append(("spd", 0, unsorted, 0, 0.0))
    return rows


def test_criterion_2_monotone_scheme_properties(record, tmp_path):
    rows, runtime = _timed(property_suite)
    _write_table(tmp_path / "properties.csv",
                 ["case", "max_principle_violations", "monotonicity_violations",
                  "l1_violations", "max_l1_excess"], rows)
    ok = all(r[1] == 0 and r[2] == 0 and r[3] == 0 for r in rows) and runtime < 60
    detail = "; ".join(f"{r[0]}: maxp {r[1]}, mono {r[2]}, L1 {r[3]} (excess {r[4]:.1e})"
                       for r in rows[:-1])
    detail += f"; spd unsorted {rows[-1][2]}; {runtime:.1f} s"
    assert record(2, ok, detail), detail


# ---------------------------------------------------------------------------
# 3: cubature exactness


def cubature_table():
    rows = []
    h = 0.037
    for d in range(1, 17):
        pts, probs = cubature_increments(d, h)
        mean_err = float(np.max(np.abs(probs @ pts)))
        cov_err = float(np.max(np.abs(np.einsum("i,ij,ik->jk", probs, pts, pts) - h * np.eye(d))))
        rows.append((d, mean_err, cov_err))
    return rows


def test_criterion_3_cubature_exactness(record, tmp_path):
    rows, runtime = _timed(cubature_table)
    _write_table(tmp_path / "cubature.csv", ["d", "mean_err", "cov_err"], rows)
    worst = max(max(r[1], r[2]) for r in rows)
    ok = worst <= 1e-14 and runtime < 1
    detail = f"worst moment error {worst:.1e} over d=1..16; {runtime:.3f} s"
    assert record(3, ok, detail), detail


# ---------------------------------------------------------------------------
# 4: gradient check


def test_criterion_4_gradient_check(record):
    worst, runtime = _timed(lambda: max(gradient_check(seed) for seed in range(3)))
    ok = worst <= 1e-5 and runtime < 5
    detail = f"max relative error {worst:.1e}; {runtime:.2f} s"
    assert record(4, ok, detail), detail


# ---------------------------------------------------------------------------
# 5: sigma = 0 composition identity

C5 = dict(N=8, J=100, K=20)


def run_criterion_5(seed=0):
    m = make_bm_positive_model(2, 0.0, degenerate=True)
    grid = EGrid(C5["J"], *m.e_range)
    res = run_nn_scheme(m, grid, C5["N"], C5["K"], transport="upwind", seed=seed)
    oracle = deterministic_composition(m, grid, C5["N"], C5["K"], "upwind")
    return res, oracle


@functools.lru_cache(maxsize=None)
def criterion_5_cached():
    return _timed(run_criterion_5)


def test_criterion_5_zero_noise_composition(record):
    (res, oracle), runtime = criterion_5_cached()
    err = float(np.max(np.abs(res.values - oracle)))
    ok = err <= 1e-3 and runtime < 600
    detail = f"Linf vs deterministic composition {err:.2e}; {runtime:.1f} s"
    assert record(5, ok, detail), detail


# ---------------------------------------------------------------------------
# 6: cross-scheme agreement


def run_criterion_6():
    m = make_bm_positive_model(2, 0.3)
    grid = EGrid(400, *m.e_range)
    return run_alt_scheme(m, 16, 1000, grid), run_proxy(m, grid, N=64, M=3500)


@functools.lru_cache(maxsize=None)
def criterion_6_cached():
    return _timed(run_criterion_6)


def test_criterion_6_cross_scheme_agreement(record):
    (alt, proxy), runtime = criterion_6_cached()
    l1 = l1_error(alt, proxy)
    ok = l1 <= 0.05 and runtime < 300
    detail = f"alt (d=2, M=1000, N=16) vs proxy L1 {l1:.2e}; {runtime:.1f} s"
    assert record(6, ok, detail), detail


# ---------------------------------------------------------------------------
# 7: scaled reproduction of the high-dimensional table

C7 = dict(d=3, J=150, N=32, K=20)
C7_SEEDS = (0, 1, 2)
C7_MODELS = {"linear": (lambda: make_linear_model(C7["d"], 1.0), "lf"),
             "bm_positive": (lambda: make_bm_positive_model(C7["d"], 0.3), "upwind")}


def run_criterion_7(name, seed):
    factory, transport = C7_MODELS[name]
    m = factory()
    grid = EGrid(C7["J"], *m.e_range)
    return run_nn_scheme(m, grid, C7["N"], C7["K"], transport=transport, seed=seed)


@functools.lru_cache(maxsize=None)
def criterion_7_proxy(name):
    m = C7_MODELS[name][0]()
    return run_proxy(m, EGrid(C7["J"], *m.e_range))


@functools.lru_cache(maxsize=None)
def criterion_7_cached(name, seed):
    return run_criterion_7(name, seed)


def test_criterion_7_scaled_table(record):
    start = time.perf_counter()
    parts, ok = [], True
    for name in C7_MODELS:
        proxy = criterion_7_proxy(name)
        for seed in C7_SEEDS:
            res = criterion_7_cached(name, seed)
            l1, linf = l1_error(res, proxy), linf_error(res, proxy)
            passed = l1 <= 0.10 and linf <= 0.15
            ok &= passed
            parts.append(f"{name}/{C7_MODELS[name][1]} seed {seed}: L1 {l1:.3f} "
                         f"Linf {linf:.3f} {'ok' if passed else 'miss'}")
    runtime = time.perf_counter() - start
    ok &= runtime < 45 * 60
    detail = "; ".join(parts) + f"; {runtime:.0f} s"
    assert record(7, ok, detail), detail


# ---------------------------------------------------------------------------
# 8: convergence rate of the alternative scheme

C8_NS = (4, 8, 16, 32, 64)


def run_criterion_8():
    m = make_multiplicative_model(1, sigma=0.3)
    grid = EGrid(400, *m.e_range)
    reference = run_alt_scheme(m, 256, 3500, grid)
    results = {}

    def runner(n):
        results[n] = run_alt_scheme(m, n, 3500, grid)
        return results[n]

    return rate_experiment(C8_NS, reference, runner), results


@functools.lru_cache(maxsize=None)
def criterion_8_cached():
    return _timed(run_criterion_8)


def _rate_rows(report):
    return [(n, e) for n, e in zip(report.Ns, report.errors)] + [("slope", report.slope)]


def test_criterion_8_convergence_rate(record):
    (report, _), runtime = criterion_8_cached()
    decreasing = all(a > b for a, b in zip(report.errors, report.errors[1:]))
    ok = -1.3 <= report.slope <= -0.4 and decreasing and runtime < 600
    detail = (f"slope {report.slope:.3f}, errors "
              + " ".join(f"{e:.2e}" for e in report.errors)
              + f", decreasing={decreasing}; {runtime:.1f} s")
    assert record(8, ok, detail), detail


# ---------------------------------------------------------------------------
# 9: class-K output invariant across criteria 5 to 8


def _class_k(values):
    v = np.asarray(values)
    return bool(np.all(np.diff(v) >= 0) and v.min() >= 0 and v.max() <= 1)


def test_criterion_9_class_k_outputs(record):
    results = {"5": criterion_5_cached()[0][0]}
    alt, proxy = criterion_6_cached()[0]
    results.update({"6-alt": alt, "6-proxy": proxy})
    for name in C7_MODELS:
        results[f"7-{name}-proxy"] = criterion_7_proxy(name)
        for seed in C7_SEEDS:
            results[f"7-{name}-{seed}"] = criterion_7_cached(name, seed)
    for n, res in criterion_8_cached()[0][1].items():
        results[f"8-N{n}"] = res
    bad = [k for k, r in results.items() if not _class_k(r.values)]
    nn_defects = {k: r.monotonicity_defect for k, r in results.items() if r.scheme == "nn"}
    worst = max(nn_defects.values())
    ok = not bad and worst <= 0.02
    detail = (f"{len(results)} results, non-class-K: {bad or 'none'}; "
              f"max nn pre-projection defect {worst:.2e}")
    assert record(9, ok, detail), detail


# ---------------------------------------------------------------------------
# 10: determinism


def test_criterion_10_determinism(record, tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    same = {}

    def pair(key, render):
        same[key] = render(first) == render(second)

    adv = [advection_study()[3] for _ in range(2)]
    same["1"] = (_write_table(first / "c1.csv", ["s", "c", "J", "K", "err"], adv[0])
                 == _write_table(second / "c1.csv", ["s", "c", "J", "K", "err"], adv[1]))
    props = [property_suite() for _ in range(2)]
    same["2"] = (_write_table(first / "c2.csv", ["case", "a", "b", "c", "d"], props[0])
                 == _write_table(second / "c2.csv", ["case", "a", "b", "c", "d"], props[1]))
    cub = [cubature_table() for _ in range(2)]
    same["3"] = (_write_table(first / "c3.csv", ["d", "m", "c"], cub[0])
                 == _write_table(second / "c3.csv", ["d", "m", "c"], cub[1]))

    res5 = [criterion_5_cached()[0][0], run_criterion_5()[0]]
    same["5"] = (_write_solution(first / "c5.csv", res5[0])
                 == _write_solution(second / "c5.csv", res5[1]))
    runs6 = [criterion_6_cached()[0], run_criterion_6()]
    same["6"] = all(_write_solution(first / f"c6_{i}.csv", runs6[0][i])
                    == _write_solution(second / f"c6_{i}.csv", runs6[1][i]) for i in range(2))
    for name in C7_MODELS:
        again = run_criterion_7(name, 0)
        same[f"7-{name}"] = (_write_solution(first / f"c7_{name}.csv", criterion_7_cached(name, 0))
                             == _write_solution(second / f"c7_{name}.csv", again))
    rates = [criterion_8_cached()[0][0], run_criterion_8()[0]]
    same["8"] = (_write_table(first / "c8.csv", ["N", "l1"], _rate_rows(rates[0]))
                 == _write_table(second / "c8.csv", ["N", "l1"], _rate_rows(rates[1])))
    ok = all(same.values())
    detail = "byte-identical reruns: " + ", ".join(f"{k} {'yes' if v else 'NO'}"
                                                 for k, v in same.items())
    assert record(10, ok, detail), detail
