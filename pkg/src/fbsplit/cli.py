"""Command line front end: ``fbsplit {run,compare,rate,validate}``.

Configuration is a flat ``key = value`` file; ``[section]`` headers are
allowed for grouping but every key lives in one namespace.  Results are
written as CSV with 17 significant digits, staged to a temporary file and
renamed into place.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .diffusion import MERGE_RULES
from .errors import (CFLError, ConfigError, FBSplitError, GridMismatchError,
                     StructuralViolation)
from .grids import EGrid, PBox, SubGrid, TimeGrid, cfl_certificate, default_box, min_emission_rate
from .models import MODELS, ModelSpec, validate_class
from .neuralreg import TrainConfig
from .splitting import (SchemeResult, l1_error, linf_error, rate_experiment,
                        run_alt_scheme, run_nn_scheme, run_proxy)

log = logging.getLogger("fbsplit")


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.replace(",", " ").split()]


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _opt_str(text: str) -> Optional[str]:
    text = text.strip()
    return None if text.lower() in ("", "none", "auto") else text


# key -> (parser, default)
KEYS: dict[str, tuple[Callable, object]] = {
    "model": (str, "linear"),
    "dim": (int, 1),
    "sigma": (float, 1.0),
    "cap": (float, 0.0),
    "theta": (float, 1.0),
    "gbm_drift": (float, 0.0),
    "horizon": (float, 1.0),
    "J": (int, 200),
    "K": (int, 20),
    "N": (int, 16),
    "e_min": (_opt_float, None),
    "e_max": (_opt_float, None),
    "B": (_opt_float, None),
    "transport": (_opt_str, None),
    "M": (int, 1000),
    "merge": (str, "mean"),
    "paths": (int, 10000),
    "seed": (int, 0),
    "lr": (float, 1e-3),
    "batch_size": (int, 50),
    "batches_per_epoch": (int, 100),
    "val_size": (int, 500),
    "val_every": (int, 30),
    "patience": (int, 5),
    "max_iters": (int, 3000),
    "nn_seed": (int, 0),
    "scheme": (str, "nn"),
    "proxy_N": (int, 64),
    "proxy_M": (int, 3500),
    "rate_Ns": (_int_list, [4, 8, 16, 32, 64]),
    "rate_ref_N": (int, 256),
    "memory_budget_mb": (float, 4096.0),
    "out_dir": (str, "."),
    "label": (str, "run"),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def model(self) -> ModelSpec:
        cfg = dict(self.values, degenerate=self.values["sigma"] == 0)
        try:
            return MODELS[self.values["model"]](cfg)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def grid(self, model: ModelSpec) -> EGrid:
        lo = self.values["e_min"] if self.values["e_min"] is not None else model.e_range[0]
        hi = self.values["e_max"] if self.values["e_max"] is not None else model.e_range[1]
        try:
            return EGrid(self.values["J"], lo, hi)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def box(self, model: ModelSpec) -> PBox:
        if self.values["B"] is None:
            return default_box(model)
        try:
            return PBox(self.values["B"], positive=model.positive_state)
        except ValueError as exc:
            raise ConfigError(f"B: {exc}") from exc

    def train(self) -> TrainConfig:
        return TrainConfig(**{k: self.values[k] for k in (
            "lr", "batch_size", "batches_per_epoch", "val_size", "val_every",
            "patience", "max_iters")}, seed=self.values["nn_seed"])

    def transport(self) -> str:
        t = self.values["transport"]
        if self.values["scheme"] == "alt":
            return "spd"
        return t or "upwind"


def parse_config_text(text: str) -> dict:
    """Raw ``key -> string`` mapping; duplicate and unknown keys are errors."""
    parser = configparser.ConfigParser(interpolation=None, strict=True,
                                       default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string("[__root__]\n" + text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    raw: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section, raw=True):
            if key in raw:
                raise ConfigError(f"duplicate key {key!r}")
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            raw[key] = value
    return raw


def resolve_config(raw: dict, overrides: Optional[dict] = None) -> RunConfig:
    values = {}
    for key, (conv, default) in KEYS.items():
        if key in raw:
            try:
                values[key] = conv(raw[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {raw[key]!r}") from exc
        else:
            values[key] = default
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    _validate(values)
    return RunConfig(values)


def _validate(v: dict) -> None:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"{key}: {msg}")

    need(v["model"] in MODELS, "model", f"expected one of {sorted(MODELS)}")
    need(v["scheme"] in ("nn", "alt"), "scheme", "expected nn or alt")
    need(v["merge"] in MERGE_RULES, "merge", f"expected one of {MERGE_RULES}")
    if v["transport"] is not None:
        need(v["transport"] in ("lf", "upwind", "spd"), "transport",
             "expected lf, upwind or spd")
        if v["scheme"] == "nn":
            need(v["transport"] != "spd", "transport", "the nn scheme needs lf or upwind")
        else:
            need(v["transport"] == "spd", "transport", "the alt scheme transports particles (spd)")
    for key in ("dim", "J", "K", "N", "M", "paths", "batch_size", "batches_per_epoch",
                "val_size", "val_every", "patience", "max_iters", "proxy_N", "proxy_M",
                "rate_ref_N"):
        need(v[key] >= 1, key, "must be a positive integer")
    need(v["J"] >= 3, "J", "need at least 3 grid nodes")
    need(v["sigma"] >= 0 and math.isfinite(v["sigma"]), "sigma", "must be >= 0")
    need(v["horizon"] > 0, "horizon", "must be > 0")
    need(v["theta"] > 0, "theta", "must be > 0")
    need(v["lr"] > 0, "lr", "must be > 0")
    need(v["memory_budget_mb"] > 0, "memory_budget_mb", "must be > 0")
    need(v["seed"] >= 0 and v["nn_seed"] >= 0, "seed", "seeds must be non-negative")
    if v["B"] is not None:
        need(v["B"] > 0, "B", "must be > 0")
    if v["e_min"] is not None and v["e_max"] is not None:
        need(v["e_min"] < v["e_max"], "e_max", "must exceed e_min")
    Ns = v["rate_Ns"]
    need(len(Ns) >= 3, "rate_Ns", "need at least three values")
    need(all(a < b for a, b in zip(Ns, Ns[1:])), "rate_Ns", "must be strictly increasing")
    need(Ns[0] >= 1, "rate_Ns", "values must be positive")
    need(v["rate_ref_N"] > Ns[-1], "rate_ref_N", "must exceed every value of rate_Ns")


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return resolve_config(parse_config_text(text), overrides)


# ---------------------------------------------------------------------------
# output


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path: Path, header: list[str], rows) -> None:
    """Render the whole table in memory, then atomically replace ``path``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) for x in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_solution(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["e", "value"]:
        raise ConfigError(f"{path} is not a solution table (expected header e,value)")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    return data[:, 0], data[:, 1]


def _meta_runtime(solution_path: Path) -> float:
    meta = solution_path.with_name(solution_path.name.replace("_solution.csv", "_meta.csv"))
    if meta == solution_path or not meta.exists():
        return float("nan")
    with open(meta, newline="") as fh:
        for row in csv.reader(fh):
            if len(row) == 2 and row[0] == "runtime_s":
                return float(row[1])
    return float("nan")


# ---------------------------------------------------------------------------
# commands


def execute(cfg: RunConfig) -> SchemeResult:
    model = cfg.model()
    grid = cfg.grid(model)
    if cfg["scheme"] == "alt":
        return run_alt_scheme(model, cfg["N"], cfg["M"], grid,
                              cfg["memory_budget_mb"], cfg["merge"])
    return run_nn_scheme(model, grid, cfg["N"], cfg["K"], cfg.box(model),
                         cfg.transport(), cfg.train(), cfg["seed"], cfg["paths"])


def execute_proxy(cfg: RunConfig, N: Optional[int] = None) -> SchemeResult:
    model = cfg.model()
    return run_proxy(model, cfg.grid(model), N or cfg["proxy_N"], cfg["proxy_M"],
                     cfg["memory_budget_mb"], cfg["merge"])


def write_result(cfg: RunConfig, res: SchemeResult) -> tuple[Path, Path]:
    out = Path(cfg["out_dir"])
    label = cfg["label"]
    sol = out / f"{label}_solution.csv"
    meta = out / f"{label}_meta.csv"
    write_csv(sol, ["e", "value"], zip(res.grid.nodes, res.values))
    rows = [(k, _render(cfg[k])) for k in sorted(KEYS)]
    rows += [("resolved_scheme", res.scheme), ("resolved_transport", cfg.transport()),
             ("resolved_e_min", res.grid.e_min), ("resolved_e_max", res.grid.e_max),
             ("monotonicity_defect", res.monotonicity_defect)]
    for k in ("cfl", "box", "iterations"):
        if k in res.config:
            rows.append((f"resolved_{k}", _render(res.config[k])))
    rows.append(("runtime_s", res.runtime))
    write_csv(meta, ["key", "value"], rows)
    return sol, meta


def _render(v) -> str:
    if isinstance(v, (list, tuple)):
        return " ".join(fmt(x) for x in v)
    return "none" if v is None else fmt(v)


def cmd_run(cfg: RunConfig) -> int:
    res = execute(cfg)
    sol, _ = write_result(cfg, res)
    print(f"wrote {sol} ({res.scheme}, {res.runtime:.2f} s)")
    return 0


def _load_operand(spec: str, overrides: dict, base: Optional[RunConfig]):
    """(e, values, runtime) from a solution CSV, a config file, or 'proxy'."""
    if spec == "proxy":
        if base is None:
            raise ConfigError("'proxy' needs a config as the first operand")
        res = execute_proxy(base)
        return res.grid.nodes, res.values, res.runtime, res.grid, base
    path = Path(spec)
    if path.name.endswith("_solution.csv"):
        e, v = read_solution(path)
        return e, v, _meta_runtime(path), None, None
    cfg = load_config(path, overrides)
    res = execute(cfg)
    return res.grid.nodes, res.values, res.runtime, res.grid, cfg


def cmd_compare(a: str, b: str, overrides: dict, out_dir: Optional[str],
                label: Optional[str]) -> int:
    ea, va, ta, ga, cfg_a = _load_operand(a, overrides, None)
    eb, vb, tb, gb, _ = _load_operand(b, overrides, cfg_a)
    if ga is not None and gb is not None and ga != gb:
        raise GridMismatchError(f"grids differ: {ga} vs {gb}")
    if ea.shape != eb.shape or not np.array_equal(ea, eb):
        raise GridMismatchError("the two solutions live on different e-grids")
    diff = np.abs(va - vb)
    delta = ea[1] - ea[0] if ga is None else ga.delta
    l1 = float(delta * diff.sum())
    linf = float(diff.max())
    out = Path(out_dir or (cfg_a["out_dir"] if cfg_a else "."))
    label = label or (cfg_a["label"] if cfg_a else "compare")
    write_csv(out / f"{label}_compare.csv", ["e", "value_a", "value_b", "abs_diff"],
              zip(ea, va, vb, diff))
    write_csv(out / f"{label}_compare_summary.csv", ["l1", "linf", "runtime_a_s", "runtime_b_s"],
              [(l1, linf, ta, tb)])
    print(f"l1={l1:.6g} linf={linf:.6g}")
    return 0


RateRunner = Callable[[RunConfig, int, SchemeResult], SchemeResult]


def cmd_rate(cfg: RunConfig, rate_runner: Optional[RateRunner] = None) -> int:
    reference = execute_proxy(cfg, cfg["rate_ref_N"])
    if rate_runner is None:
        def runner(n):
            return execute(RunConfig(dict(cfg.values, N=n)))
    else:
        def runner(n):
            return rate_runner(cfg, n, reference)
    report = rate_experiment(cfg["rate_Ns"], reference, runner)
    out = Path(cfg["out_dir"]) / f"{cfg['label']}_rate.csv"
    rows = [(n, err) for n, err in zip(report.Ns, report.errors)]
    rows.append(("slope", report.slope))
    write_csv(out, ["N", "l1"], rows)
    print(f"wrote {out} (slope {report.slope:.4f})")
    return 0


def validation_report(cfg: RunConfig, model: Optional[ModelSpec] = None) -> tuple[list[str], int]:
    """Human-readable structural and CFL checks, and the exit code they imply."""
    model = model or cfg.model()
    box = cfg.box(model)
    grid = cfg.grid(model)
    lines = []
    rep = validate_class(model, box)
    lines.append(f"model {model.name} d={model.dim} box=[{box.lo:g}, {box.hi:g}]^{model.dim}")
    lines.append(f"  l1={rep.l1:.4g} l2={rep.l2:.4g} "
                 f"mu_lipschitz={rep.mu_lipschitz:.4g} phi_lipschitz={rep.phi_lipschitz:.4g}")
    for v in rep.violations:
        lines.append(f"  FAIL class condition: {v}")
    code = 0 if rep.ok else StructuralViolation.exit_code
    if cfg["scheme"] == "nn":
        tg = TimeGrid(cfg["N"], model.horizon)
        sub = SubGrid(cfg["K"], tg.h)
        c = cfl_certificate(model, box, grid, sub)
        ok = c < 1
        lines.append(f"  CFL c* = {c:.6g} ({'pass' if ok else 'FAIL: c* >= 1'})")
        if cfg.transport() == "upwind":
            mu_min = min_emission_rate(model, box)
            lines.append(f"  min mu on box = {mu_min:.6g} "
                         f"({'pass' if mu_min >= 0 else 'FAIL: upwind needs mu >= 0'})")
            ok = ok and mu_min >= 0
        if not ok and code == 0:
            code = CFLError.exit_code
    lines.append("all checks pass" if code == 0 else "validation failed")
    return lines, code


def cmd_validate(cfg: RunConfig) -> int:
    lines, code = validation_report(cfg)
    print("\n".join(lines))
    return code


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fbsplit", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="key = value config file")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="Monte-Carlo seed (overrides seed)")
        p.add_argument("--threads", type=int, help="cap on BLAS worker threads")
        p.add_argument("--label", help="output file prefix (overrides label)")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("run", help="run one scheme and write its solution table"))
    p = sub.add_parser("compare", help="compare two runs or solution tables")
    common(p, config_required=False)
    p.add_argument("a", help="config file or <label>_solution.csv")
    p.add_argument("b", help="config file, <label>_solution.csv, or 'proxy'")
    common(sub.add_parser("rate", help="empirical convergence rate in N"))
    common(sub.add_parser("validate", help="structural and CFL checks for a config"))
    return ap


def main(argv=None, rate_runner: Optional[RateRunner] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return ConfigError.exit_code
    overrides = {"out_dir": args.out, "seed": args.seed, "label": args.label}
    try:
        limiter = None
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=args.threads)
        try:
            if args.command == "compare":
                if args.config is not None:
                    raise ConfigError("compare takes its configs as positional operands")
                return cmd_compare(args.a, args.b, {"seed": args.seed}, args.out, args.label)
            cfg = load_config(args.config, overrides)
            if args.command == "run":
                return cmd_run(cfg)
            if args.command == "rate":
                return cmd_rate(cfg, rate_runner)
            return cmd_validate(cfg)
        finally:
            if limiter is not None:
                limiter.unregister()
    except FBSplitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
