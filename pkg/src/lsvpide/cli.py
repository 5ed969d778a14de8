"""Command-line front end: ``price``, ``convergence``, ``timing`` and ``validate``.

Exit status: 0 ok, 2 configuration error, 3 solver failure, 4 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .banded import SingularBandError
from .config import ConfigError, RunConfig, bundled_config_names, load_bundled, load_run_config
from .diffusion import Diagnostics, PicardError, advance
from .grid import GridError
from .pricer import SplitStepper, build_pricing_grid, price, terminal_payoff
from . import validation

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VALIDATION = 0, 2, 3, 4
THREADS_ENV = "LSVPIDE_THREADS"


class ValidationFailed(RuntimeError):
    pass


def resolve_threads(flag: int | None) -> int:
    """Worker count: the flag wins over the environment variable; default 1."""
    if flag is not None:
        return max(1, flag)
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    return 1


def _load(args) -> RunConfig:
    if args.bundled:
        cfg = load_bundled(args.bundled)
    elif args.config:
        cfg = load_run_config(args.config)
    else:
        raise ConfigError("give --config PATH or --bundled NAME")
    if args.out:
        cfg.output = Path(args.out)
    return cfg


def _write_rows(path: Path, header: list[str], rows, digest: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config-sha256 {digest}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    return repr(float(x))


# --- price -------------------------------------------------------------------------------


def cmd_price(cfg: RunConfig) -> int:
    grid = build_pricing_grid(cfg.instrument, cfg.model, cfg.grid, cfg.spot)
    diag = Diagnostics()
    started = time.perf_counter()
    surface = price(cfg.instrument, cfg.model, grid, cfg.solver, diagnostics=diag, jumps=cfg.jumps)
    seconds = time.perf_counter() - started
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    tag = f"config-sha256 {cfg.digest()}"
    surface.write_csv(out / "surface.csv", tag)
    for axis, name in ((2, "r"), (1, "v"), (0, "S")):
        surface.write_slice_csv(out / f"slice_fixed_{name}.csv", axis, cfg.spot[axis], tag)
    _write_rows(out / "picard.csv", ["t", "pair", "iterations", "final_residual", "converged"],
                ([_fmt(r.t), f"{r.pair[0]}-{r.pair[1]}", r.iterations, _fmt(r.residuals[-1] if r.residuals else 0.0),
                  int(r.converged)] for r in diag.picard), cfg.digest())
    value = surface.value_at(*cfg.spot)
    iters = [r.iterations for r in diag.picard]
    stats = f"picard solves={len(iters)} mean_iter={np.mean(iters):.2f} within2={diag.share_within(2):.1%}" \
        if iters else "picard solves=0"
    print(f"{cfg.instrument.kind} price={value:.6f} at S={cfg.spot[0]} v={cfg.spot[1]} r={cfg.spot[2]} "
          f"runtime={seconds:.2f}s {stats}")
    return EXIT_OK


# --- convergence -------------------------------------------------------------------------


def _scaled_grid(cfg: RunConfig, factor: int):
    def scale(a):
        return replace(a, n=(a.n - 1) * factor + 1)
    g = cfg.grid
    return replace(g, s=scale(g.s), v=scale(g.v), r=scale(g.r))


def _level_value(cfg: RunConfig, axis: str, k: int) -> float:
    if axis == "time":
        solver = replace(cfg.solver, dt=cfg.solver.dt / 2**k)
        spec = cfg.grid
    else:
        solver = cfg.solver
        spec = _scaled_grid(cfg, 2**k)
    grid = build_pricing_grid(cfg.instrument, cfg.model, spec, cfg.spot)
    return price(cfg.instrument, cfg.model, grid, solver, jumps=cfg.jumps).value_at(*cfg.spot)


def convergence_table(cfg: RunConfig, axis: str, levels: int, workers: int = 1) -> list[dict]:
    """Dyadic refinement of dt or of every axis; errors are taken against the finest level.

    Observed orders use successive differences, which are free of the
    bias the finest-level reference puts on the last ratios.
    """
    if axis not in ("time", "space"):
        raise ConfigError("axis must be 'time' or 'space'")
    if levels < 3:
        raise ConfigError("convergence needs at least 3 levels")
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            values = list(pool.map(_level_value, [cfg] * levels, [axis] * levels, range(levels)))
    else:
        values = [_level_value(cfg, axis, k) for k in range(levels)]
    rows = []
    for k, val in enumerate(values):
        step = cfg.solver.dt / 2**k if axis == "time" else 1.0 / ((cfg.grid.s.n - 1) * 2**k)
        order = None
        if k + 2 < levels:
            d0, d1 = abs(values[k] - values[k + 1]), abs(values[k + 1] - values[k + 2])
            if d0 > 0 and d1 > 0:
                order = math.log2(d0 / d1)
        rows.append({"level": k, "step": step, "value": val, "error": abs(val - values[-1]), "order": order})
    return rows


def cmd_convergence(cfg: RunConfig, axis: str, levels: int, workers: int) -> int:
    rows = convergence_table(cfg, axis, levels, workers)
    cfg.output.mkdir(parents=True, exist_ok=True)
    name = "dt" if axis == "time" else "h"
    _write_rows(cfg.output / f"convergence_{axis}.csv", ["level", name, "value", "error", "observed_order"],
                ([r["level"], _fmt(r["step"]), _fmt(r["value"]), _fmt(r["error"]), _fmt(r["order"])] for r in rows),
                cfg.digest())
    for r in rows:
        order = "" if r["order"] is None else f"{r['order']:.3f}"
        print(f"{name}={r['step']:.6g} value={r['value']:.8f} error={r['error']:.3e} order={order}")
    return EXIT_OK


# --- timing ------------------------------------------------------------------------------


def _best_time(fn, repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def stage_times(cfg: RunConfig, n: int, repeats: int = 2) -> tuple[int, float, float | None]:
    """(total nodes, one diffusion step, one jump stage or None) on an n^3 core grid."""
    spec = replace(cfg.grid, s=replace(cfg.grid.s, n=n), v=replace(cfg.grid.v, n=n), r=replace(cfg.grid.r, n=n))
    grid = build_pricing_grid(cfg.instrument, cfg.model, spec, cfg.spot)
    stepper = SplitStepper(cfg.instrument, cfg.model, grid, cfg.solver, jumps=cfg.jumps)
    u = terminal_payoff(cfg.instrument, grid).data
    dt = cfg.solver.dt
    T = cfg.instrument.maturity
    core = u[grid.core_slices].copy()
    advance(core, stepper.ctx, T, dt)  # warm the operator caches
    t_diff = _best_time(lambda: advance(core, stepper.ctx, T, dt), repeats)
    seq = stepper._jump_sequence(dt)
    t_jump = None
    if seq:
        def jumps():
            w = u
            for _, op in seq:
                w = op(w)
        t_jump = _best_time(jumps, repeats)
    return grid.size, t_diff, t_jump


def complexity_exponents(nodes: list[int], seconds: list[float | None]) -> list[float | None]:
    """kappa_i = log(t_i / t_{i-1}) / log(N_i / N_{i-1}); blank when undefined."""
    out: list[float | None] = [None]
    for i in range(1, len(nodes)):
        a, b = seconds[i - 1], seconds[i]
        if a is None or b is None or nodes[i] == nodes[i - 1] or a <= 0 or b <= 0:
            out.append(None)
        else:
            out.append(math.log(b / a) / math.log(nodes[i] / nodes[i - 1]))
    return out


def regression_exponent(nodes: list[int], seconds: list[float | None]) -> float | None:
    """Least-squares slope of log(seconds) against log(nodes) over all measured sizes."""
    pts = [(n, t) for n, t in zip(nodes, seconds) if t is not None and t > 0]
    if len({n for n, _ in pts}) < 2:
        return None
    x, y = np.log([p[0] for p in pts]), np.log([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])


def timing_table(cfg: RunConfig, sizes: list[int], repeats: int = 3) -> list[dict]:
    if len(sizes) < 2:
        raise ConfigError("timing needs at least two sizes")
    meas = [stage_times(cfg, n, repeats) for n in sizes]
    nodes = [m[0] for m in meas]
    kd = complexity_exponents(nodes, [m[1] for m in meas])
    kj = complexity_exponents(nodes, [m[2] for m in meas])
    rows = [{"n": n, "nodes": m[0], "diffusion_s": m[1], "jump_s": m[2], "kappa_diffusion": a, "kappa_jump": b}
            for n, m, a, b in zip(sizes, meas, kd, kj)]
    rows.append({"n": "fit", "nodes": None, "diffusion_s": None, "jump_s": None,
                 "kappa_diffusion": regression_exponent(nodes, [m[1] for m in meas]),
                 "kappa_jump": regression_exponent(nodes, [m[2] for m in meas])})
    return rows


def cmd_timing(cfg: RunConfig, sizes: list[int]) -> int:
    rows = timing_table(cfg, sizes)
    cfg.output.mkdir(parents=True, exist_ok=True)
    keys = ["n", "nodes", "diffusion_s", "jump_s", "kappa_diffusion", "kappa_jump"]
    _write_rows(cfg.output / "timing.csv", keys,
                ([r["n"], "" if r["nodes"] is None else r["nodes"]] + [_fmt(r[k]) for k in keys[2:]] for r in rows), cfg.digest())
    for r in rows:
        print("  ".join(f"{k}={'' if r[k] is None else (f'{r[k]:.4g}' if isinstance(r[k], float) else r[k])}"
                        for k in keys))
    return EXIT_OK


# --- validate ----------------------------------------------------------------------------


def validation_checks(cfg: RunConfig | None, quick: bool, seed: int) -> list[validation.CheckResult]:
    checks = []
    for name in bundled_config_names():
        load_bundled(name)
    checks.append(validation.CheckResult("bundled-configs", True, ", ".join(bundled_config_names())))
    solver = cfg.solver if cfg is not None else None
    pos_cfg = replace(solver, scheme="fully-implicit", dt=0.005) if solver is not None else None
    checks.append(validation.positivity_sweep(draws=10 if quick else 100, steps=5 if quick else 20, seed=seed,
                                              cfg=pos_cfg))
    checks.append(validation.em_suite(draws=20 if quick else 200, seed=seed + 1, cfg=solver))
    checks.append(validation.beta_violation_check(seed=seed + 2))
    if cfg is not None and not cfg.model.has_jumps:
        grid = build_pricing_grid(cfg.instrument, cfg.model, cfg.grid, cfg.spot)
        inst = replace(cfg.instrument, maturity=min(cfg.instrument.maturity, 0.1)) if quick else cfg.instrument
        checks.append(validation.picard_check(inst, cfg.model, grid, cfg.solver))
    checks.append(validation.jump_oracle_check())
    return checks


def cmd_validate(cfg: RunConfig | None, quick: bool, seed: int) -> int:
    checks = validation_checks(cfg, quick, seed)
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL'}  {c.detail}")
    if not all(c.passed for c in checks):
        raise ValidationFailed(f"{sum(not c.passed for c in checks)} of {len(checks)} checks failed")
    return EXIT_OK


# --- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsvpide", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (YAML)")
    common.add_argument("--bundled", help=f"bundled configuration: {', '.join(bundled_config_names())}")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, help=f"worker count (overrides ${THREADS_ENV})")
    common.add_argument("--seed", type=int, default=2024, help="seed for randomized checks")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("price", parents=[common], help="price the configured instrument and write CSVs")
    conv = sub.add_parser("convergence", parents=[common], help="dyadic refinement study")
    conv.add_argument("--axis", choices=("time", "space"), default="time")
    conv.add_argument("--levels", type=int, default=4)
    tim = sub.add_parser("timing", parents=[common], help="one-step wall time per grid size")
    tim.add_argument("--sizes", type=int, nargs="+", default=[31, 41, 51, 61])
    val = sub.add_parser("validate", parents=[common], help="run the property suite")
    val.add_argument("--quick", action="store_true", help="fewer random draws")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        workers = resolve_threads(args.threads)
        if args.command == "validate":
            cfg = _load(args) if (args.config or args.bundled) else None
            return cmd_validate(cfg, args.quick, args.seed)
        cfg = _load(args)
        if args.command == "price":
            return cmd_price(cfg)
        if args.command == "convergence":
            return cmd_convergence(cfg, args.axis, args.levels, workers)
        return cmd_timing(cfg, args.sizes)
    except (ConfigError, GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PicardError, SingularBandError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValidationFailed as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
