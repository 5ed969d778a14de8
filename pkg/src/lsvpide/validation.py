"""Property suite shared by the ``validate`` command and the acceptance tests.

Random valid models, positivity sweeps over every intermediate field, EM-matrix
checks of the mixed-step factors, Picard contraction and jump oracle cross-checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .banded import BandedOperator
from .diffusion import PAIR_ORDER, Diagnostics, SolverConfig, build_mixed_factors
from .grid import Grid1D, Grid3D, build_nonuniform_grid, uniform_grid
from .jumps import IdioJumpPropagator
from .model import DiffusionParams, LocalVolSurface, MeixnerParams, ModelSpec, cosine_law_rho
from .operators import em_check, mixed_pairs
from .oracles import spectral_jump_propagate
from .pricer import InstrumentSpec, price

# Meixner rows (a, b, m, d) used for the jump cross-checks
JUMP_ROWS = {
    "S": MeixnerParams(a=0.04, b=-0.33, d=52.0, m=0.1),
    "v": MeixnerParams(a=0.02, b=-0.5, d=40.0, m=0.03),
    "r": MeixnerParams(a=0.01, b=-0.2, d=30.0, m=0.01),
    "common": MeixnerParams(a=0.03, b=-0.1, d=40.0, m=0.05),
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    failures: list = field(default_factory=list)


def random_model(rng: np.random.Generator) -> ModelSpec:
    """A valid pure-diffusion model; correlations built from the cosine law are always PSD."""
    rho_sr = rng.uniform(-0.6, 0.6)
    rho_vr = rng.uniform(-0.6, 0.6)
    rho_sv = cosine_law_rho(rho_sr, rho_vr, rng.uniform(0.0, math.pi))
    d = DiffusionParams(
        q=rng.uniform(0.0, 0.05),
        kappa_v=rng.uniform(0.5, 3.0), theta_v=rng.uniform(0.05, 1.0), xi_v=rng.uniform(0.1, 0.6),
        kappa_r=rng.uniform(0.1, 3.0), theta_r=rng.uniform(0.01, 0.08), xi_r=rng.uniform(0.02, 0.2),
        a_pow=rng.uniform(0.5, 1.0), b_pow=rng.uniform(0.5, 1.0), c_pow=rng.uniform(0.7, 1.0),
        local_vol=LocalVolSurface.constant(rng.uniform(0.5, 1.5)),
        rho_sv=rho_sv, rho_sr=rho_sr, rho_vr=rho_vr,
    )
    return ModelSpec(d, None)


def sweep_grid(n: int = 21) -> Grid3D:
    return Grid3D(build_nonuniform_grid(0.0, 300.0, n, 100.0, 20.0), uniform_grid(0.0, 3.0, n),
                  uniform_grid(0.0, 0.3, n))


def positivity_sweep(draws: int = 100, steps: int = 20, n: int = 21, seed: int = 2024,
                     cfg: SolverConfig | None = None, tol: float = 1e-12) -> CheckResult:
    """Minimum over every intermediate and final field for random models (European call)."""
    cfg = cfg or SolverConfig(dt=0.005, scheme="fully-implicit")
    rng = np.random.default_rng(seed)
    g = sweep_grid(n)
    inst = InstrumentSpec("european-call", steps * cfg.dt, 100.0)
    failures = []
    worst = math.inf
    for k in range(draws):
        model = random_model(rng)
        diag = Diagnostics()
        price(inst, model, g, cfg, diagnostics=diag)
        low = min(diag.field_min)
        worst = min(worst, low)
        if low < -tol:
            failures.append((k, low))
    return CheckResult("positivity", not failures,
                       f"{len(failures)}/{draws} draws with a negative field; worst minimum {worst:.3e}", failures)


def _line_matrices(op: BandedOperator) -> np.ndarray:
    """Every grid line of ``op`` as a dense matrix, stacked (lines, n, n)."""
    coeffs = np.moveaxis(np.broadcast_to(op.coeffs, (len(op.offsets), *op.shape)), op.axis + 1, -1)
    flat = coeffs.reshape(len(op.offsets), -1, op.size)
    n = op.size
    out = np.zeros((flat.shape[1], n, n))
    rows = np.arange(n)
    for o, c in zip(op.offsets, flat):
        ok = (rows + o >= 0) & (rows + o < n)
        out[:, rows[ok], rows[ok] + o] = c[:, ok]
    return out


def em_lines(op: BandedOperator, tol: float = 1e-12) -> tuple[bool, float]:
    """EM test of every line: positive diagonal and non-negative inverse. Returns (ok, worst entry)."""
    mats = _line_matrices(op)
    if np.any(np.diagonal(mats, axis1=1, axis2=2) <= 0):
        return False, -math.inf
    inv = np.linalg.inv(mats)
    worst = float(inv.min())
    return worst >= -tol, worst


def mixed_matrices(model: ModelSpec, g: Grid3D, cfg: SolverConfig, dt: float) -> list[tuple[str, BandedOperator]]:
    out = []
    for pair, p in zip(PAIR_ORDER, mixed_pairs(model, g, 0.0)):
        f = build_mixed_factors(p, g, dt, cfg)
        if f is None:
            continue
        tag = "svr"[pair[0]] + "svr"[pair[1]]
        out += [(f"{tag}:lhs_x", f.lhs_x), (f"{tag}:lhs_y", f.lhs_y)]
    return out


def em_suite(draws: int = 200, n: int = 21, seed: int = 7, cfg: SolverConfig | None = None) -> CheckResult:
    """EM check of the mixed-step factor matrices for random models and time steps."""
    cfg = cfg or SolverConfig(scheme="implicit-B")
    rng = np.random.default_rng(seed)
    g = sweep_grid(n)
    failures = []
    for k in range(draws):
        model = random_model(rng)
        dt = float(rng.choice([0.005, 0.01, 0.05]))
        for name, op in mixed_matrices(model, g, cfg, dt):
            ok, worst = em_lines(op)
            if not ok:
                failures.append((k, name, dt, worst))
    names = sorted({f[1] for f in failures})
    return CheckResult("em-matrices", not failures,
                       f"{len(failures)} failing matrices over {draws} draws ({', '.join(names) or 'none'})", failures)


def beta_violation_check(seed: int = 11, n: int = 21, beta_mult: float = 1.0) -> CheckResult:
    """With beta below its lower bound the EM check must flag a factor matrix."""
    cfg = SolverConfig(scheme="implicit-B", beta_mult=beta_mult, unsafe_beta=True, picard_floor=0.0)
    model = random_model(np.random.default_rng(seed))
    g = sweep_grid(n)
    flagged = [name for name, op in mixed_matrices(model, g, cfg, 0.005) if not em_check(op, (n // 2, n // 2)).is_em
               or not em_lines(op)[0]]
    return CheckResult("beta-violation", bool(flagged),
                       f"flagged: {', '.join(flagged) if flagged else 'nothing (violation not detected)'}")


def picard_check(inst: InstrumentSpec, model: ModelSpec, g: Grid3D, cfg: SolverConfig, share: float = 0.95,
                 max_iter: int = 2) -> CheckResult:
    diag = Diagnostics()
    price(inst, model, g, replace(cfg, picard_tol=1e-6), diagnostics=diag)
    got = diag.share_within(max_iter)
    conv = sum(r.converged for r in diag.picard)
    return CheckResult("picard", got >= share,
                       f"{got:.1%} of {len(diag.picard)} solves within {max_iter} iterations; {conv} converged")


def jump_oracle_check(tol: float = 1e-3, dt: float = 0.01, n: int = 201) -> CheckResult:
    """Idiosyncratic jump step against the FFT propagator on a uniform-in-log line."""
    details = []
    ok = True
    for name, p in JUMP_ROWS.items():
        x = np.linspace(-1.0, 1.0, n)
        nodes = np.exp(x)
        g = Grid3D(Grid1D(nodes), uniform_grid(1.0, 2.0, 3), uniform_grid(1.0, 2.0, 3))
        u0 = np.exp(-(x / 0.1) ** 2)
        u = np.broadcast_to(u0[:, None, None], g.shape).copy()
        got = IdioJumpPropagator(g, 0, p, dt)(u)[:, 0, 0]
        ref = spectral_jump_propagate(u0, x[1] - x[0], p.a, p.b, p.d, p.m, dt)
        inner = slice(n // 4, 3 * n // 4)
        err = float(np.abs(got[inner] - ref[inner]).max())
        ok &= err <= tol
        details.append(f"{name}={err:.1e}")
    return CheckResult("jump-oracle", ok, " ".join(details))
