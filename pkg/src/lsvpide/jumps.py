"""Meixner jump steps: the 1D idiosyncratic propagators and the 3D common-jump propagator.

Both act in logarithmic coordinates x = log(chi) on the strictly positive part
of each axis; nodes at chi = 0 are left unchanged. The log-cosine part of the
exponent is the truncated product

    prod_n [1 - T_n (grad + b/a)^2]^(-kappa) * cos(b/2)^kappa,   T_n = a^2 / (4 pi^2 (n - 1/2)^2),

with kappa = 2 d dt, each factor's power obtained by linear interpolation
between kappa = 0 (identity) and kappa = 1 (one implicit solve).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import expm
from scipy.special import polygamma

from .banded import BandedOperator
from .diffusion import SolverConfig, ValueField, build_mixed_factors, mixed_pair_solve
from .grid import Grid1D, Grid3D
from .model import JumpStructure, MeixnerParams
from .operators import MixedPair, on_axis, stencil_first_order2, stencil_second, upwind_drift

DEFAULT_TERMS = 10
INTERPOLATIONS = ("per-factor", "global")
DRIFT_MODES = ("exponential", "none")


@dataclass(frozen=True)
class JumpProductPlan:
    """Truncated-product schedule for one jump step of length ``dt``."""

    terms: int
    kappa: float  # per sub-step
    substeps: int
    dt_sub: float
    horizons: tuple[float, ...]  # T_n
    factors: tuple[float, ...]  # K_n = T_n / dt_sub^2
    scale: float  # cos(b/2)^kappa
    tail: float = 0.0  # sum of the dropped T_n, lumped into one extra factor when positive

    @property
    def all_horizons(self) -> tuple[float, ...]:
        return self.horizons + ((self.tail,) if self.tail > 0 else ())

    def describe(self) -> str:
        lines = [f"kappa={self.kappa:.6g} substeps={self.substeps} dt_sub={self.dt_sub:.6g} scale={self.scale:.8g}"]
        lines += [f"n={n + 1} T_n={t:.6e} K_n={k:.6e}" for n, (t, k) in enumerate(zip(self.horizons, self.factors))]
        if self.tail > 0:
            lines.append(f"tail T={self.tail:.6e}")
        return "\n".join(lines)


def plan_jump_product(p: MeixnerParams, dt: float, terms: int = DEFAULT_TERMS,
                      tail: bool = False) -> JumpProductPlan:
    """kappa = 2 d dt, split into equal sub-steps so that each has kappa < 1.

    With ``tail`` the factors n > terms are lumped into one extra factor of
    horizon sum_{n > terms} T_n (exact to first order in that sum).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if terms < 1:
        raise ValueError("need at least one product term")
    kappa = 2.0 * p.d * dt
    substeps = 1 if kappa < 1 else int(math.floor(kappa)) + 1
    dt_sub = dt / substeps
    k_sub = kappa / substeps
    horizons = tuple(p.a**2 / (4 * math.pi**2 * (n - 0.5) ** 2) for n in range(1, terms + 1))
    rest = float(p.a**2 / (4 * math.pi**2) * polygamma(1, terms + 0.5)) if tail else 0.0
    return JumpProductPlan(terms, k_sub, substeps, dt_sub, horizons,
                           tuple(h / dt_sub**2 for h in horizons), math.cos(p.b / 2) ** k_sub, rest)


def positive_part(g: Grid1D) -> int:
    """Index of the first strictly positive node."""
    idx = np.flatnonzero(g.nodes > 0)
    if idx.size < 3:
        raise ValueError("jump steps need at least three positive nodes")
    return int(idx[0])


def log_nodes(g: Grid1D) -> tuple[Grid1D, int]:
    start = positive_part(g)
    return Grid1D(np.log(g.nodes[start:])), start


def _sub_block(shape3: tuple[int, ...], starts: tuple[int, int, int]) -> tuple[slice, slice, slice]:
    return tuple(slice(s, None) for s in starts)  # type: ignore[return-value]


def _line_matrix_apply(mat: np.ndarray, u: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, np.moveaxis(u, axis, 0), axes=(1, 0)), 0, axis)


def drift_exponential(x: Grid1D, rate: float) -> np.ndarray:
    """exp(rate * D) with D the second-order one-sided difference on the side of the shift."""
    direction = "forward" if rate > 0 else "backward"
    d = stencil_first_order2(direction, x, fallback=True).to_dense()
    return expm(rate * d)


def _shape_along(axis: int, n: int) -> tuple[int, int, int]:
    shape = [1, 1, 1]
    shape[axis] = n
    return tuple(shape)  # type: ignore[return-value]


def _interpolate(u: np.ndarray, solved: np.ndarray, kappa: float) -> np.ndarray:
    return (1.0 - kappa) * u + kappa * solved


class IdioJumpPropagator:
    """exp(dt * phi(-i grad)) along one axis of a 3D field."""

    def __init__(self, grid: Grid3D, axis: int, p: MeixnerParams, dt: float, terms: int = DEFAULT_TERMS,
                 drift: str = "exponential", interpolation: str = "per-factor", tail: bool = True):
        if drift not in DRIFT_MODES:
            raise ValueError(f"drift must be one of {DRIFT_MODES}")
        if interpolation not in INTERPOLATIONS:
            raise ValueError(f"interpolation must be one of {INTERPOLATIONS}")
        self.axis = axis
        self.p = p
        self.plan = plan_jump_product(p, dt, terms, tail)
        self.interpolation = interpolation
        x, self.start = log_nodes(grid.axes[axis])
        n = len(x)
        self._drift = drift_exponential(x, p.m * dt) if (drift == "exponential" and p.m != 0.0) else None
        shape = _shape_along(axis, n)
        d2 = on_axis(stencil_second(x), axis)
        # (grad + b/a)^2 = grad^2 + 2(b/a) grad + (b/a)^2; the constant goes on the diagonal
        d1 = upwind_drift(np.full(shape, 2.0 * p.b / p.a), x, axis)
        gen = d2 + d1
        self.solvers: list[BandedOperator] = []
        for t_n in self.plan.all_horizons:
            c_n = t_n * (p.b / p.a) ** 2
            self.solvers.append(gen.scale(-t_n).plus_diagonal(np.full(shape, 1.0 - c_n)))

    def __call__(self, u: np.ndarray) -> np.ndarray:
        out = u.copy()
        idx = [slice(None)] * 3
        idx[self.axis] = slice(self.start, None)
        block = u[tuple(idx)]
        if self.p.d > 0:
            for _ in range(self.plan.substeps):
                block = self._log_cos_part(block)
        if self._drift is not None:
            block = _line_matrix_apply(self._drift, block, self.axis)
        out[tuple(idx)] = block
        return out

    def _log_cos_part(self, w: np.ndarray) -> np.ndarray:
        k = self.plan.kappa
        w = self.plan.scale * w
        if self.interpolation == "global":
            z = w
            for op in self.solvers:
                z = op.solve(z)
            return _interpolate(w, z, k)
        for op in self.solvers:
            w = _interpolate(w, op.solve(w), k)
        return w


class CommonJumpPropagator:
    """exp(dt * phi_Z(-i grad)) with grad = sum_k b_k grad_k.

    Each product factor is one fully implicit step of horizon T_n for
    (grad + b/a)^2: three mixed-pair solves, three 1D solves and the scalar
    factor 1 / (1 - T_n b^2 / a^2).
    """

    def __init__(self, grid: Grid3D, js: JumpStructure, dt: float, terms: int = DEFAULT_TERMS,
                 drift: str = "exponential", interpolation: str = "per-factor",
                 cfg: SolverConfig | None = None, tail: bool = True):
        if drift not in DRIFT_MODES:
            raise ValueError(f"drift must be one of {DRIFT_MODES}")
        if interpolation not in INTERPOLATIONS:
            raise ValueError(f"interpolation must be one of {INTERPOLATIONS}")
        self.js = js
        self.interpolation = interpolation
        self.cfg = replace(cfg or SolverConfig(), scheme="fully-implicit")
        p = js.common
        loads = js.loadings
        self.active = p is not None and any(b != 0.0 for b in loads) and not p.is_trivial
        if not self.active:
            return
        self.p = p
        self.plan = plan_jump_product(p, dt, terms, tail)
        logs = [log_nodes(g) for g in grid.axes]
        self.starts = tuple(s for _, s in logs)
        self.lgrid = Grid3D(*(x for x, _ in logs))
        shape = self.lgrid.shape
        self._drifts = []
        if drift == "exponential" and p.m != 0.0:
            for k, (x, _) in enumerate(logs):
                if loads[k] != 0.0:
                    self._drifts.append((k, drift_exponential(x, p.m * loads[k] * dt)))
        # per-axis generator b_k^2 d2_k + 2 (b/a) b_k d1_k
        gens = []
        for k, x in enumerate(self.lgrid.axes):
            if loads[k] == 0.0:
                gens.append(None)
                continue
            d2 = on_axis(stencil_second(x), k).scale(loads[k] ** 2)
            d1 = upwind_drift(np.full(_shape_along(k, len(x)), 2.0 * (p.b / p.a) * loads[k]), x, k)
            gens.append(d2 + d1)
        mesh_ones = [np.ones(_shape_along(k, n)) for k, n in enumerate(shape)]
        self.steps = []
        for t_n in self.plan.all_horizons:
            pairs = []
            for i, j in ((0, 1), (0, 2), (1, 2)):
                bi, bj = loads[i], loads[j]
                if bi == 0.0 or bj == 0.0:
                    pairs.append(None)
                    continue
                pair = MixedPair(i, j, float(np.sign(bi * bj)), math.sqrt(2.0) * abs(bi) * mesh_ones[i],
                                 math.sqrt(2.0) * abs(bj) * mesh_ones[j])
                pairs.append(build_mixed_factors(pair, self.lgrid, t_n, self.cfg, "B", math.sqrt(t_n)))
            ones = np.ones(shape)
            implicit = [None if gen is None else gen.scale(-t_n).plus_diagonal(ones) for gen in gens]
            c_n = t_n * (p.b / p.a) ** 2
            self.steps.append((pairs, implicit, 1.0 / (1.0 - c_n)))

    def _factor_solve(self, w: np.ndarray, step) -> np.ndarray:
        pairs, implicit, inv_c = step
        for f in pairs:
            w = mixed_pair_solve(w, f, self.cfg)
        for op in implicit:
            if op is not None:
                w = op.solve(w)
        return inv_c * w

    def _log_cos_part(self, w: np.ndarray) -> np.ndarray:
        k = self.plan.kappa
        w = self.plan.scale * w
        if self.interpolation == "global":
            z = w
            for step in self.steps:
                z = self._factor_solve(z, step)
            return _interpolate(w, z, k)
        for step in self.steps:
            w = _interpolate(w, self._factor_solve(w, step), k)
        return w

    def __call__(self, u: np.ndarray) -> np.ndarray:
        if not self.active:
            return u.copy()
        out = u.copy()
        sl = _sub_block(u.shape, self.starts)
        block = u[sl]
        if self.p.d > 0:
            for _ in range(self.plan.substeps):
                block = self._log_cos_part(block)
        for k, mat in self._drifts:
            block = _line_matrix_apply(mat, block, k)
        out[sl] = block
        return out


def idio_jump_step(v: ValueField, axis: int, p: MeixnerParams, dt: float, g: Grid3D,
                   terms: int = DEFAULT_TERMS, drift: str = "exponential",
                   interpolation: str = "per-factor", tail: bool = True) -> ValueField:
    """Idiosyncratic Meixner jump step along ``axis`` (0 = S, 1 = v, 2 = r)."""
    prop = IdioJumpPropagator(g, axis, p, dt, terms, drift, interpolation, tail)
    return ValueField(prop(v.data), v.tau)


def common_jump_step(v: ValueField, js: JumpStructure, dt: float, g: Grid3D,
                     terms: int = DEFAULT_TERMS, drift: str = "exponential",
                     interpolation: str = "per-factor", cfg: SolverConfig | None = None,
                     tail: bool = True) -> ValueField:
    """Common-factor Meixner jump step in the loading direction."""
    prop = CommonJumpPropagator(g, js, dt, terms, drift, interpolation, cfg, tail)
    return ValueField(prop(v.data), v.tau)
