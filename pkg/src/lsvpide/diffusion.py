"""Time stepping for the convection-diffusion part: HV splitting and implicit mixed-derivative steps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .banded import BandedOperator
from .grid import Grid3D
from .model import ModelSpec, at_time
from .operators import (
    DiffusionOperators,
    MixedPair,
    assemble_operators,
    mixed_pairs,
    on_axis,
    stencil_first_order,
    stencil_first_order2,
)

SCHEMES = ("hv-explicit-mixed", "implicit-A", "implicit-B", "fully-implicit")

# fixed order of the three mixed-pair solves
PAIR_ORDER = ((0, 1), (0, 2), (1, 2))


class PicardError(RuntimeError):
    """Picard iteration hit its cap with the residual above tolerance."""


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 0.005
    theta: float = 0.8
    beta_mult: float = 10.0
    picard_tol: float = 1e-6
    picard_max: int = 10
    scheme: str = "implicit-B"
    rannacher_steps: int = 0
    discounting: bool = True
    convection_order: int = 2
    # printed first-order stencils in alpha for scheme B with negative correlation
    literal_fd23: bool = False
    # raise PicardError instead of logging when the cap is hit
    strict_picard: bool = False
    # start each Picard solve from the same solve's result in the previous step
    warm_start: bool = False
    # allow beta_mult <= 3/2, for deliberate violation studies
    unsafe_beta: bool = False
    # lower bound on P and Q keeping the Picard map contractive
    picard_floor: float = 2.0
    # right-hand side of the Picard map: "alpha" applies alpha to V(tau) and
    # subtracts V^k; "iterate" applies the bracket (PQ - 1) + ... to V^k instead
    picard_rhs: str = "alpha"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if not self.unsafe_beta and not self.beta_mult > 1.5:
            raise ValueError("beta_mult must exceed 3/2")
        if not self.beta_mult > 0:
            raise ValueError("beta_mult must be positive")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.picard_max < 1:
            raise ValueError("picard_max must be at least 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.convection_order not in (1, 2):
            raise ValueError("convection_order must be 1 or 2")
        if self.picard_rhs not in ("alpha", "iterate"):
            raise ValueError("picard_rhs must be 'alpha' or 'iterate'")
        if self.picard_floor < 0:
            raise ValueError("picard_floor must be non-negative")
        if self.rannacher_steps < 0:
            raise ValueError("rannacher_steps must be non-negative")

    @property
    def mixed_variant(self) -> str:
        return "B" if self.scheme in ("implicit-B", "fully-implicit") else "A"


@dataclass
class ValueField:
    """Option values on the grid at backward time ``tau``."""

    data: np.ndarray
    tau: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("value field has non-finite entries")


# --- diagnostics ---------------------------------------------------------------


@dataclass
class PicardRecord:
    t: float
    pair: tuple[int, int]
    iterations: int
    residuals: list[float]
    converged: bool


@dataclass
class Diagnostics:
    picard: list[PicardRecord] = field(default_factory=list)
    field_min: list[float] = field(default_factory=list)
    # optional per-stage hook (name, field); used by positivity sweeps
    observer: Callable[[str, np.ndarray], None] | None = None

    def observe(self, name: str, u: np.ndarray) -> None:
        self.field_min.append(float(u.min()))
        if self.observer is not None:
            self.observer(name, u)

    def share_within(self, iterations: int) -> float:
        if not self.picard:
            return 1.0
        return sum(r.iterations <= iterations for r in self.picard) / len(self.picard)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "pair", "iterations", "final_residual", "converged"])
            for r in self.picard:
                w.writerow([r.t, f"{r.pair[0]}-{r.pair[1]}", r.iterations,
                            r.residuals[-1] if r.residuals else 0.0, int(r.converged)])


# --- operator cache ------------------------------------------------------------


def _coefficient_key(model: ModelSpec, t: float) -> tuple:
    d = model.diffusion
    lv = d.local_vol
    lv_key = int(np.searchsorted(lv.t_nodes, t)) if len(lv.t_nodes) > 1 else 0
    vals = tuple(at_time(getattr(d, n), t) for n in ("kappa_v", "theta_v", "xi_v", "kappa_r", "theta_r", "xi_r"))
    # an interpolated local-vol surface changes with t inside an interval
    exact_t = t if len(lv.t_nodes) > 1 else None
    return vals + (lv_key, exact_t)


class StepContext:
    """Model, grid and configuration for a run, with cached operators per time."""

    def __init__(self, model: ModelSpec, grid: Grid3D, cfg: SolverConfig,
                 extra_drift: tuple[float, float, float] = (0.0, 0.0, 0.0),
                 diagnostics: Diagnostics | None = None, frozen_s: np.ndarray | None = None):
        self.model = model
        self.frozen_s = frozen_s
        self.grid = grid
        self.cfg = cfg
        self.extra_drift = tuple(float(x) for x in extra_drift)
        self.diagnostics = diagnostics if diagnostics is not None else Diagnostics()
        self._ops: dict = {}
        self._implicit: dict = {}
        self._mixed: dict = {}
        self._warm: dict = {}
        self._mixed_calls = 0

    def operators(self, t: float) -> DiffusionOperators:
        key = _coefficient_key(self.model, t)
        if key not in self._ops:
            if len(self._ops) > 8:
                self._ops.clear()
                self._implicit.clear()
                self._mixed.clear()
            self._ops[key] = assemble_operators(self.model, self.grid, t, self.cfg.discounting, self.extra_drift,
                                                self.cfg.convection_order, self.frozen_s)
        return self._ops[key]

    def implicit_1d(self, t: float, k: int, factor: float) -> BandedOperator:
        """``I - factor * F_k`` at time t."""
        key = (_coefficient_key(self.model, t), k, factor)
        if key not in self._implicit:
            op = self.operators(t).one_d[k]
            self._implicit[key] = op.scale(-factor).plus_diagonal(np.ones(self.grid.shape))
        return self._implicit[key]

    def mixed_factors(self, t: float, pair_index: int, dt: float) -> "MixedFactors | None":
        key = (_coefficient_key(self.model, t), pair_index, dt)
        if key not in self._mixed:
            pair = self.operators(t).F0.pairs[pair_index]
            self._mixed[key] = build_mixed_factors(pair, self.grid, dt, self.cfg)
        return self._mixed[key]


# --- beta and the mixed-pair factor matrices ------------------------------------


def pair_beta(pair: MixedPair, beta_mult: float, shape: tuple[int, ...]) -> np.ndarray:
    """beta = beta_mult * max over the pair's two axes of [W2 + |rho| W1].

    Kept as an array over the spectator axis, so the S-r pair gets one beta per v node.
    """
    w1 = np.broadcast_to(pair.w1, shape)
    w2 = np.broadcast_to(pair.w2, shape)
    return beta_mult * np.max(w2 + abs(pair.rho) * w1, axis=(pair.axis1, pair.axis2), keepdims=True)


def choose_beta(model: ModelSpec, grid: Grid3D, pair: tuple[int, int], beta_mult: float = 10.0,
                t: float = 0.0) -> np.ndarray | float:
    """Beta for a mixed pair; a scalar unless it varies over the spectator axis."""
    idx = PAIR_ORDER.index(tuple(pair))
    b = pair_beta(mixed_pairs(model, grid, t)[idx], beta_mult, grid.shape)
    flat = np.unique(b)
    return float(flat[0]) if flat.size == 1 else b


def _local_step(nodes: np.ndarray) -> np.ndarray:
    h = np.diff(nodes)
    return np.minimum(np.concatenate([h[:1], h]), np.concatenate([h, h[-1:]]))


def _full_stencil(direction: str, g, order: int) -> BandedOperator:
    """One-sided first derivative with every row filled.

    End rows where the stencil does not fit take the opposite one-sided
    stencil, so the factor matrices and alpha stay exact on linear functions
    up to the boundary.
    """
    if order == 2:
        return stencil_first_order2(direction, g, fallback=True)
    op = stencil_first_order(direction, g)
    other = stencil_first_order("backward" if direction == "forward" else "forward", g)
    end = np.zeros(op.size)
    end[-1 if direction == "forward" else 0] = 1.0
    return op + other.scale(end)


@dataclass(frozen=True, eq=False)
class MixedFactors:
    """The two one-dimensional factors and the right-hand-side operator of one mixed solve.

    lhs_x = P - sqrt(dt) rho W1 D_x   (axis1, second-order one-sided)
    lhs_y = Q + sqrt(dt) W2 D_y       (axis2, second-order backward)
    alpha_x + alpha_y + (PQ + 1) is the right-hand-side operator alpha.
    """

    pair: MixedPair
    lhs_x: BandedOperator
    lhs_y: BandedOperator
    alpha_x: BandedOperator
    alpha_y: BandedOperator
    pq1: np.ndarray
    beta: np.ndarray

    def apply_alpha(self, u: np.ndarray) -> np.ndarray:
        return self.pq1 * u + self.alpha_x.apply(u) + self.alpha_y.apply(u)


def build_mixed_factors(pair: MixedPair, grid: Grid3D, dt: float, cfg: SolverConfig,
                        variant: str | None = None, sqrt_dt: float | None = None) -> MixedFactors | None:
    """Factor matrices for one pair; None when the mixed term vanishes identically."""
    shape = grid.shape
    w1 = np.broadcast_to(pair.w1, shape)
    w2 = np.broadcast_to(pair.w2, shape)
    if pair.rho == 0.0 or not (np.any(w1) and np.any(w2)):
        return None
    variant = variant or cfg.mixed_variant
    s = math.sqrt(dt) if sqrt_dt is None else sqrt_dt
    a1, a2 = pair.axis1, pair.axis2
    g1, g2 = grid.axes[a1], grid.axes[a2]
    h1, h2 = _local_step(g1.nodes), _local_step(g2.nodes)
    # the Picard map contracts once both diagonals exceed one: keep P, Q >= picard_floor
    floor = cfg.picard_floor * max(h1.max(), h2.max()) / s
    beta = np.maximum(pair_beta(pair, cfg.beta_mult, shape), floor)
    sh1 = [1, 1, 1]
    sh1[a1] = -1
    sh2 = [1, 1, 1]
    sh2[a2] = -1
    P = beta * s / h1.reshape(sh1)
    Q = beta * s / h2.reshape(sh2)
    rho = pair.rho
    second = variant == "B" and not (rho < 0 and cfg.literal_fd23)
    if rho >= 0:
        dx = _full_stencil("forward", g1, 2)
        ax = _full_stencil("backward", g1, 2 if variant == "B" else 1)
    else:
        dx = _full_stencil("backward", g1, 2)
        ax = _full_stencil("forward", g1, 2 if second else 1)
    dy = _full_stencil("backward", g2, 2)
    ay = _full_stencil("forward", g2, 2 if second else 1)
    lhs_x = on_axis(dx, a1).scale(-s * rho * w1).plus_diagonal(np.broadcast_to(P, shape))
    lhs_y = on_axis(dy, a2).scale(s * w2).plus_diagonal(np.broadcast_to(Q, shape))
    alpha_x = on_axis(ax, a1).scale(-Q * s * rho * w1)
    alpha_y = on_axis(ay, a2).scale(P * s * w2)
    return MixedFactors(pair, lhs_x, lhs_y, alpha_x, alpha_y, P * Q + 1.0, beta)


def mixed_pair_solve(u: np.ndarray, factors: MixedFactors | None, cfg: SolverConfig,
                     diagnostics: Diagnostics | None = None, t: float = 0.0,
                     guess: np.ndarray | None = None) -> np.ndarray:
    """Picard iterations  lhs_y V* = alpha u - V^k,  lhs_x V^{k+1} = V*."""
    if factors is None:
        return u.copy()
    iterate = cfg.picard_rhs == "iterate"
    rhs0 = u if iterate else factors.apply_alpha(u)
    vk = u if guess is None else guess
    residuals: list[float] = []
    converged = False
    for _ in range(cfg.picard_max):
        rhs = rhs0 + factors.apply_alpha(vk) - 2.0 * vk if iterate else rhs0 - vk
        v_star = factors.lhs_y.solve(rhs)
        v_next = factors.lhs_x.solve(v_star)
        scale = max(float(np.abs(v_next).max()), 1e-300)
        residuals.append(float(np.abs(v_next - vk).max()) / scale)
        vk = v_next
        if residuals[-1] <= cfg.picard_tol:
            converged = True
            break
    pair = (factors.pair.axis1, factors.pair.axis2)
    if diagnostics is not None:
        diagnostics.picard.append(PicardRecord(t, pair, len(residuals), residuals, converged))
    if not converged and cfg.strict_picard:
        raise PicardError(f"pair {pair}: residual {residuals[-1]:.3e} after {len(residuals)} iterations")
    return vk


def _pair_step(v: ValueField, pair: tuple[int, int], model: ModelSpec, g: Grid3D, cfg: SolverConfig,
               variant: str, t: float) -> ValueField:
    idx = PAIR_ORDER.index(tuple(pair))
    p = mixed_pairs(model, g, t)[idx]
    f = build_mixed_factors(p, g, cfg.dt, cfg, variant)
    return ValueField(mixed_pair_solve(v.data, f, cfg, t=t), v.tau)


def mixed_step_scheme_A(v: ValueField, pair: tuple[int, int], model: ModelSpec, g: Grid3D,
                        cfg: SolverConfig, t: float = 0.0) -> ValueField:
    """One implicit mixed-derivative solve with first-order stencils in alpha."""
    return _pair_step(v, pair, model, g, cfg, "A", t)


def mixed_step_scheme_B(v: ValueField, pair: tuple[int, int], model: ModelSpec, g: Grid3D,
                        cfg: SolverConfig, t: float = 0.0) -> ValueField:
    """As scheme A with second-order stencils in alpha.

    Applying alpha directly is algebraically the same as the fractional steps
    with alpha^{-1}, and costs two banded solves per iteration instead of four.
    """
    return _pair_step(v, pair, model, g, cfg, "B", t)


# --- HV family -----------------------------------------------------------------


def _mixed_all(u: np.ndarray, ctx: StepContext, t: float, dt: float) -> np.ndarray:
    call = ctx._mixed_calls
    ctx._mixed_calls += 1
    for k in range(3):
        f = ctx.mixed_factors(t, k, dt)
        key = (call, k, dt)
        guess = ctx._warm.get(key) if ctx.cfg.warm_start else None
        u = mixed_pair_solve(u, f, ctx.cfg, ctx.diagnostics, t, guess)
        if ctx.cfg.warm_start:
            ctx._warm[key] = u
        ctx.diagnostics.observe(f"mixed{k}", u)
    return u


def _first_stage(u: np.ndarray, ctx: StepContext, t: float, dt: float) -> np.ndarray:
    """The first-order stage approximating exp(dt F) u, per the selected scheme."""
    ops = ctx.operators(t)
    scheme = ctx.cfg.scheme
    if scheme == "hv-explicit-mixed":
        return u + dt * ops.apply(u)
    w = _mixed_all(u, ctx, t, dt)
    if scheme in ("implicit-A", "implicit-B"):
        return w + dt * ops.apply_1d(w)
    for k in range(3):
        w = ctx.implicit_1d(t, k, dt).solve(w)
        ctx.diagnostics.observe(f"implicit{k}", w)
    return w


def _hv_sweeps(u: np.ndarray, ctx: StepContext, t: float, dt: float) -> np.ndarray:
    theta = ctx.cfg.theta
    t_new = t - dt
    ops_old, ops_new = ctx.operators(t), ctx.operators(t_new)
    y0 = _first_stage(u, ctx, t, dt)
    ctx.diagnostics.observe("Y0", y0)
    y = y0
    for k in range(3):
        y = ctx.implicit_1d(t_new, k, theta * dt).solve(y - theta * dt * ops_old.one_d[k].apply(u))
    y3 = y
    if ctx.cfg.scheme == "hv-explicit-mixed":
        yt = y0 + 0.5 * dt * (ops_new.apply(y3) - ops_old.apply(u))
    else:
        y3s = _first_stage(y3, ctx, t_new, dt)
        yt = y0 + 0.5 * (y3s - y0 - y3 + u)
    ctx.diagnostics.observe("Yt0", yt)
    for k in range(3):
        yt = ctx.implicit_1d(t_new, k, theta * dt).solve(yt - theta * dt * ops_new.one_d[k].apply(y3))
    ctx.diagnostics.observe("V", yt)
    return yt


def _damped_step(u: np.ndarray, ctx: StepContext, t: float, dt: float) -> np.ndarray:
    """Two half steps of the fully implicit first stage (Rannacher smoothing)."""
    saved = ctx.cfg
    ctx.cfg = replace(saved, scheme="fully-implicit")
    try:
        h = 0.5 * dt
        u = _first_stage(u, ctx, t, h)
        u = _first_stage(u, ctx, t - h, h)
    finally:
        ctx.cfg = saved
    return u


def advance(u: np.ndarray, ctx: StepContext, t: float, dt: float | None = None, damped: bool = False) -> np.ndarray:
    """One diffusion step from calendar time ``t`` back to ``t - dt``."""
    dt = ctx.cfg.dt if dt is None else dt
    ctx._mixed_calls = 0
    if damped:
        return _damped_step(u, ctx, t, dt)
    return _hv_sweeps(u, ctx, t, dt)


def _check_scheme(cfg: SolverConfig, allowed: tuple[str, ...]) -> None:
    if cfg.scheme not in allowed:
        raise ValueError(f"scheme {cfg.scheme!r} not valid here; expected one of {allowed}")


def hv_step(v: ValueField, model: ModelSpec, g: Grid3D, cfg: SolverConfig, t: float,
            ctx: StepContext | None = None) -> ValueField:
    """Classic HV step with the mixed terms explicit."""
    _check_scheme(cfg, ("hv-explicit-mixed",))
    ctx = ctx or StepContext(model, g, cfg)
    return ValueField(advance(v.data, ctx, t), v.tau + cfg.dt)


def hv_with_implicit_mixed(v: ValueField, model: ModelSpec, g: Grid3D, cfg: SolverConfig, t: float,
                           ctx: StepContext | None = None) -> ValueField:
    """HV step whose explicit stages are replaced by implicit mixed solves plus explicit 1D terms."""
    _check_scheme(cfg, ("implicit-A", "implicit-B"))
    ctx = ctx or StepContext(model, g, cfg)
    return ValueField(advance(v.data, ctx, t), v.tau + cfg.dt)


def fully_implicit_step(v: ValueField, model: ModelSpec, g: Grid3D, cfg: SolverConfig, t: float,
                        ctx: StepContext | None = None) -> ValueField:
    """HV step whose first stage is implicit in every operator."""
    _check_scheme(cfg, ("fully-implicit",))
    ctx = ctx or StepContext(model, g, cfg)
    return ValueField(advance(v.data, ctx, t), v.tau + cfg.dt)


def implicit_euler_stage(v: ValueField, model: ModelSpec, g: Grid3D, cfg: SolverConfig, t: float) -> ValueField:
    """The fully implicit first stage alone: mixed solves then three implicit 1D solves."""
    ctx = StepContext(model, g, replace(cfg, scheme="fully-implicit"))
    return ValueField(_first_stage(v.data, ctx, t, cfg.dt), v.tau + cfg.dt)
