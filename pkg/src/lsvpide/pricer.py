"""Instruments, boundary conditions and the backward time loop with Strang-split jumps.

One time step reads

    D/2, J_s/2, J_v/2, J_r/2, J_common, J_r/2, J_v/2, J_s/2, D/2

where ``D`` is the diffusion step (on the core nodes) and the ``J`` are the
Meixner jump propagators (on the log-coordinate part of the full grid).
Barrier and far-field conditions are imposed after every sub-step.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .diffusion import Diagnostics, SolverConfig, StepContext, ValueField, advance
from .grid import Grid1D, Grid3D, add_barrier_ghosts, build_nonuniform_grid, extend_jump_grid, snap_to_node, uniform_grid
from .jumps import DEFAULT_TERMS, CommonJumpPropagator, IdioJumpPropagator
from .model import ModelSpec

KINDS = ("european-call", "european-put", "double-barrier-call", "up-and-out-call", "zero-coupon-bond")


class InstrumentError(ValueError):
    pass


@dataclass(frozen=True)
class InstrumentSpec:
    kind: str
    maturity: float
    strike: float = 0.0
    lower_barrier: float | None = None
    upper_barrier: float | None = None
    rebate: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InstrumentError(f"unknown instrument kind {self.kind!r}; expected one of {KINDS}")
        if not self.maturity > 0:
            raise InstrumentError("maturity must be positive")
        if self.kind != "zero-coupon-bond" and not self.strike > 0:
            raise InstrumentError("options need a positive strike")
        if self.kind == "double-barrier-call" and (self.lower_barrier is None or self.upper_barrier is None):
            raise InstrumentError("double barrier needs both barriers")
        if self.kind == "up-and-out-call" and self.upper_barrier is None:
            raise InstrumentError("up-and-out needs an upper barrier")
        lo, hi = self.lower_barrier, self.upper_barrier
        if lo is not None and hi is not None and not lo < hi:
            raise InstrumentError("lower barrier must be below the upper barrier")
        if lo is not None and lo <= 0:
            raise InstrumentError("lower barrier must be positive")

    @property
    def barriers(self) -> tuple[float | None, float | None]:
        if self.kind == "double-barrier-call":
            return self.lower_barrier, self.upper_barrier
        if self.kind == "up-and-out-call":
            return None, self.upper_barrier
        return None, None


# --- grid construction ------------------------------------------------------------


@dataclass(frozen=True)
class AxisSpec:
    """Node count, bounds and sinh clustering (``density=None`` gives a uniform axis)."""

    n: int
    lo: float
    hi: float
    focus: float | None = None
    density: float | None = None
    jump_nodes: int = 25  # extension nodes added when the axis carries jumps

    def build(self) -> Grid1D:
        if self.density is None:
            return uniform_grid(self.lo, self.hi, self.n)
        focus = self.focus if self.focus is not None else 0.5 * (self.lo + self.hi)
        return build_nonuniform_grid(self.lo, self.hi, self.n, focus, self.density)


@dataclass(frozen=True)
class GridSpec:
    s: AxisSpec
    v: AxisSpec
    r: AxisSpec
    ghosts: int = 2


def _axis_has_jumps(model: ModelSpec, axis: int) -> bool:
    js = model.jumps
    if js is None:
        return False
    p = js.idio(axis)
    if p is not None and not p.is_trivial:
        return True
    return js.common is not None and not js.common.is_trivial and js.loadings[axis] != 0.0


def _snap_anchor(g: Grid1D, level: float, taken: set[int]) -> Grid1D:
    if not g.nodes[0] < level < g.nodes[-1]:
        return g
    i = int(np.argmin(np.abs(g.nodes - level)))
    if i in taken and g.nodes[i] != level:
        return g
    g, i, _ = snap_to_node(g, level)
    taken.add(i)
    return g


def build_pricing_grid(inst: InstrumentSpec, model: ModelSpec, spec: GridSpec,
                       spot: tuple[float, float, float]) -> Grid3D:
    """Tensor grid with the spot point and strike on nodes, barriers cut with ghosts, jump extensions."""
    lo_b, hi_b = inst.barriers
    s_spec = spec.s
    if lo_b is not None:
        s_spec = replace(s_spec, lo=lo_b)
    if hi_b is not None:
        s_spec = replace(s_spec, hi=hi_b)
    gs = s_spec.build()
    taken: set[int] = set()
    gs = _snap_anchor(gs, spot[0], taken)
    if inst.kind != "zero-coupon-bond":
        gs = _snap_anchor(gs, inst.strike, taken)
    if hi_b is not None:
        gs = add_barrier_ghosts(gs, hi_b, "above", spec.ghosts)
    if lo_b is not None:
        gs = add_barrier_ghosts(gs, lo_b, "below", spec.ghosts)
    gv = _snap_anchor(spec.v.build(), spot[1], set())
    gr = _snap_anchor(spec.r.build(), spot[2], set())
    axes = []
    for k, (g, a) in enumerate(zip((gs, gv, gr), (spec.s, spec.v, spec.r))):
        axes.append(extend_jump_grid(g, a.jump_nodes) if _axis_has_jumps(model, k) else g)
    return Grid3D(*axes)


# --- payoff and boundary conditions ---------------------------------------------------


def _outside_corridor(inst: InstrumentSpec, s: np.ndarray) -> np.ndarray:
    lo, hi = inst.barriers
    out = np.zeros(s.shape, dtype=bool)
    if lo is not None:
        out |= s <= lo
    if hi is not None:
        out |= s >= hi
    return out


def terminal_payoff(inst: InstrumentSpec, g: Grid3D) -> ValueField:
    S = g.s.nodes
    if inst.kind == "zero-coupon-bond":
        pay = np.ones_like(S)
    elif inst.kind == "european-put":
        pay = np.maximum(inst.strike - S, 0.0)
    else:
        pay = np.maximum(S - inst.strike, 0.0)
    pay = np.where(_outside_corridor(inst, S), inst.rebate, pay)
    return ValueField(np.broadcast_to(pay[:, None, None], g.shape).copy(), 0.0)


def _extrapolate_linear(u: np.ndarray, x: np.ndarray, lo: int, hi: int) -> None:
    """Fill rows outside [lo, hi) of axis 0 linearly from the two nearest core rows."""
    if hi < len(x):
        slope = (u[hi - 1] - u[hi - 2]) / (x[hi - 1] - x[hi - 2])
        u[hi:] = u[hi - 1] + slope * (x[hi:, None, None] - x[hi - 1])
    if lo > 0:
        slope = (u[lo + 1] - u[lo]) / (x[lo + 1] - x[lo])
        u[:lo] = u[lo] + slope * (x[:lo, None, None] - x[lo])


def apply_boundary_conditions(v: ValueField, inst: InstrumentSpec, g: Grid3D, tau: float | None = None) -> ValueField:
    """Barrier and ghost nodes to the rebate, S_max linearity, extension nodes extrapolated.

    The conditions are time independent, so ``tau`` only labels the result.
    """
    u = v.data.copy()
    # v and r: constant beyond the core
    for axis, ax in ((1, g.v), (2, g.r)):
        lo, hi = ax.core
        w = np.moveaxis(u, axis, 0)
        if hi < len(ax):
            w[hi:] = w[hi - 1]
        if lo > 0:
            w[:lo] = w[lo]
    S = g.s.nodes
    lo, hi = g.s.core
    lo_b, hi_b = inst.barriers
    if inst.kind != "zero-coupon-bond" and hi_b is None and hi - lo >= 3:
        # zero second difference in the last core row
        x0, x1, x2 = S[hi - 3], S[hi - 2], S[hi - 1]
        u[hi - 1] = u[hi - 2] + (u[hi - 2] - u[hi - 3]) * (x2 - x1) / (x1 - x0)
    _extrapolate_linear(u, S, lo, hi)
    u[_outside_corridor(inst, S)] = inst.rebate
    return ValueField(u, v.tau if tau is None else tau)


# --- the time loop --------------------------------------------------------------------


@dataclass(frozen=True)
class JumpOptions:
    terms: int = DEFAULT_TERMS
    interpolation: str = "per-factor"
    tail: bool = True


def jump_drift_shift(model: ModelSpec) -> tuple[float, float, float]:
    """Meixner drifts m_k + b_k m_common as extra log-drift per axis."""
    js = model.jumps
    if js is None:
        return (0.0, 0.0, 0.0)
    out = []
    for k in range(3):
        p = js.idio(k)
        m = p.m if p is not None else 0.0
        if js.common is not None:
            m += js.loadings[k] * js.common.m
        out.append(m)
    return tuple(out)  # type: ignore[return-value]


class SplitStepper:
    """One Strang-split step of the full PIDE on a fixed grid."""

    def __init__(self, inst: InstrumentSpec, model: ModelSpec, grid: Grid3D, cfg: SolverConfig,
                 diagnostics: Diagnostics | None = None, jumps: JumpOptions = JumpOptions()):
        self.inst = inst
        self.model = model
        self.grid = grid
        self.cfg = cfg
        self.jump_opts = jumps
        self.diagnostics = diagnostics if diagnostics is not None else Diagnostics()
        self.core = grid.core()
        # barrier and knocked-out rows keep the rebate inside every diffusion sub-step
        frozen = _outside_corridor(inst, self.core.s.nodes)
        self.ctx = StepContext(model, self.core, cfg, jump_drift_shift(model), self.diagnostics, frozen)
        self._jumps: dict[float, list] = {}

    def _jump_sequence(self, dt: float) -> list[tuple[str, Callable[[np.ndarray], np.ndarray]]]:
        if dt in self._jumps:
            return self._jumps[dt]
        seq: list = []
        js = self.model.jumps
        o = self.jump_opts
        if js is not None:
            idio = []
            for k, name in enumerate("svr"):
                p = js.idio(k)
                if p is not None and not p.is_trivial:
                    idio.append((f"J_{name}", IdioJumpPropagator(self.grid, k, p, 0.5 * dt, o.terms, "none",
                                                                 o.interpolation, o.tail)))
            common = CommonJumpPropagator(self.grid, js, dt, o.terms, "none", o.interpolation, self.cfg, o.tail)
            seq = idio + ([("J_common", common)] if common.active else []) + idio[::-1]
        self._jumps[dt] = seq
        return seq

    def _bc(self, u: np.ndarray, name: str) -> np.ndarray:
        u = apply_boundary_conditions(ValueField(u, 0.0), self.inst, self.grid).data
        self.diagnostics.observe(name, u)
        return u

    def _diffuse(self, u: np.ndarray, t: float, dt: float, damped: bool) -> np.ndarray:
        sl = self.grid.core_slices
        out = u.copy()
        out[sl] = advance(u[sl], self.ctx, t, dt, damped)
        return self._bc(out, "D")

    def step(self, u: np.ndarray, t: float, dt: float, damped: bool = False, reverse: bool = False) -> np.ndarray:
        """Advance from calendar time ``t`` back to ``t - dt``."""
        h = 0.5 * dt
        if reverse:
            # mirrored arrangement: half jump blocks outside, one full diffusion step inside
            for name, op in self._jump_sequence(h):
                u = self._bc(op(u), name)
            u = self._diffuse(u, t, dt, damped)
            for name, op in self._jump_sequence(h):
                u = self._bc(op(u), name)
            return u
        u = self._diffuse(u, t, h, damped)
        for name, op in self._jump_sequence(dt):
            u = self._bc(op(u), name)
        return self._diffuse(u, t - h, h, damped)


def time_steps(T: float, dt: float) -> list[float]:
    """Step sizes covering [0, T]; the last step is shortened when dt does not divide T."""
    n = max(1, math.ceil(T / dt - 1e-9))
    steps = [dt] * n
    steps[-1] = T - dt * (n - 1)
    return steps


@dataclass
class PriceSurface:
    values: ValueField
    grid: Grid3D
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values.data)):
            raise FloatingPointError("non-finite prices")

    def core_values(self) -> np.ndarray:
        return self.values.data[self.grid.core_slices]

    def value_at(self, s: float, v: float, r: float) -> float:
        """Trilinear interpolation on the grid (exact at nodes)."""
        axes = tuple(a.nodes for a in self.grid.axes)
        f = RegularGridInterpolator(axes, self.values.data, method="linear")
        return float(f([[s, v, r]])[0])

    def write_csv(self, path, comment: str | None = None) -> None:
        g = self.grid.core()
        u = self.core_values()
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["S", "v", "r", "value"])
            for (i, j, k), val in np.ndenumerate(u):
                w.writerow([repr(float(g.s.nodes[i])), repr(float(g.v.nodes[j])), repr(float(g.r.nodes[k])),
                            repr(float(val))])

    def write_slice_csv(self, path, axis: int, level: float, comment: str | None = None) -> None:
        """The plane at the core node nearest ``level`` on ``axis``, as (x, y, value) rows."""
        g = self.grid.core()
        u = self.core_values()
        names = ("S", "v", "r")
        k = int(np.argmin(np.abs(g.axes[axis].nodes - level)))
        plane = np.take(u, k, axis=axis)
        rest = [a for a in range(3) if a != axis]
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow([names[rest[0]], names[rest[1]], "value"])
            for (i, j), val in np.ndenumerate(plane):
                w.writerow([repr(float(g.axes[rest[0]].nodes[i])), repr(float(g.axes[rest[1]].nodes[j])),
                            repr(float(val))])


def price(inst: InstrumentSpec, model: ModelSpec, grid: Grid3D, cfg: SolverConfig,
          diagnostics: Diagnostics | None = None, jumps: JumpOptions = JumpOptions(),
          on_step: Callable[[float, np.ndarray], None] | None = None, reverse: bool = False) -> PriceSurface:
    """Value surface at t = 0 of ``inst`` under ``model`` on ``grid``.

    ``on_step(tau, field)`` is called after every full time step.
    """
    started = time.perf_counter()
    stepper = SplitStepper(inst, model, grid, cfg, diagnostics, jumps)
    u = apply_boundary_conditions(terminal_payoff(inst, grid), inst, grid).data
    tau = 0.0
    for n, dt in enumerate(time_steps(inst.maturity, cfg.dt)):
        t = inst.maturity - tau
        u = stepper.step(u, t, dt, damped=n < cfg.rannacher_steps, reverse=reverse)
        tau += dt
        if on_step is not None:
            on_step(tau, u)
    meta = {"instrument": asdict(inst), "solver": asdict(cfg), "seconds": time.perf_counter() - started,
            "picard_share_2": stepper.diagnostics.share_within(2)}
    return PriceSurface(ValueField(u, inst.maturity), grid, meta)


def zero_coupon_bond(model: ModelSpec, grid: Grid3D, cfg: SolverConfig, T: float, **kwargs) -> PriceSurface:
    """Price of a payoff of 1 at ``T``; T = 0 returns ones."""
    if T <= 0:
        return PriceSurface(ValueField(np.ones(grid.shape), 0.0), grid, {"instrument": "zero-coupon-bond"})
    return price(InstrumentSpec("zero-coupon-bond", T), model, grid, cfg, **kwargs)
