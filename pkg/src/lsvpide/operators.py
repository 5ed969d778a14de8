"""Finite-difference stencils on non-uniform grids and the convection-diffusion operators F0..F3."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .banded import BandedOperator, SingularBandError
from .grid import Grid1D, Grid3D
from .model import ModelSpec, at_time


class GridTooSmallError(ValueError):
    pass


def _nodes(g) -> np.ndarray:
    return g.nodes if isinstance(g, Grid1D) else np.asarray(g, dtype=float)


def lagrange_weights(x: np.ndarray, rows: np.ndarray, offsets: Sequence[int], deriv: int) -> np.ndarray:
    """Derivative weights at ``x[rows]`` from the points ``x[rows + offsets]``.

    Returns an array (len(offsets), len(rows)). Exact for polynomials of
    degree ``len(offsets) - 1``.
    """
    z = [x[rows + o] for o in offsets]
    x0 = x[rows]
    out = []
    for j, zj in enumerate(z):
        others = [zm for m, zm in enumerate(z) if m != j]
        denom = np.prod([zj - zm for zm in others], axis=0)
        if deriv == 1:
            num = np.zeros_like(x0)
            for k in range(len(others)):
                term = np.ones_like(x0)
                for m, zm in enumerate(others):
                    if m != k:
                        term = term * (x0 - zm)
                num = num + term
        elif deriv == 2:
            if len(others) != 2:
                raise ValueError("second-derivative weights implemented for 3 points")
            num = 2.0 * np.ones_like(x0)
        else:
            raise ValueError("deriv must be 1 or 2")
        out.append(num / denom)
    return np.array(out)


def _from_rows(n: int, spec: list[tuple[np.ndarray, Sequence[int], int]], x: np.ndarray) -> BandedOperator:
    """Assemble a 1D operator from groups of rows sharing a stencil shape."""
    bands: dict[int, np.ndarray] = {}
    for rows, offs, deriv in spec:
        rows = np.asarray(rows, dtype=int)
        if rows.size == 0:
            continue
        w = lagrange_weights(x, rows, offs, deriv)
        for o, wo in zip(offs, w):
            bands.setdefault(o, np.zeros(n))[rows] += wo
    if not bands:
        bands[0] = np.zeros(n)
    return BandedOperator.from_bands(0, bands, (n,))


def _embed(op: BandedOperator, n: int, start: int) -> BandedOperator:
    if start == 0:
        return op
    bands = {}
    for o, c in zip(op.offsets, op.coeffs):
        full = np.zeros(n)
        full[start:] = c
        bands[o] = full
    return BandedOperator.from_bands(0, bands, (n,))


def stencil_first_order(direction: str, g, start: int = 0) -> BandedOperator:
    """Two-point one-sided first derivative (A^F or A^B); rows that do not fit are zero.

    ``start`` excludes the leading nodes (e.g. a node at zero in log coordinates).
    """
    x = _nodes(g)[start:]
    n = x.size
    if n < 2:
        raise GridTooSmallError("need at least 2 nodes")
    if direction == "forward":
        op = _from_rows(n, [(np.arange(0, n - 1), (0, 1), 1)], x)
    elif direction == "backward":
        op = _from_rows(n, [(np.arange(1, n), (-1, 0), 1)], x)
    else:
        raise ValueError("direction must be 'forward' or 'backward'")
    return _embed(op, n + start, start)


def stencil_first_order2(direction: str, g, start: int = 0, fallback: bool = False) -> BandedOperator:
    """Three-point one-sided first derivative (A^F_2 / A^B_2), second order on smooth grids.

    Near the end where three points do not fit, the two-point stencil is used,
    and the final row is zero; with ``fallback`` it takes the opposite
    three-point stencil instead.
    """
    x = _nodes(g)[start:]
    n = x.size
    if n < 3:
        raise GridTooSmallError("need at least 3 nodes")
    if direction == "forward":
        spec = [(np.arange(0, n - 2), (0, 1, 2), 1), ([n - 2], (0, 1), 1)]
        if fallback:
            spec.append(([n - 1], (-2, -1, 0), 1))
    elif direction == "backward":
        spec = [(np.arange(2, n), (-2, -1, 0), 1), ([1], (-1, 0), 1)]
        if fallback:
            spec.append(([0], (0, 1, 2), 1))
    else:
        raise ValueError("direction must be 'forward' or 'backward'")
    return _embed(_from_rows(n, spec, x), n + start, start)


def stencil_central(g, start: int = 0) -> BandedOperator:
    """Three-point central first derivative A^C; boundary rows zero."""
    x = _nodes(g)[start:]
    n = x.size
    if n < 3:
        raise GridTooSmallError("need at least 3 nodes")
    return _embed(_from_rows(n, [(np.arange(1, n - 1), (-1, 0, 1), 1)], x), n + start, start)


def stencil_second(g, start: int = 0) -> BandedOperator:
    """Three-point second derivative A^C_2 (equals A^F A^B on uniform grids); boundary rows zero."""
    x = _nodes(g)[start:]
    n = x.size
    if n < 3:
        raise GridTooSmallError("need at least 3 nodes")
    return _embed(_from_rows(n, [(np.arange(1, n - 1), (-1, 0, 1), 2)], x), n + start, start)


def on_axis(op1d: BandedOperator, axis: int, ndim: int = 3) -> BandedOperator:
    """Lift a 1D stencil to act along ``axis`` of an ``ndim`` array (lazy broadcast)."""
    shape = [1] * ndim
    shape[axis] = op1d.size
    return BandedOperator(axis, op1d.offsets, op1d.coeffs.reshape(len(op1d.offsets), *shape))


def upwind_drift(mu: np.ndarray, g, axis: int, ndim: int = 3, start: int = 0, order: int = 2) -> BandedOperator:
    """``mu * d/dx`` with one-sided differences taken in the drift direction.

    ``order=2`` uses the three-point stencils (two-point where they do not fit),
    ``order=1`` the two-point ones; the end row falls back to the other side.
    """
    if order == 2:
        fwd = on_axis(stencil_first_order2("forward", g, start, fallback=True), axis, ndim)
        bwd = on_axis(stencil_first_order2("backward", g, start, fallback=True), axis, ndim)
    elif order == 1:
        f1 = stencil_first_order("forward", g, start)
        b1 = stencil_first_order("backward", g, start)
        n = f1.size
        last = np.zeros(n)
        last[-1] = 1.0
        first = np.zeros(n)
        first[start] = 1.0
        fwd = on_axis(f1 + b1.scale(last), axis, ndim)
        bwd = on_axis(b1 + f1.scale(first), axis, ndim)
    else:
        raise ValueError("order must be 1 or 2")
    mu = np.asarray(mu, dtype=float)
    return fwd.scale(np.maximum(mu, 0.0)) + bwd.scale(np.minimum(mu, 0.0))


# --- the 3D operators ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MixedPair:
    """rho * w1 * w2 * d^2/(dx1 dx2); w1 must not vary along axis2 nor w2 along axis1."""

    axis1: int
    axis2: int
    rho: float
    w1: np.ndarray
    w2: np.ndarray

    @property
    def coefficient(self) -> np.ndarray:
        return self.rho * self.w1 * self.w2


@dataclass(frozen=True, eq=False)
class MixedOperator:
    """F0: sum of mixed-derivative terms, central differences in both directions."""

    pairs: tuple[MixedPair, ...]
    central: tuple[BandedOperator, BandedOperator, BandedOperator]

    def apply(self, u: np.ndarray) -> np.ndarray:
        out = np.zeros_like(u)
        for p in self.pairs:
            if p.rho == 0.0:
                continue
            out += p.coefficient * self.central[p.axis1].apply(self.central[p.axis2].apply(u))
        return out


@dataclass(frozen=True, eq=False)
class DiffusionOperators:
    """F0..F3 on a grid at a frozen time."""

    F0: MixedOperator
    F1: BandedOperator
    F2: BandedOperator
    F3: BandedOperator
    grid: Grid3D
    t: float
    meta: dict = field(default_factory=dict)

    @property
    def one_d(self) -> tuple[BandedOperator, BandedOperator, BandedOperator]:
        return (self.F1, self.F2, self.F3)

    def apply_1d(self, u: np.ndarray) -> np.ndarray:
        return self.F1.apply(u) + self.F2.apply(u) + self.F3.apply(u)

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.F0.apply(u) + self.apply_1d(u)


def mixed_pairs(model: ModelSpec, grid: Grid3D, t: float) -> tuple[MixedPair, ...]:
    d = model.diffusion
    S, v, r = grid.mesh()
    sig = d.local_vol(S, t)
    xi_v, xi_r = at_time(d.xi_v, t), at_time(d.xi_r, t)
    ws = sig * S**d.c_pow
    return (
        MixedPair(0, 1, d.rho_sv, ws, xi_v * v ** (d.a_pow + 0.5)),
        MixedPair(0, 2, d.rho_sr, ws * np.sqrt(v), xi_r * r**d.b_pow),
        MixedPair(1, 2, d.rho_vr, xi_v * v**d.a_pow, xi_r * r**d.b_pow),
    )


def assemble_operators(
    model: ModelSpec,
    grid: Grid3D,
    t: float,
    discounting: bool = True,
    extra_drift: tuple[float, float, float] = (0.0, 0.0, 0.0),
    convection_order: int = 2,
    frozen_s: np.ndarray | None = None,
) -> DiffusionOperators:
    """Discretize F0..F3 on ``grid`` with coefficients frozen at time ``t``.

    ``extra_drift[k]`` adds ``m_k * x_k * d/dx_k`` (jump drifts moved into the
    convection terms). ``convection_order`` selects the one-sided drift stencils.
    With ``discounting`` the ``-r V`` term is split evenly
    between F1 and F3. Rows at S nodes flagged in ``frozen_s`` (barrier
    and knocked-out nodes) are zeroed so those values do not move.
    """
    d = model.diffusion
    S, v, r = grid.mesh()
    shape = grid.shape
    kv, tv, xv = at_time(d.kappa_v, t), at_time(d.theta_v, t), at_time(d.xi_v, t)
    kr, tr, xr = at_time(d.kappa_r, t), at_time(d.theta_r, t), at_time(d.xi_r, t)
    half_r = 0.5 * r if discounting else np.zeros_like(r)

    mu_s = np.broadcast_to((r - d.q + extra_drift[0]) * S, shape)
    diff_s = 0.5 * d.local_vol(S, t) ** 2 * S ** (2 * d.c_pow) * v
    F1 = upwind_drift(mu_s, grid.s, 0, order=convection_order) + on_axis(stencil_second(grid.s), 0).scale(diff_s)
    F1 = F1.plus_diagonal(np.broadcast_to(-half_r, shape))

    mu_v = np.broadcast_to(kv * (tv - v) + extra_drift[1] * v, shape)
    diff_v = np.broadcast_to(0.5 * xv**2 * v ** (2 * d.a_pow), shape)
    F2 = upwind_drift(mu_v, grid.v, 1, order=convection_order) + on_axis(stencil_second(grid.v), 1).scale(diff_v)
    # homogeneous Neumann row at v_max
    keep = np.ones(len(grid.v))
    keep[-1] = 0.0
    F2 = F2.scale(keep[None, :, None])

    mu_r = np.broadcast_to(kr * (tr - r) + extra_drift[2] * r, shape)
    diff_r = np.broadcast_to(0.5 * xr**2 * r ** (2 * d.b_pow), shape)
    F3 = upwind_drift(mu_r, grid.r, 2, order=convection_order) + on_axis(stencil_second(grid.r), 2).scale(diff_r)
    F3 = F3.plus_diagonal(np.broadcast_to(-half_r, shape))

    pairs = mixed_pairs(model, grid, t)
    if frozen_s is not None and np.any(frozen_s):
        keep_s = np.where(np.asarray(frozen_s, dtype=bool), 0.0, 1.0)[:, None, None]
        F1, F2, F3 = (F.scale(keep_s) for F in (F1, F2, F3))
        pairs = tuple(replace(p, w1=p.w1 * keep_s) for p in pairs)
    central = tuple(on_axis(stencil_central(g), k) for k, g in enumerate(grid.axes))
    F0 = MixedOperator(pairs, central)  # type: ignore[arg-type]
    return DiffusionOperators(F0, F1, F2, F3, grid, t)


def assemble_F(k: int, model: ModelSpec, grid: Grid3D, t: float, discounting: bool = True):
    """F_k alone (k = 0 returns the mixed operator)."""
    ops = assemble_operators(model, grid, t, discounting)
    return (ops.F0, ops.F1, ops.F2, ops.F3)[k]


# --- EM-matrix diagnostics ------------------------------------------------------


@dataclass(frozen=True)
class EmReport:
    is_em: bool
    offending_entry: tuple[int, int, float] | None
    inverse_min: float | None


DENSE_PROBE_LIMIT = 500


def em_check(op, index: tuple[int, ...] | None = None, tol: float = 1e-12) -> EmReport:
    """Check positive diagonal, sign pattern and (for n <= 500) non-negativity of the inverse.

    Accepts a :class:`BandedOperator` (one grid line is inspected) or a dense matrix.
    For large matrices only the sign pattern is checked: off-diagonals must be
    non-positive unless the matrix is triangular.
    """
    a = op.to_dense(index) if isinstance(op, BandedOperator) else np.asarray(op, dtype=float)
    n = a.shape[0]
    diag = np.diag(a)
    bad = np.flatnonzero(diag <= 0)
    if bad.size:
        i = int(bad[0])
        return EmReport(False, (i, i, float(a[i, i])), None)
    if n <= DENSE_PROBE_LIMIT:
        try:
            inv = np.linalg.inv(a)
        except np.linalg.LinAlgError as exc:
            raise SingularBandError("singular matrix") from exc
        if not np.all(np.isfinite(inv)):
            raise SingularBandError("singular matrix")
        imin = float(inv.min())
        if imin < -tol:
            i, j = np.unravel_index(int(np.argmin(inv)), inv.shape)
            return EmReport(False, (int(i), int(j), imin), imin)
        return EmReport(True, None, imin)
    off = a - np.diag(diag)
    triangular = not np.any(np.tril(off)) or not np.any(np.triu(off))
    if triangular:
        return EmReport(True, None, None)
    pos = np.argwhere(off > 0)
    if pos.size:
        i, j = pos[0]
        return EmReport(False, (int(i), int(j), float(a[i, j])), None)
    return EmReport(True, None, None)
