"""Banded operators acting along one axis of an N-d array, and their batched direct solve.

Row ``i`` of the operator (along ``axis``) reads

    (A u)[i] = sum_k coeffs[k][i] * u[i + offsets[k]]

where every coefficient array has the full field shape, so each grid line
perpendicular to ``axis`` carries its own banded matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


class SingularBandError(ArithmeticError):
    """Zero pivot met while eliminating a banded system."""


def _shift(u: np.ndarray, off: int, axis: int) -> np.ndarray:
    """``out[i] = u[i + off]`` along ``axis`` with zero fill."""
    if off == 0:
        return u
    out = np.zeros_like(u)
    n = u.shape[axis]
    src = [slice(None)] * u.ndim
    dst = [slice(None)] * u.ndim
    if off > 0:
        src[axis] = slice(off, n)
        dst[axis] = slice(0, n - off)
    else:
        src[axis] = slice(0, n + off)
        dst[axis] = slice(-off, n)
    out[tuple(dst)] = u[tuple(src)]
    return out


@dataclass(frozen=True, eq=False)
class BandedOperator:
    axis: int
    offsets: tuple[int, ...]
    coeffs: np.ndarray  # (len(offsets), *shape)

    def __post_init__(self):
        offsets = tuple(int(o) for o in self.offsets)
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.shape[0] != len(offsets):
            raise ValueError("one coefficient array per offset required")
        if len(set(offsets)) != len(offsets):
            raise ValueError("duplicate offsets")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "coeffs", coeffs)
        n = self.size
        for o, c in zip(offsets, coeffs):
            # entries that would read outside the line must vanish
            if o > 0 and np.any(np.take(c, range(n - o, n), axis=self.axis)):
                raise ValueError(f"band {o} reads past the end of the line")
            if o < 0 and np.any(np.take(c, range(0, -o), axis=self.axis)):
                raise ValueError(f"band {o} reads before the start of the line")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.coeffs.shape[1:]

    @property
    def size(self) -> int:
        return self.shape[self.axis]

    def band(self, off: int) -> np.ndarray:
        if off in self.offsets:
            return self.coeffs[self.offsets.index(off)]
        return np.zeros(self.shape)

    # --- constructors -------------------------------------------------------
    @classmethod
    def zeros(cls, shape: tuple[int, ...], axis: int) -> "BandedOperator":
        return cls(axis, (0,), np.zeros((1, *shape)))

    @classmethod
    def identity(cls, shape: tuple[int, ...], axis: int) -> "BandedOperator":
        return cls(axis, (0,), np.ones((1, *shape)))

    @classmethod
    def from_bands(cls, axis: int, bands: dict[int, np.ndarray], shape: tuple[int, ...]) -> "BandedOperator":
        offs = tuple(sorted(bands))
        return cls(axis, offs, np.stack([np.broadcast_to(bands[o], shape) for o in offs]))

    # --- algebra ------------------------------------------------------------
    def __add__(self, other: "BandedOperator") -> "BandedOperator":
        if other.axis != self.axis:
            raise ValueError("cannot add operators acting on different axes")
        shape = np.broadcast_shapes(self.shape, other.shape)
        offs = sorted(set(self.offsets) | set(other.offsets))
        bands = {o: np.broadcast_to(self.band(o), shape) + np.broadcast_to(other.band(o), shape) for o in offs}
        return BandedOperator.from_bands(self.axis, bands, shape)

    def __neg__(self) -> "BandedOperator":
        return BandedOperator(self.axis, self.offsets, -self.coeffs)

    def __sub__(self, other: "BandedOperator") -> "BandedOperator":
        return self + (-other)

    def scale(self, factor) -> "BandedOperator":
        """Row scaling ``diag(factor) @ A``; ``factor`` broadcasts against the field shape."""
        factor = np.asarray(factor, dtype=float)
        shape = np.broadcast_shapes(self.shape, factor.shape)
        coeffs = np.broadcast_to(self.coeffs, (len(self.offsets), *shape)) * factor
        return BandedOperator(self.axis, self.offsets, coeffs)

    def plus_diagonal(self, diag) -> "BandedOperator":
        """``A + diag(diag)``."""
        diag = np.asarray(diag, dtype=float)
        shape = np.broadcast_shapes(self.shape, diag.shape)
        return self + BandedOperator(self.axis, (0,), np.broadcast_to(diag, shape)[None])

    def broadcast_to(self, shape: tuple[int, ...]) -> "BandedOperator":
        return BandedOperator(self.axis, self.offsets, np.broadcast_to(self.coeffs, (len(self.offsets), *shape)))

    # --- action -------------------------------------------------------------
    def apply(self, u: np.ndarray) -> np.ndarray:
        out = np.zeros(np.broadcast_shapes(u.shape, self.shape))
        for o, c in zip(self.offsets, self.coeffs):
            out += c * _shift(u, o, self.axis)
        return out

    __matmul__ = apply

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``A x = rhs`` line by line (Gaussian elimination, no pivoting)."""
        return solve_banded_lines(self, rhs)

    # --- inspection ---------------------------------------------------------
    def line(self, index: tuple[int, ...] | None = None) -> "BandedOperator":
        """The 1D operator of a single grid line; ``index`` gives the other coordinates."""
        if len(self.shape) == 1:
            return self
        idx = list(index or (0,) * (len(self.shape) - 1))
        idx.insert(self.axis, slice(None))
        full = np.broadcast_to(self.coeffs, self.coeffs.shape)
        return BandedOperator(0, self.offsets, full[(slice(None), *idx)])

    def to_dense(self, index: tuple[int, ...] | None = None) -> np.ndarray:
        op = self.line(index)
        n = op.size
        a = np.zeros((n, n))
        rows = np.arange(n)
        for o, c in zip(op.offsets, op.coeffs):
            ok = (rows + o >= 0) & (rows + o < n)
            a[rows[ok], rows[ok] + o] = c[ok]
        return a

    def to_coo_text(self, index: tuple[int, ...] | None = None) -> str:
        """Coordinate-format dump ``row col value`` of one line's matrix."""
        a = self.to_dense(index)
        r, c = np.nonzero(a)
        return "\n".join(f"{i} {j} {a[i, j]:.17g}" for i, j in zip(r, c))


def stack_bands(bands: Iterable[tuple[int, np.ndarray]], axis: int) -> BandedOperator:
    bands = list(bands)
    shape = np.broadcast_shapes(*(b.shape for _, b in bands))
    acc: dict[int, np.ndarray] = {}
    for o, b in bands:
        acc[o] = acc.get(o, 0) + np.broadcast_to(b, shape)
    return BandedOperator.from_bands(axis, acc, shape)


def solve_banded_lines(op: BandedOperator, rhs: np.ndarray) -> np.ndarray:
    """Batched banded elimination without pivoting along ``op.axis``.

    Suitable for the diagonally dominant / EM-type matrices the schemes build;
    a zero pivot raises :class:`SingularBandError`.
    """
    shape = np.broadcast_shapes(op.shape, rhs.shape)
    axis = op.axis
    n = shape[axis]
    lower = -min(min(op.offsets), 0)
    upper = max(max(op.offsets), 0)
    # c[o][i] = A[i, i+o], row index moved to the front
    c = {o: np.moveaxis(np.broadcast_to(op.band(o), shape), axis, 0).copy()
         for o in range(-lower, upper + 1)}
    b = np.moveaxis(np.broadcast_to(rhs, shape), axis, 0).astype(float, copy=True)
    diag = c[0]
    for i in range(n):
        piv = diag[i]
        if not np.all(piv != 0):
            raise SingularBandError(f"zero pivot in row {i}")
        for k in range(1, lower + 1):
            j = i + k
            if j >= n:
                break
            f = c[-k][j] / piv
            for o in range(1, upper + 1):
                c[o - k][j] -= f * c[o][i]
            b[j] -= f * b[i]
    x = np.empty_like(b)
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for o in range(1, upper + 1):
            if i + o < n:
                acc = acc - c[o][i] * x[i + o]
        x[i] = acc / diag[i]
    return np.moveaxis(x, 0, axis)
