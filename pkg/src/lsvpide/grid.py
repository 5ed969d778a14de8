"""Non-uniform 1D grids, barrier ghost zones, jump-grid extensions and the 3D tensor grid."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

JUMP_EXTENSION_RATIO = 1.15


class GridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Grid1D:
    """Strictly increasing nodes; ``core`` is the half-open index range of the diffusion region."""

    nodes: np.ndarray
    core: tuple[int, int] | None = None

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        if self.core is None:
            object.__setattr__(self, "core", (0, nodes.size))
        validate_grid(self)

    def __len__(self) -> int:
        return self.nodes.size

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def core_slice(self) -> slice:
        return slice(*self.core)

    @property
    def core_nodes(self) -> np.ndarray:
        return self.nodes[self.core_slice]

    def index_of(self, x: float, tol: float = 1e-12) -> int:
        i = int(np.argmin(np.abs(self.nodes - x)))
        if abs(self.nodes[i] - x) > tol * max(1.0, abs(x)):
            raise GridError(f"{x} is not a grid node")
        return i


def validate_grid(g: Grid1D) -> None:
    nodes = g.nodes
    if nodes.ndim != 1 or nodes.size < 2:
        raise GridError("grid needs at least two nodes")
    if not np.all(np.isfinite(nodes)):
        raise GridError("grid nodes must be finite")
    if np.any(np.diff(nodes) <= 0):
        raise GridError("grid nodes must be strictly increasing")
    lo, hi = g.core
    if not (0 <= lo < hi <= nodes.size):
        raise GridError(f"core range {g.core} invalid for {nodes.size} nodes")


def build_nonuniform_grid(lo: float, hi: float, n: int, focus: float, density: float) -> Grid1D:
    """Sinh-stretched grid, finest near ``focus``; larger ``density`` means closer to uniform.

    Node map: x(xi) = focus + density * sinh(xi), xi uniform on
    [asinh((lo - focus)/density), asinh((hi - focus)/density)].
    """
    if not lo < hi:
        raise GridError(f"invalid bounds lo={lo}, hi={hi}")
    if n < 5:
        raise GridError("need at least 5 nodes")
    if not lo <= focus <= hi:
        raise GridError("focus must lie inside [lo, hi]")
    if not density > 0:
        raise GridError("density must be positive")
    xi = np.linspace(math.asinh((lo - focus) / density), math.asinh((hi - focus) / density), n)
    nodes = focus + density * np.sinh(xi)
    nodes[0], nodes[-1] = lo, hi
    return Grid1D(nodes)


def uniform_grid(lo: float, hi: float, n: int) -> Grid1D:
    return Grid1D(np.linspace(lo, hi, n))


def snap_to_node(g: Grid1D, level: float) -> tuple[Grid1D, int, float]:
    """Move the nearest node onto ``level``; returns (grid, index, distance moved).

    Endpoints are never moved. When an endpoint is the nearest node a new node
    is inserted at ``level`` instead (distance 0), so the move never exceeds
    half the local step.
    """
    x = g.nodes
    if not x[0] <= level <= x[-1]:
        raise GridError(f"level {level} outside grid [{x[0]}, {x[-1]}]")
    i = int(np.argmin(np.abs(x - level)))
    if x[i] == level:
        return g, i, 0.0
    if i in (0, x.size - 1):
        pos = 1 if i == 0 else x.size - 1
        lo, hi = g.core
        core = (lo + (lo >= pos), hi + (hi >= pos))
        return Grid1D(np.insert(x, pos, level), core), pos, 0.0
    dist = abs(x[i] - level)
    nodes = x.copy()
    nodes[i] = level
    return Grid1D(nodes, g.core), i, dist


def add_barrier_ghosts(g: Grid1D, barrier: float, side: str, count: int = 2) -> Grid1D:
    """Cut the grid at ``barrier`` and add ``count`` ghost nodes on the knocked-out side.

    ``side="above"`` means the barrier is an upper barrier (ghosts above it).
    Ghost spacing equals the adjacent interior step.
    """
    if side not in ("above", "below"):
        raise GridError("side must be 'above' or 'below'")
    if not 2 <= count <= 3:
        raise GridError("ghost count must be 2 or 3")
    x = g.nodes
    if not x[0] <= barrier <= x[-1]:
        raise GridError(f"barrier {barrier} outside domain [{x[0]}, {x[-1]}]")
    g, k, _ = snap_to_node(g, barrier)
    x = g.nodes
    lo, hi = g.core
    if side == "above":
        h = x[k] - x[k - 1]
        nodes = np.concatenate([x[: k + 1], x[k] + h * np.arange(1, count + 1)])
        return Grid1D(nodes, (min(lo, k), k + 1))
    h = x[k + 1] - x[k]
    nodes = np.concatenate([x[k] - h * np.arange(count, 0, -1), x[k:]])
    return Grid1D(nodes, (count, count + max(hi, k + 1) - k))


def extend_jump_grid(g: Grid1D, extra: int, ratio: float = JUMP_EXTENSION_RATIO) -> Grid1D:
    """Append ``extra`` nodes with geometrically growing steps beyond the grid ends.

    Nodes go below the grid only while they stay positive (state variables are
    non-negative); the rest go above. ``core`` is preserved.
    """
    if extra < 0:
        raise GridError("extra must be non-negative")
    if extra == 0:
        return g
    x = g.nodes
    below: list[float] = []
    if x[0] > 0:
        h = x[1] - x[0]
        for _ in range(extra // 2):
            h *= ratio
            nxt = (below[-1] if below else x[0]) - h
            if nxt <= 0:
                break
            below.append(nxt)
    above: list[float] = []
    h = x[-1] - x[-2]
    for _ in range(extra - len(below)):
        h *= ratio
        above.append((above[-1] if above else x[-1]) + h)
    nodes = np.concatenate([below[::-1], x, above])
    lo, hi = g.core
    return Grid1D(nodes, (lo + len(below), hi + len(below)))


@dataclass(frozen=True, eq=False)
class Grid3D:
    s: Grid1D
    v: Grid1D
    r: Grid1D

    @property
    def axes(self) -> tuple[Grid1D, Grid1D, Grid1D]:
        return (self.s, self.v, self.r)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (len(self.s), len(self.v), len(self.r))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def core_slices(self) -> tuple[slice, slice, slice]:
        return tuple(g.core_slice for g in self.axes)  # type: ignore[return-value]

    def core(self) -> "Grid3D":
        """The diffusion sub-grid (extension nodes removed, ghosts kept)."""
        return Grid3D(*(Grid1D(g.nodes[g.core_slice]) for g in self.axes))

    def mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable coordinate arrays of shapes (n,1,1), (1,n,1), (1,1,n)."""
        return (
            self.s.nodes[:, None, None],
            self.v.nodes[None, :, None],
            self.r.nodes[None, None, :],
        )


def write_grid_csv(g: Grid3D, path, header_comment: str | None = None) -> None:
    """Node vectors as three CSV columns (short columns padded with blanks)."""
    cols = [g.s.nodes, g.v.nodes, g.r.nodes]
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["s", "v", "r"])
        for row in itertools.zip_longest(*cols, fillvalue=None):
            w.writerow(["" if x is None else repr(float(x)) for x in row])


def grid_summary(g: Grid1D) -> dict:
    h = g.steps
    return {"n": len(g), "lo": float(g.nodes[0]), "hi": float(g.nodes[-1]),
            "h_min": float(h.min()), "h_max": float(h.max()), "core": g.core}


def nearest_index(nodes: Iterable[float], x: float) -> int:
    return int(np.argmin(np.abs(np.asarray(nodes) - x)))
