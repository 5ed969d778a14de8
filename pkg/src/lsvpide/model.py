"""Model parameters: diffusion part, Meixner jump structure and correlation arithmetic."""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, fields
from typing import Any, Sequence

import numpy as np

AXES = ("s", "v", "r")


class DegenerateCorrelationError(ValueError):
    """A correlation was requested for a driver with zero total variance."""


class PiecewiseConstant:
    """Right-continuous step function of time.

    ``values[k]`` holds on ``[times[k], times[k+1])``; ``times[0]`` must be 0.
    """

    def __init__(self, times: Sequence[float], values: Sequence[float]):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise ValueError("times and values must be 1D arrays of equal length")
        if self.times.size == 0 or self.times[0] != 0.0:
            raise ValueError("first breakpoint must be t=0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("breakpoints must be strictly increasing")

    def __call__(self, t: float) -> float:
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.values[max(k, 0)])

    def min(self) -> float:
        return float(self.values.min())

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "values": self.values.tolist()}

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, PiecewiseConstant)
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self) -> str:
        return f"PiecewiseConstant(times={self.times.tolist()}, values={self.values.tolist()})"


def at_time(x: float | PiecewiseConstant, t: float) -> float:
    """Sample a constant-or-piecewise parameter at time ``t``."""
    return x(t) if isinstance(x, PiecewiseConstant) else float(x)


def _min_value(x: float | PiecewiseConstant) -> float:
    return x.min() if isinstance(x, PiecewiseConstant) else float(x)


class LocalVolSurface:
    """Tabulated local volatility sigma_s(S, t), bilinear with flat extrapolation."""

    def __init__(self, s_nodes: Sequence[float], t_nodes: Sequence[float], values: Any):
        self.s_nodes = np.asarray(s_nodes, dtype=float)
        self.t_nodes = np.asarray(t_nodes, dtype=float)
        self.values = np.asarray(values, dtype=float).reshape(self.t_nodes.size, self.s_nodes.size)
        if np.any(np.diff(self.s_nodes) <= 0) or np.any(np.diff(self.t_nodes) <= 0):
            raise ValueError("local-vol table axes must be strictly increasing")
        if np.any(self.values <= 0):
            raise ValueError("local volatility must be positive")

    @classmethod
    def constant(cls, sigma: float = 1.0) -> "LocalVolSurface":
        return cls([0.0], [0.0], [[sigma]])

    def __call__(self, s: Any, t: float) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        tn = self.t_nodes
        if tn.size == 1 or t <= tn[0]:
            row = self.values[0]
        elif t >= tn[-1]:
            row = self.values[-1]
        else:
            k = int(np.searchsorted(tn, t, side="right")) - 1
            w = (t - tn[k]) / (tn[k + 1] - tn[k])
            row = (1 - w) * self.values[k] + w * self.values[k + 1]
        if self.s_nodes.size == 1:
            return np.full_like(s, row[0])
        return np.interp(s, self.s_nodes, row)

    def to_dict(self) -> dict:
        return {
            "s_nodes": self.s_nodes.tolist(),
            "t_nodes": self.t_nodes.tolist(),
            "values": self.values.tolist(),
        }

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, LocalVolSurface)
            and np.array_equal(self.s_nodes, other.s_nodes)
            and np.array_equal(self.t_nodes, other.t_nodes)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class MeixnerParams:
    """Meixner process: scale ``a``, skew ``b``, intensity ``d``, drift ``m``."""

    a: float
    b: float
    d: float
    m: float = 0.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"Meixner scale a must be positive, got {self.a}")
        if not abs(self.b) < math.pi:
            raise ValueError(f"Meixner skew must satisfy |b| < pi, got {self.b}")
        if self.d < 0:
            raise ValueError(f"Meixner intensity d must be non-negative, got {self.d}")

    @property
    def variance(self) -> float:
        """Var(X_1) = -phi''(0) = a^2 d / (2 cos^2(b/2))."""
        return self.a**2 * self.d / (2.0 * math.cos(self.b / 2.0) ** 2)

    @property
    def is_trivial(self) -> bool:
        return self.d == 0.0 and self.m == 0.0


@dataclass(frozen=True)
class JumpStructure:
    """Idiosyncratic jumps per driver plus a common factor entering with loadings."""

    idio_s: MeixnerParams | None = None
    idio_v: MeixnerParams | None = None
    idio_r: MeixnerParams | None = None
    common: MeixnerParams | None = None
    loadings: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        loadings = tuple(float(x) for x in self.loadings)
        if len(loadings) != 3 or not all(math.isfinite(x) for x in loadings):
            raise ValueError("loadings must be three finite numbers")
        object.__setattr__(self, "loadings", loadings)

    def idio(self, axis: int) -> MeixnerParams | None:
        return (self.idio_s, self.idio_v, self.idio_r)[axis]

    def idio_variance(self, axis: int) -> float:
        p = self.idio(axis)
        return 0.0 if p is None else p.variance

    @property
    def common_variance(self) -> float:
        return 0.0 if self.common is None else self.common.variance

    def total_variance(self, axis: int) -> float:
        """Var(X_{i,1}) = Var(Y_{i,1}) + b_i^2 Var(Z_1)."""
        return self.idio_variance(axis) + self.loadings[axis] ** 2 * self.common_variance

    def scaled_loadings(self, factor: float) -> "JumpStructure":
        return JumpStructure(
            self.idio_s, self.idio_v, self.idio_r, self.common,
            tuple(factor * b for b in self.loadings),
        )


@dataclass(frozen=True)
class DiffusionParams:
    q: float = 0.0
    kappa_v: float | PiecewiseConstant = 0.0
    theta_v: float | PiecewiseConstant = 1.0
    xi_v: float | PiecewiseConstant = 0.0
    kappa_r: float | PiecewiseConstant = 0.0
    theta_r: float | PiecewiseConstant = 0.05
    xi_r: float | PiecewiseConstant = 0.0
    a_pow: float = 0.5
    b_pow: float = 0.5
    c_pow: float = 1.0
    local_vol: LocalVolSurface = field(default_factory=LocalVolSurface.constant)
    rho_sv: float = 0.0
    rho_sr: float = 0.0
    rho_vr: float = 0.0

    def __post_init__(self):
        for name in ("a_pow", "b_pow", "c_pow"):
            p = getattr(self, name)
            if not 0.0 <= p < 2.0:
                raise ValueError(f"{name} must lie in [0, 2), got {p}")
        for name in ("kappa_v", "xi_v", "kappa_r", "xi_r"):
            if _min_value(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("theta_v", "theta_r"):
            if _min_value(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("rho_sv", "rho_sr", "rho_vr"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1]")
        if np.linalg.eigvalsh(self.correlation_matrix()).min() < -1e-12:
            raise ValueError("Brownian correlation matrix is not positive semidefinite")

    def correlation_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0, self.rho_sv, self.rho_sr],
                [self.rho_sv, 1.0, self.rho_vr],
                [self.rho_sr, self.rho_vr, 1.0],
            ]
        )

    def rho(self, i: int, j: int) -> float:
        return float(self.correlation_matrix()[i, j])


@dataclass(frozen=True)
class ModelSpec:
    diffusion: DiffusionParams = field(default_factory=DiffusionParams)
    jumps: JumpStructure | None = None

    @property
    def has_jumps(self) -> bool:
        js = self.jumps
        if js is None:
            return False
        parts = [js.idio_s, js.idio_v, js.idio_r]
        if any(b != 0.0 for b in js.loadings):
            parts.append(js.common)
        return any(p is not None and not p.is_trivial for p in parts)

    def without_jumps(self) -> "ModelSpec":
        return ModelSpec(self.diffusion, None)


# --- characteristic exponent, density, correlations -------------------------


def _log_cosh(z: complex) -> complex:
    # continuous branch (the one given by the infinite product of cosh)
    if z.real >= 0:
        return z + cmath.log(1 + cmath.exp(-2 * z)) - math.log(2.0)
    return -z + cmath.log(1 + cmath.exp(2 * z)) - math.log(2.0)


def meixner_char_exponent(u: complex, p: MeixnerParams) -> complex:
    """phi(u) with E[exp(i u X_t)] = exp(t phi(u))."""
    cb = math.cos(p.b / 2.0)
    if cb <= 0:
        raise ValueError("cos(b/2) must be positive")
    z = (p.a * complex(u) - 1j * p.b) / 2.0
    return 2.0 * p.d * (math.log(cb) - _log_cosh(z)) + 1j * p.m * complex(u)


def meixner_char_exponent_array(u: np.ndarray, p: MeixnerParams) -> np.ndarray:
    """Vectorised :func:`meixner_char_exponent` for real or complex ``u``."""
    u = np.asarray(u, dtype=complex)
    z = (p.a * u - 1j * p.b) / 2.0
    sgn = np.where(z.real >= 0, 1.0, -1.0)
    lc = sgn * z + np.log1p(np.exp(-2.0 * sgn * z)) - math.log(2.0)
    return 2.0 * p.d * (math.log(math.cos(p.b / 2.0)) - lc) + 1j * p.m * u


def meixner_levy_density(y: Any, p: MeixnerParams) -> np.ndarray:
    """d exp(b y / a) / (y sinh(pi y / a)), evaluated without overflow."""
    y = np.asarray(y, dtype=float)
    if np.any(y == 0):
        raise ValueError("Levy density is singular at y = 0")
    ay = np.abs(y)
    k = math.pi / p.a
    return 2.0 * p.d * np.exp(p.b * y / p.a - k * ay) / (ay * -np.expm1(-2.0 * k * ay))


def pairwise_jump_correlation(i: int, j: int, js: JumpStructure) -> float:
    """Corr(X_i, X_j) induced by the common factor."""
    vi, vj = js.total_variance(i), js.total_variance(j)
    if vi <= 0 or vj <= 0:
        raise DegenerateCorrelationError(f"zero jump variance for driver {i if vi <= 0 else j}")
    if i == j:
        return 1.0
    bi, bj = js.loadings[i], js.loadings[j]
    return bi * bj * js.common_variance / math.sqrt(vi * vj)


def total_correlation(
    i: int, j: int, sigma_i: float, sigma_j: float, rho: float, js: JumpStructure | None
) -> float:
    """Instantaneous correlation of two drivers with both Brownian and jump parts."""
    if sigma_i < 0 or sigma_j < 0:
        raise ValueError("diffusion vols must be non-negative")
    if js is None:
        js = JumpStructure()
    var_i = sigma_i**2 + js.total_variance(i)
    var_j = sigma_j**2 + js.total_variance(j)
    if var_i <= 0 or var_j <= 0:
        raise DegenerateCorrelationError("vanishing total variance")
    cov = rho * sigma_i * sigma_j + js.loadings[i] * js.loadings[j] * js.common_variance
    return cov / (math.sqrt(var_i) * math.sqrt(var_j))


def cosine_law_rho(rho_yz: float, rho_xz: float, phi_xy: float) -> float:
    if abs(rho_yz) > 1 or abs(rho_xz) > 1:
        raise ValueError("correlations must lie in [-1, 1]")
    return rho_yz * rho_xz + math.sqrt((1 - rho_yz**2) * (1 - rho_xz**2)) * math.cos(phi_xy)


# --- serialization -----------------------------------------------------------


def _param_to_plain(x: Any) -> Any:
    if isinstance(x, (PiecewiseConstant, LocalVolSurface)):
        return x.to_dict()
    return x


def model_to_dict(m: ModelSpec) -> dict:
    diff = {f.name: _param_to_plain(getattr(m.diffusion, f.name)) for f in fields(DiffusionParams)}
    out: dict[str, Any] = {"diffusion": diff}
    if m.jumps is not None:
        js = m.jumps
        jd: dict[str, Any] = {"loadings": list(js.loadings)}
        for name in ("idio_s", "idio_v", "idio_r", "common"):
            p = getattr(js, name)
            if p is not None:
                jd[name] = {"a": p.a, "b": p.b, "d": p.d, "m": p.m}
        out["jumps"] = jd
    return out


def _param_from_plain(x: Any) -> Any:
    if isinstance(x, dict):
        return PiecewiseConstant(x["times"], x["values"])
    return float(x)


def model_from_dict(data: dict) -> ModelSpec:
    raw = dict(data.get("diffusion", {}))
    known = {f.name for f in fields(DiffusionParams)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown diffusion fields: {sorted(unknown)}")
    kw: dict[str, Any] = {}
    for name, value in raw.items():
        if name == "local_vol":
            if isinstance(value, dict):
                kw[name] = LocalVolSurface(value["s_nodes"], value["t_nodes"], value["values"])
            else:
                kw[name] = LocalVolSurface.constant(float(value))
        elif name in ("q", "a_pow", "b_pow", "c_pow", "rho_sv", "rho_sr", "rho_vr"):
            kw[name] = float(value)
        else:
            kw[name] = _param_from_plain(value)
    jumps = None
    if data.get("jumps"):
        jd = data["jumps"]
        parts = {}
        for name in ("idio_s", "idio_v", "idio_r", "common"):
            if jd.get(name) is not None:
                parts[name] = MeixnerParams(**{k: float(v) for k, v in jd[name].items()})
        jumps = JumpStructure(loadings=tuple(jd.get("loadings", (0.0, 0.0, 0.0))), **parts)
    return ModelSpec(DiffusionParams(**kw), jumps)
