"""Independent reference computations used to check the solver.

Nothing here calls the solver's stencil or banded-solve code: difference
weights are rebuilt from Vandermonde systems, operators are dense matrices and
linear systems go through LAPACK.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, linalg, sparse
from scipy.sparse import linalg as splinalg
from scipy.stats import norm


# --- closed forms --------------------------------------------------------------


def black_scholes_call(S: float, K: float, r: float, q: float, sigma: float, T: float) -> float:
    if T <= 0 or sigma <= 0:
        fwd = S * math.exp(-q * max(T, 0.0))
        return max(fwd - K * math.exp(-r * max(T, 0.0)), 0.0) if T > 0 else max(S - K, 0.0)
    sd = sigma * math.sqrt(T)
    d1 = (math.log(S / K) + (r - q + 0.5 * sigma**2) * T) / sd
    d2 = d1 - sd
    return S * math.exp(-q * T) * norm.cdf(d1) - K * math.exp(-r * T) * norm.cdf(d2)


def _expm1_ratio(x: float, t: float) -> float:
    """(exp(x t) - 1) / x, equal to t in the limit of tiny x."""
    return t if abs(x) < 1e-150 else math.expm1(x * t) / x


def cir_bond_price(r0: float, kappa: float, theta: float, xi: float, T: float) -> float:
    """Zero-coupon bond under dr = kappa (theta - r) dt + xi sqrt(r) dW."""
    if T <= 0:
        return 1.0
    if xi == 0.0:
        return math.exp(-theta * T - (r0 - theta) * _expm1_ratio(-kappa, T))
    g = math.hypot(kappa, math.sqrt(2.0) * xi)

    def loading(t):
        e = _expm1_ratio(g, t)
        return 2 * e / ((g + kappa) * e + 2)

    # log A = -kappa theta int_0^T B; the closed-form power (...)^(2 kappa theta / xi^2)
    # loses all precision when xi is small
    integral = integrate.quad(loading, 0.0, T, epsabs=0.0, epsrel=1e-13, limit=200)[0]
    return math.exp(-kappa * theta * integral - loading(T) * r0)


# --- dense propagators ---------------------------------------------------------


DENSE_LIMIT = 3000


def dense_expm_propagate(op, v: np.ndarray, dt: float) -> np.ndarray:
    """exp(dt * op) v by scaling and squaring."""
    a = np.asarray(op, dtype=float)
    if a.shape[0] > DENSE_LIMIT:
        raise ValueError("matrix too large for the dense oracle")
    with np.errstate(over="raise"):
        return linalg.expm(dt * a) @ np.asarray(v, dtype=float)


def meixner_exponent(u: np.ndarray, a: float, b: float, d: float, m: float) -> np.ndarray:
    """phi(u) evaluated with the continuous branch of log cosh."""
    z = (a * np.asarray(u, dtype=complex) - 1j * b) / 2.0
    zs = np.where(z.real >= 0, z, -z)
    log_cosh = zs + np.log1p(np.exp(-2 * zs)) - math.log(2.0)
    return 2 * d * (math.log(math.cos(b / 2)) - log_cosh) + 1j * m * u


def spectral_jump_propagate(v: np.ndarray, h: float, a: float, b: float, d: float, m: float, dt: float,
                            pad_factor: int = 4) -> np.ndarray:
    """Apply exp(dt * phi(-i d/dx)) to samples on a uniform grid of step h (edge-padded FFT)."""
    v = np.asarray(v, dtype=float)
    n = v.size
    if dt == 0:
        return v.copy()
    scale = max(np.abs(v).max(), 1e-300)
    if max(abs(v[0]), abs(v[-1])) / scale > 1e-6 and abs(v[0] - v[-1]) / scale > 1e-6:
        warnings.warn("spectral oracle: non-negligible mass at the boundary, wrap-around possible", stacklevel=2)
    total = 1 << int(math.ceil(math.log2(pad_factor * n)))
    left = (total - n) // 2
    padded = np.pad(v, (left, total - n - left), mode="edge")
    k = 2 * np.pi * np.fft.fftfreq(total, d=h)
    out = np.fft.ifft(np.fft.fft(padded) * np.exp(dt * meixner_exponent(k, a, b, d, m))).real
    return out[left:left + n]


# --- Monte Carlo ---------------------------------------------------------------


@dataclass(frozen=True)
class McConfig:
    paths: int = 1_000_000
    steps_per_year: int = 250
    seed: int = 12345
    scheme: str = "full-truncation-Euler"
    chunk: int = 100_000


def mc_price_diffusion(inst, model, mc: McConfig, spot: tuple[float, float, float]) -> tuple[float, float]:
    """Discounted payoff mean and standard error for a diffusion-only model.

    ``inst`` needs ``kind`` (european-call, european-put or zero-coupon-bond),
    ``strike`` and ``maturity``; ``spot`` is (S0, v0, r0).
    """
    if model.has_jumps:
        raise ValueError("the Monte Carlo oracle covers diffusion-only models")
    d = model.diffusion
    K = getattr(inst, "strike", 0.0)
    payoffs = {
        "european-call": lambda s: np.maximum(s - K, 0.0),
        "european-put": lambda s: np.maximum(K - s, 0.0),
        "zero-coupon-bond": lambda s: np.ones_like(s),
    }
    if inst.kind not in payoffs:
        raise ValueError(f"no Monte Carlo payoff for {inst.kind}")
    params = dict(q=d.q, kappa_v=d.kappa_v, theta_v=d.theta_v, xi_v=d.xi_v, kappa_r=d.kappa_r,
                  theta_r=d.theta_r, xi_r=d.xi_r, a_pow=d.a_pow, b_pow=d.b_pow, c_pow=d.c_pow,
                  sigma=d.local_vol, corr=d.correlation_matrix())
    for name in ("kappa_v", "theta_v", "xi_v", "kappa_r", "theta_r", "xi_r"):
        if not isinstance(params[name], (int, float)):
            raise ValueError("the Monte Carlo oracle takes time-constant parameters")
    return mc_paths(payoffs[inst.kind], inst.maturity, *spot, params, mc)


def mc_paths(payoff, T: float, s0: float, v0: float, r0: float, params: dict,
             mc: McConfig) -> tuple[float, float]:
    """Full-truncation Euler (log-Euler for S) with correlated draws from a Cholesky factor.

    ``params``: q, kappa_v, theta_v, xi_v, kappa_r, theta_r, xi_r, a_pow, b_pow,
    c_pow, sigma (callable (S, t) -> local vol), corr (3x3 matrix).
    """
    corr = np.asarray(params["corr"], dtype=float)
    chol = np.linalg.cholesky(corr)
    n_steps = max(1, int(round(mc.steps_per_year * T)))
    dt = T / n_steps
    sq = math.sqrt(dt)
    sigma = params["sigma"]
    c = params["c_pow"]
    kv, tv, xv = params["kappa_v"], params["theta_v"], params["xi_v"]
    kr, tr, xr = params["kappa_r"], params["theta_r"], params["xi_r"]
    ap, bp, q = params["a_pow"], params["b_pow"], params["q"]
    seeds = np.random.SeedSequence(mc.seed).spawn((mc.paths + mc.chunk - 1) // mc.chunk)
    total = 0.0
    total_sq = 0.0
    done = 0
    for ss in seeds:
        n = min(mc.chunk, mc.paths - done)
        rng = np.random.default_rng(ss)
        x = np.full(n, math.log(s0))
        v = np.full(n, v0)
        r = np.full(n, r0)
        integral = np.zeros(n)
        for i in range(n_steps):
            t = i * dt
            z = rng.standard_normal((3, n))
            w = chol @ z
            vp = np.maximum(v, 0.0)
            rp = np.maximum(r, 0.0)
            s = np.exp(x)
            vol = sigma(s, t) * s ** (c - 1.0) * np.sqrt(vp)
            integral += 0.5 * rp * dt
            x = x + (rp - q - 0.5 * vol**2) * dt + vol * sq * w[0]
            v = v + kv * (tv - vp) * dt + xv * vp**ap * sq * w[1]
            r = r + kr * (tr - rp) * dt + xr * rp**bp * sq * w[2]
            integral += 0.5 * np.maximum(r, 0.0) * dt
        cash = np.exp(-integral) * payoff(np.exp(x))
        total += cash.sum()
        total_sq += (cash**2).sum()
        done += n
    mean = total / mc.paths
    var = max(total_sq / mc.paths - mean**2, 0.0)
    return mean, math.sqrt(var / mc.paths)


# --- dense difference matrices ---------------------------------------------------


def fd_weights(x: np.ndarray, i: int, offsets, deriv: int) -> np.ndarray:
    """Weights w with sum_j w_j f(x[i + o_j]) ~ f^(deriv)(x[i]) from a Taylor/Vandermonde solve."""
    dx = np.array([x[i + o] - x[i] for o in offsets])
    k = len(offsets)
    vander = np.array([dx**p / math.factorial(p) for p in range(k)])
    rhs = np.zeros(k)
    rhs[deriv] = 1.0
    return np.linalg.solve(vander, rhs)


def dense_first(x: np.ndarray, direction: str, order: int, fallback: bool = False) -> np.ndarray:
    """One-sided first derivative; rows without room are zero (or use the mirrored stencil)."""
    n = x.size
    a = np.zeros((n, n))
    sgn = 1 if direction == "forward" else -1
    for i in range(n):
        room = (n - 1 - i) if sgn > 0 else i
        if room >= order:
            offs = [sgn * j for j in range(order + 1)]
        elif room >= 1:
            offs = [0, sgn]
        elif fallback:
            offs = [-sgn * j for j in range(order + 1)]
        else:
            continue
        for o, w in zip(offs, fd_weights(x, i, offs, 1)):
            a[i, i + o] += w
    return a


def dense_second(x: np.ndarray) -> np.ndarray:
    n = x.size
    a = np.zeros((n, n))
    for i in range(1, n - 1):
        a[i, i - 1:i + 2] = fd_weights(x, i, [-1, 0, 1], 2)
    return a


def dense_upwind(x: np.ndarray, mu: float) -> np.ndarray:
    """mu * d/dx with second-order one-sided differences in the direction of mu."""
    return mu * dense_first(x, "forward" if mu >= 0 else "backward", 2, fallback=True)


def _local_steps(x: np.ndarray) -> np.ndarray:
    h = np.diff(x)
    return np.minimum(np.r_[h[0], h], np.r_[h, h[-1]])


def kron_axis(mat: np.ndarray, axis: int, shape: tuple[int, ...]) -> np.ndarray:
    """Dense (C-order) matrix of ``mat`` acting along ``axis`` of an array of ``shape``."""
    out = np.ones((1, 1))
    for k, n in enumerate(shape):
        out = np.kron(out, mat if k == axis else np.eye(n))
    return out


# --- dense mixed-pair and common-jump oracles ----------------------------------------


def dense_mixed_operators(x1: np.ndarray, x2: np.ndarray, rho: float, w1: np.ndarray, w2: np.ndarray,
                          sqrt_dt: float, beta: float, variant: str = "B", literal_fd23: bool = False):
    """Dense 2D matrices (lhs_x, lhs_y, alpha) of one mixed-pair solve on an n1 x n2 grid.

    ``w1`` varies along axis 1 and ``w2`` along axis 2; ``beta`` is a scalar.
    """
    n1, n2 = x1.size, x2.size
    shape = (n1, n2)
    s = sqrt_dt
    P = beta * s / _local_steps(x1)
    Q = beta * s / _local_steps(x2)
    if rho >= 0:
        dx = dense_first(x1, "forward", 2, fallback=True)
        ax = dense_first(x1, "backward", 2 if variant == "B" else 1, fallback=True)
    else:
        dx = dense_first(x1, "backward", 2, fallback=True)
        ax = dense_first(x1, "forward", 2 if (variant == "B" and not literal_fd23) else 1, fallback=True)
    dy = dense_first(x2, "backward", 2, fallback=True)
    second_y = variant == "B" and not (rho < 0 and literal_fd23)
    ay = dense_first(x2, "forward", 2 if second_y else 1, fallback=True)
    W1 = np.diag(np.repeat(w1, n2))
    W2 = np.diag(np.tile(w2, n1))
    Pd = np.diag(np.repeat(P, n2))
    Qd = np.diag(np.tile(Q, n1))
    lhs_x = Pd - s * rho * W1 @ kron_axis(dx, 0, shape)
    lhs_y = Qd + s * W2 @ kron_axis(dy, 1, shape)
    alpha = Pd @ Qd + np.eye(n1 * n2) - s * rho * Qd @ W1 @ kron_axis(ax, 0, shape) \
        + s * Pd @ W2 @ kron_axis(ay, 1, shape)
    return lhs_x, lhs_y, alpha


def dense_mixed_fixed_point(u: np.ndarray, lhs_x: np.ndarray, lhs_y: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Limit of the Picard iteration: (lhs_y lhs_x + I) V = alpha u."""
    m = lhs_y @ lhs_x + np.eye(lhs_x.shape[0])
    return np.linalg.solve(m, alpha @ u.ravel()).reshape(u.shape)


def dense_trick_solve(u: np.ndarray, x1: np.ndarray, x2: np.ndarray, coef: np.ndarray, dt: float) -> np.ndarray:
    """(1 - dt * coef * Dx Dy) V = u with central differences (boundary rows zero)."""
    n1, n2 = x1.size, x2.size
    c1 = np.zeros((n1, n1))
    for i in range(1, n1 - 1):
        c1[i, i - 1:i + 2] = fd_weights(x1, i, [-1, 0, 1], 1)
    c2 = np.zeros((n2, n2))
    for j in range(1, n2 - 1):
        c2[j, j - 1:j + 2] = fd_weights(x2, j, [-1, 0, 1], 1)
    op = np.diag(np.asarray(coef).ravel()) @ np.kron(c1, c2)
    return np.linalg.solve(np.eye(n1 * n2) - dt * op, u.ravel()).reshape(u.shape)


def dense_common_jump(u: np.ndarray, x_axes: list[np.ndarray], loadings, a: float, b: float, d: float,
                      dt: float, beta_mult: float = 10.0, picard_floor: float = 2.0,
                      terms: int = 10, tail: bool = True) -> np.ndarray:
    """Dense rebuild of the common-jump product on a log grid (no drift).

    Every factor is solved exactly (the mixed pairs at their Picard limit),
    using sparse LU on explicitly assembled Kronecker matrices.
    """
    shape = tuple(x.size for x in x_axes)
    N = int(np.prod(shape))
    kappa = 2 * d * dt
    sub = 1 if kappa < 1 else int(math.floor(kappa)) + 1
    kappa /= sub
    eye = sparse.identity(N, format="csc")

    def kr(mat, axis):
        out = sparse.identity(1, format="csc")
        for k, n in enumerate(shape):
            out = sparse.kron(out, sparse.csc_matrix(mat) if k == axis else sparse.identity(n), format="csc")
        return out

    horizons = [a**2 / (4 * math.pi**2 * (n - 0.5) ** 2) for n in range(1, terms + 1)]
    if tail:
        # remainder of sum 1/(n - 1/2)^2 = pi^2 / 2 beyond the kept terms
        horizons.append(a**2 / (4 * math.pi**2) * (math.pi**2 / 2 - sum(1 / (n - 0.5) ** 2 for n in range(1, terms + 1))))
    factors = []
    for t_n in horizons:
        s = math.sqrt(t_n)
        pair_solves = []
        for i, j in ((0, 1), (0, 2), (1, 2)):
            bi, bj = loadings[i], loadings[j]
            if bi == 0 or bj == 0:
                continue
            rho = float(np.sign(bi * bj))
            w1, w2 = math.sqrt(2) * abs(bi), math.sqrt(2) * abs(bj)
            h1, h2 = _local_steps(x_axes[i]), _local_steps(x_axes[j])
            beta = max(beta_mult * (w2 + w1), picard_floor * max(h1.max(), h2.max()) / s)
            P = beta * s / h1
            Q = beta * s / h2
            Pd = sparse.diags(_axis_vector(P, i, shape))
            Qd = sparse.diags(_axis_vector(Q, j, shape))
            dx = dense_first(x_axes[i], "forward" if rho >= 0 else "backward", 2, fallback=True)
            ax = dense_first(x_axes[i], "backward" if rho >= 0 else "forward", 2, fallback=True)
            dy = dense_first(x_axes[j], "backward", 2, fallback=True)
            ay = dense_first(x_axes[j], "forward", 2, fallback=True)
            lhs_x = Pd - s * rho * w1 * kr(dx, i)
            lhs_y = Qd + s * w2 * kr(dy, j)
            alpha = Pd @ Qd + eye - s * rho * w1 * Qd @ kr(ax, i) + s * w2 * Pd @ kr(ay, j)
            pair_solves.append((splinalg.splu((lhs_y @ lhs_x + eye).tocsc()), alpha))
        ones_solves = []
        for k, bk in enumerate(loadings):
            if bk == 0:
                continue
            gen = bk**2 * dense_second(x_axes[k]) + dense_upwind(x_axes[k], 2 * (b / a) * bk)
            ones_solves.append(splinalg.splu((eye - t_n * kr(gen, k)).tocsc()))
        c_n = t_n * (b / a) ** 2
        factors.append((pair_solves, ones_solves, 1.0 / (1.0 - c_n)))

    w = u.ravel().astype(float)
    for _ in range(sub):
        w = math.cos(b / 2) ** kappa * w
        for pair_solves, ones_solves, inv_c in factors:
            z = w
            for lu, alpha in pair_solves:
                z = lu.solve(alpha @ z)
            for lu in ones_solves:
                z = lu.solve(z)
            w = (1 - kappa) * w + kappa * inv_c * z
    return w.reshape(u.shape)


def _axis_vector(vals: np.ndarray, axis: int, shape: tuple[int, ...]) -> np.ndarray:
    sh = [1] * len(shape)
    sh[axis] = -1
    return np.broadcast_to(np.asarray(vals).reshape(sh), shape).ravel()


def dense_implicit_euler(u: np.ndarray, op: np.ndarray, dt: float) -> np.ndarray:
    return np.linalg.solve(np.eye(op.shape[0]) - dt * op, u.ravel()).reshape(u.shape)
