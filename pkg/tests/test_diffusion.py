import numpy as np
import pytest
from dataclasses import replace
from scipy.linalg import expm

from lsvpide.diffusion import (
    Diagnostics,
    PicardError,
    SolverConfig,
    StepContext,
    ValueField,
    advance,
    build_mixed_factors,
    choose_beta,
    fully_implicit_step,
    hv_step,
    hv_with_implicit_mixed,
    implicit_euler_stage,
    mixed_pair_solve,
    mixed_step_scheme_A,
    mixed_step_scheme_B,
)
from lsvpide.grid import Grid3D, build_nonuniform_grid, uniform_grid
from lsvpide.model import DiffusionParams, LocalVolSurface, ModelSpec
from lsvpide.operators import MixedPair, assemble_operators, mixed_pairs, stencil_central, on_axis

ALL_SCHEMES = ("hv-explicit-mixed", "implicit-A", "implicit-B", "fully-implicit")


def dense3d(apply, shape) -> np.ndarray:
    """Dense matrix of a linear map on fields of ``shape`` (C order)."""
    n = int(np.prod(shape))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(np.asarray(apply(e.reshape(shape))).ravel())
    return np.array(cols).T


def smooth_problem():
    m = ModelSpec(DiffusionParams(kappa_v=1.5, theta_v=0.1, xi_v=0.3, kappa_r=0.5, theta_r=0.05, xi_r=0.1,
                                  rho_sv=-0.5, rho_sr=0.2, rho_vr=0.1, local_vol=LocalVolSurface.constant(1.0)))
    g = Grid3D(build_nonuniform_grid(0.0, 300.0, 21, 100.0, 30.0),
               build_nonuniform_grid(0.0, 1.0, 13, 0.0, 0.3),
               build_nonuniform_grid(0.0, 0.25, 9, 0.05, 0.05))
    S, v, r = g.mesh()
    u0 = np.broadcast_to(np.exp(-(((S - 100) / 30) ** 2)) * (1 + v) * (1 + r), g.shape).copy()
    return m, g, u0


def run(u, ctx, T, dt):
    t = T
    for _ in range(round(T / dt)):
        u = advance(u, ctx, t, dt)
        t -= dt
    return u


def _null_model_and_grid():
    # S diffusion ~ sigma^2 underflows to zero, rates live on [0, 1e-9]: every operator vanishes
    m = ModelSpec(DiffusionParams(local_vol=LocalVolSurface.constant(1e-200)))
    g = Grid3D(uniform_grid(0, 10, 5), uniform_grid(0, 1, 5), uniform_grid(0, 1e-9, 3))
    return m, g


# --- configuration --------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(theta=0.0), dict(theta=1.5), dict(beta_mult=1.5),
                                dict(picard_tol=0.0), dict(picard_max=0), dict(scheme="crank"),
                                dict(picard_rhs="other"), dict(convection_order=3)])
def test_solver_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_unsafe_beta_allows_violation_studies():
    assert SolverConfig(beta_mult=1.0, unsafe_beta=True).beta_mult == 1.0


def test_value_field_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        ValueField(np.array([1.0, np.nan]))


# --- HV skeleton ------------------------------------------------------------------


@pytest.mark.parametrize("scheme", ALL_SCHEMES)
def test_zero_operator_is_identity(scheme):
    m, g = _null_model_and_grid()
    u = np.random.default_rng(0).uniform(size=g.shape)
    ctx = StepContext(m, g, SolverConfig(scheme=scheme, dt=0.01))
    np.testing.assert_allclose(advance(u, ctx, 1.0), u, atol=1e-12)


def test_embedded_heat_equation_matches_matrix_exponential():
    g = Grid3D(uniform_grid(0, 1, 3), uniform_grid(0, 1, 21), uniform_grid(0, 1e-9, 3))
    m = ModelSpec(DiffusionParams(xi_v=0.2, a_pow=0.0, local_vol=LocalVolSurface.constant(1e-200)))
    ctx = StepContext(m, g, SolverConfig(scheme="hv-explicit-mixed", dt=0.01))
    line = np.cos(np.pi * g.v.nodes)
    u = np.broadcast_to(line[None, :, None], g.shape).copy()
    out = advance(u, ctx, 1.0)
    F2 = ctx.operators(1.0).F2.to_dense((1, 0))
    np.testing.assert_allclose(out[1, :, 0], expm(0.01 * F2) @ line, atol=1e-4)


def _dt_ratios(scheme):
    m, g, u0 = smooth_problem()
    res = [run(u0, StepContext(m, g, SolverConfig(scheme=scheme, dt=dt)), 0.2, dt)
           for dt in (0.04, 0.02, 0.01, 0.005)]
    d = [np.abs(res[i] - res[i + 1]).max() for i in range(3)]
    return d[0] / d[1], d[1] / d[2]


def test_hv_explicit_mixed_is_second_order_in_time():
    for ratio in _dt_ratios("hv-explicit-mixed"):
        assert 3.2 <= ratio <= 4.8


@pytest.mark.parametrize("scheme", ["implicit-A", "implicit-B"])
def test_implicit_mixed_hv_is_second_order_in_time(scheme):
    for ratio in _dt_ratios(scheme):
        assert 3.2 <= ratio <= 4.8, ratio


def test_scheme_wrappers_check_the_scheme():
    m, g, u0 = smooth_problem()
    v = ValueField(u0)
    for fn, scheme, wrong in ((hv_step, "hv-explicit-mixed", "implicit-A"),
                              (hv_with_implicit_mixed, "implicit-B", "fully-implicit"),
                              (fully_implicit_step, "fully-implicit", "hv-explicit-mixed")):
        out = fn(v, m, g, SolverConfig(scheme=scheme, dt=0.01), 0.5)
        assert out.tau == pytest.approx(0.01)
        with pytest.raises(ValueError):
            fn(v, m, g, SolverConfig(scheme=wrong), 0.5)


def test_fully_implicit_stage_matches_dense_solves_without_mixed_terms():
    m = ModelSpec(DiffusionParams(q=0.01, kappa_v=1.5, theta_v=0.1, xi_v=0.3, kappa_r=0.5, theta_r=0.05, xi_r=0.1,
                                  local_vol=LocalVolSurface.constant(0.5)))
    g = Grid3D(build_nonuniform_grid(0.0, 300.0, 11, 100.0, 30.0),
               build_nonuniform_grid(0.0, 1.0, 11, 0.0, 0.3),
               build_nonuniform_grid(0.0, 0.25, 11, 0.05, 0.05))
    dt = 0.05
    u = np.random.default_rng(4).uniform(size=g.shape)
    out = implicit_euler_stage(ValueField(u), m, g, SolverConfig(scheme="fully-implicit", dt=dt), 1.0).data
    ops = assemble_operators(m, g, 1.0)
    x = u.ravel()
    eye = np.eye(g.size)
    for F in ops.one_d:
        x = np.linalg.solve(eye - dt * dense3d(F.apply, g.shape), x)
    np.testing.assert_allclose(out.ravel(), x, atol=1e-8)


# --- mixed-derivative solves --------------------------------------------------------


def _pair_grid(n=15):
    return Grid3D(uniform_grid(0.0, 200.0, n), uniform_grid(0.0, 1.0, n), uniform_grid(0.0, 0.1, 3))


def _sv_model(rho):
    return ModelSpec(DiffusionParams(xi_v=0.3, rho_sv=rho, local_vol=LocalVolSurface.constant(1.0)))


@pytest.mark.parametrize("step", [mixed_step_scheme_A, mixed_step_scheme_B])
def test_uncorrelated_mixed_step_is_identity(step):
    g = _pair_grid()
    u = np.random.default_rng(5).uniform(size=g.shape)
    out = step(ValueField(u), (0, 1), _sv_model(0.0), g, SolverConfig(scheme="implicit-B", dt=0.01))
    np.testing.assert_array_equal(out.data, u)


def test_picard_contracts_on_smooth_field():
    g = _pair_grid()
    S, v, _ = g.mesh()
    pair = MixedPair(0, 1, 0.5, np.full((15, 1, 1), 0.4), np.full((1, 15, 1), 0.3))
    cfg = SolverConfig(scheme="implicit-B", dt=0.01)
    diag = Diagnostics()
    u = np.broadcast_to(np.exp(-(((S - 100) / 40) ** 2)) * (1 + v), g.shape).copy()
    mixed_pair_solve(u, build_mixed_factors(pair, g, 0.01, cfg), cfg, diag)
    res = diag.picard[0].residuals
    assert len(res) >= 2 and res[1] < res[0]
    assert all(b < a for a, b in zip(res, res[1:]))


@pytest.mark.parametrize("variant", ["A", "B"])
@pytest.mark.parametrize("rho", [0.5, -0.5])
def test_mixed_solve_keeps_linear_fields_on_every_row(rho, variant):
    # includes the S_max and v_max rows, which leak into the interior through later ADI stages
    g = _pair_grid()
    S, v, _ = g.mesh()
    cfg = SolverConfig(scheme="implicit-" + variant, dt=0.01)
    f = build_mixed_factors(mixed_pairs(_sv_model(rho), g, 0.0)[0], g, 0.01, cfg)
    for field in (S, v, 1 + S + 50 * v):
        u = np.broadcast_to(field, g.shape).copy()
        np.testing.assert_allclose(mixed_pair_solve(u, f, cfg), u, atol=1e-8 * np.abs(u).max())


@pytest.mark.parametrize("rho", [0.5, -0.5])
def test_picard_reaches_its_discrete_fixed_point(rho):
    g = _pair_grid()
    cfg = SolverConfig(scheme="implicit-B", dt=0.01, picard_tol=1e-13, picard_max=200)
    f = build_mixed_factors(mixed_pairs(_sv_model(rho), g, 0.0)[0], g, 0.01, cfg)
    S, v, _ = g.mesh()
    u = np.broadcast_to(np.exp(-(((S - 100) / 40) ** 2)) * (1 + v), g.shape).copy()
    out = mixed_pair_solve(u, f, cfg)
    Lx, Ly = dense3d(f.lhs_x.apply, g.shape), dense3d(f.lhs_y.apply, g.shape)
    alpha = dense3d(f.apply_alpha, g.shape)
    eye = np.eye(g.size)
    fixed = np.linalg.solve(Ly @ Lx + eye, alpha @ u.ravel())
    np.testing.assert_allclose(out.ravel(), fixed, atol=1e-8 * np.abs(fixed).max())


def test_iterate_form_contracts():
    g = _pair_grid()
    cfg = SolverConfig(scheme="implicit-B", dt=0.01, picard_rhs="iterate", picard_max=20)
    f = build_mixed_factors(mixed_pairs(_sv_model(0.5), g, 0.0)[0], g, 0.01, cfg)
    diag = Diagnostics()
    S, v, _ = g.mesh()
    mixed_pair_solve(np.broadcast_to(np.exp(-(((S - 100) / 40) ** 2)) * (1 + v), g.shape).copy(), f, cfg, diag)
    res = diag.picard[0].residuals
    assert all(b < a for a, b in zip(res, res[1:]))


@pytest.mark.parametrize("rho", [0.5, -0.5])
def test_mixed_step_matches_dense_implicit_mixed_solve(rho):
    # [1 - dt rho W_S W_v d2/dSdv] V = V(tau), central differences, 15 x 15
    g = _pair_grid()
    m = _sv_model(rho)
    cfg = SolverConfig(scheme="implicit-B", dt=0.01)
    S, v, _ = g.mesh()
    u = np.broadcast_to(np.exp(-(((S - 100) / 40) ** 2)) * (1 + v), g.shape).copy()
    out = mixed_step_scheme_B(ValueField(u), (0, 1), m, g, cfg).data
    p = mixed_pairs(m, g, 0.0)[0]
    cs, cv = (on_axis(stencil_central(a), k) for k, a in ((0, g.s), (1, g.v)))
    F0 = dense3d(lambda x: p.coefficient * cs.apply(cv.apply(x)), g.shape)
    exact = np.linalg.solve(np.eye(g.size) - 0.01 * F0, u.ravel())
    assert np.abs(out.ravel() - exact).max() <= 10 * cfg.picard_tol * np.abs(exact).max()


def test_scheme_B_spatial_refinement_order():
    diffs, coarse = [], []
    for n in (11, 21, 41, 81):
        g = Grid3D(uniform_grid(0, 2, n), uniform_grid(0, 1, n), uniform_grid(0, 1, 3))
        S, v, _ = g.mesh()
        pair = MixedPair(0, 1, 0.5, np.full((n, 1, 1), 0.5), np.full((1, n, 1), 0.3))
        cfg = SolverConfig(scheme="implicit-B", dt=0.01, picard_tol=1e-12, picard_max=200)
        out = mixed_pair_solve(np.broadcast_to(np.sin(2 * S) * np.cos(3 * v), g.shape).copy(),
                               build_mixed_factors(pair, g, 0.01, cfg), cfg)
        step = (n - 1) // 10
        coarse.append(out[::step, ::step, 1])
    diffs = [np.abs(a - b).max() for a, b in zip(coarse, coarse[1:])]
    orders = np.log2(np.array(diffs[:-1]) / np.array(diffs[1:]))
    assert orders.min() >= 1.8, orders


def test_scheme_B_mixed_step_preserves_positivity():
    g = Grid3D(uniform_grid(0.0, 200.0, 31), uniform_grid(0.0, 1.0, 31), uniform_grid(0.0, 0.1, 3))
    rng = np.random.default_rng(6)
    cfg = SolverConfig(scheme="implicit-B", dt=0.01)
    worst = np.inf
    for k in range(500):
        m = _sv_model(float(rng.uniform(-0.9, 0.9)))
        f = build_mixed_factors(mixed_pairs(m, g, 0.0)[0], g, 0.01, cfg)
        out = mixed_pair_solve(rng.uniform(size=g.shape), f, cfg)
        worst = min(worst, float(out.min()))
    assert worst >= -1e-12, worst


def test_strict_picard_raises_at_the_cap():
    g = _pair_grid()
    cfg = SolverConfig(scheme="implicit-B", dt=0.01, picard_max=1, strict_picard=True)
    f = build_mixed_factors(mixed_pairs(_sv_model(0.5), g, 0.0)[0], g, 0.01, cfg)
    with pytest.raises(PicardError):
        mixed_pair_solve(np.random.default_rng(7).uniform(size=g.shape), f, cfg)


def test_mixed_pair_order_difference_is_second_order_in_dt():
    m, g, u0 = smooth_problem()
    pairs = mixed_pairs(m, g, 0.0)

    def sweep(order, dt):
        cfg = SolverConfig(scheme="implicit-B", dt=dt, picard_tol=1e-12, picard_max=50)
        u = u0
        for k in order:
            u = mixed_pair_solve(u, build_mixed_factors(pairs[k], g, dt, cfg), cfg)
        return u

    d = [np.abs(sweep((0, 1, 2), dt) - sweep((2, 1, 0), dt)).max() for dt in (0.02, 0.01)]
    assert d[0] / d[1] >= 3.0, d


# --- beta -----------------------------------------------------------------------------


def test_beta_direct_evaluation():
    m = ModelSpec(DiffusionParams(xi_v=0.3, a_pow=0.5, c_pow=1.0, rho_sv=-0.5, local_vol=LocalVolSurface.constant(1.0)))
    g = Grid3D(uniform_grid(0.0, 200.0, 11), uniform_grid(0.0, 1.0, 11), uniform_grid(0.0, 0.1, 3))
    assert choose_beta(m, g, (0, 1), 10.0) == pytest.approx(1003.0)


def test_vanishing_vol_of_vol_skips_the_mixed_step():
    m = ModelSpec(DiffusionParams(xi_v=0.0, rho_sv=0.5))
    g = _pair_grid()
    assert build_mixed_factors(mixed_pairs(m, g, 0.0)[0], g, 0.01, SolverConfig()) is None
    assert choose_beta(m, g, (1, 2)) == 0.0


def test_s_r_pair_gets_one_beta_per_variance_slice():
    m = ModelSpec(DiffusionParams(xi_r=0.1, rho_sr=0.3, local_vol=LocalVolSurface.constant(1.0)))
    g = Grid3D(uniform_grid(0.0, 200.0, 11), uniform_grid(0.0, 1.0, 11), uniform_grid(0.0, 0.1, 5))
    beta = choose_beta(m, g, (0, 2))
    assert np.shape(beta) == (1, 11, 1)
    assert np.all(np.diff(beta.ravel()) > 0)


# --- stability surrogate on the double-barrier configuration -----------------------


@pytest.fixture(scope="module")
def barrier_setup(barrier_cfg):
    from lsvpide.pricer import AxisSpec, GridSpec, build_pricing_grid

    spec = GridSpec(AxisSpec(31, 50.0, 130.0, 100.0, 20.0), AxisSpec(15, 0.0, 3.0, 0.0, 0.5),
                    AxisSpec(9, 0.0, 0.25, 0.05, 0.05))
    grid = build_pricing_grid(barrier_cfg.instrument, barrier_cfg.model, spec, barrier_cfg.spot)
    return barrier_cfg, grid


@pytest.mark.slow
@pytest.mark.parametrize("scheme", ["implicit-A", "implicit-B", "fully-implicit"])
def test_twenty_steps_stay_bounded_and_non_negative(barrier_setup, scheme):
    from lsvpide.pricer import apply_boundary_conditions, price, terminal_payoff

    cfg, grid = barrier_setup
    report = {}
    for dt in (0.005, 0.01, 0.05, 0.1):
        inst = replace(cfg.instrument, maturity=20 * dt)
        payoff = apply_boundary_conditions(terminal_payoff(inst, grid), inst, grid).data
        seen = []
        price(inst, cfg.model, grid, replace(cfg.solver, scheme=scheme, dt=dt),
              on_step=lambda tau, u: seen.append((np.abs(u).max(), u.min())))
        assert len(seen) == 20
        report[dt] = (max(s for s, _ in seen) - np.abs(payoff).max(), min(lo for _, lo in seen))
    assert all(excess <= 1e-8 for excess, _ in report.values()), report
    assert all(lo >= -1e-12 for _, lo in report.values()), report
