import cmath
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import ROW_R, ROW_S, ROW_V, ROW_Z
from lsvpide.model import (
    DegenerateCorrelationError, DiffusionParams, JumpStructure, LocalVolSurface, MeixnerParams, ModelSpec,
    PiecewiseConstant, cosine_law_rho, meixner_char_exponent, meixner_char_exponent_array, meixner_levy_density,
    model_from_dict, model_to_dict, pairwise_jump_correlation, total_correlation,
)

meixner = st.builds(
    MeixnerParams,
    a=st.floats(0.005, 2.0),
    b=st.floats(-3.0, 3.0),
    d=st.floats(0.0, 100.0),
    m=st.floats(-1.0, 1.0),
)


def mp_exponent(u, p):
    """Closed form at 30 digits, independent of the solver's branch handling."""
    with mp.workdps(30):
        val = 2 * p.d * (mp.log(mp.cos(mp.mpf(p.b) / 2)) - mp.log(mp.cosh((p.a * u - 1j * p.b) / 2))) + 1j * p.m * u
        return complex(val)


# --- Meixner characteristic exponent -----------------------------------------


def test_exponent_vanishes_at_zero():
    for p in (ROW_S, ROW_V, ROW_R, ROW_Z):
        assert abs(meixner_char_exponent(0.0, p)) < 1e-12


def test_exponent_row_s_at_one():
    # 30-digit evaluation of the closed form
    ref = complex(-0.0213751753534359633, -0.246301382908019509)
    got = meixner_char_exponent(1.0, ROW_S)
    assert abs(got - ref) < 1e-13


def test_exponent_symmetric_case_is_real_nonpositive():
    p = MeixnerParams(a=0.3, b=0.0, d=5.0, m=0.0)
    for u in (-7.0, 0.5, 3.0, 40.0):
        val = meixner_char_exponent(u, p)
        assert abs(val.imag) < 1e-14
        assert val.real == pytest.approx(-2 * p.d * math.log(math.cosh(p.a * u / 2)), rel=1e-12)
        assert val.real <= 0


@given(p=meixner, u=st.floats(-200.0, 200.0))
def test_exponent_matches_high_precision(p, u):
    ref = mp_exponent(u, p)
    got = meixner_char_exponent(u, p)
    assert abs(got - ref) <= 1e-9 * max(1.0, abs(ref))


@given(p=meixner, u=st.floats(-200.0, 200.0))
def test_exponent_hermitian(p, u):
    assert meixner_char_exponent(-u, p) == pytest.approx(meixner_char_exponent(u, p).conjugate(), abs=1e-9)


@given(p=meixner, u=st.floats(-200.0, 200.0))
def test_exponent_real_part_nonpositive(p, u):
    assert meixner_char_exponent(u, p).real <= 1e-10


def test_exponent_array_matches_scalar():
    u = np.linspace(-50, 50, 41)
    arr = meixner_char_exponent_array(u, ROW_V)
    assert np.allclose(arr, [meixner_char_exponent(x, ROW_V) for x in u], atol=1e-12)


def test_variance_is_second_cumulant():
    # -phi''(0) by a central difference of the closed form
    p = ROW_Z
    h = 1e-3
    second = (meixner_char_exponent(h, p) - 2 * meixner_char_exponent(0, p) + meixner_char_exponent(-h, p)) / h**2
    assert -second.real == pytest.approx(p.variance, rel=1e-5)


@pytest.mark.parametrize("kw", [dict(a=0.0, b=0.0, d=1.0), dict(a=1.0, b=math.pi, d=1.0),
                                dict(a=1.0, b=0.0, d=-1.0)])
def test_meixner_rejects_invalid(kw):
    with pytest.raises(ValueError):
        MeixnerParams(**kw)


# --- Levy density -------------------------------------------------------------


def test_levy_density_row_r():
    ref = 6.65280807727462989e-05  # 30-digit closed form
    assert float(meixner_levy_density(0.05, ROW_R)) == pytest.approx(ref, rel=1e-12)


def test_levy_density_symmetric_and_zero_intensity():
    p = MeixnerParams(a=0.2, b=0.0, d=3.0)
    y = np.array([0.01, 0.3, 1.7])
    assert np.allclose(meixner_levy_density(y, p), meixner_levy_density(-y, p), rtol=1e-14)
    assert np.all(meixner_levy_density(y, MeixnerParams(a=0.2, b=0.4, d=0.0)) == 0.0)
    with pytest.raises(ValueError):
        meixner_levy_density(0.0, p)


@given(p=meixner, y=st.floats(1e-4, 5.0), sign=st.sampled_from([-1.0, 1.0]))
def test_levy_density_positive(p, y, sign):
    val = float(meixner_levy_density(sign * y, p))
    if p.d > 0:
        assert val >= 0.0 and math.isfinite(val)
        with mp.workdps(30):
            x = mp.mpf(sign * y)
            ref = p.d * mp.exp(p.b * x / p.a) / (x * mp.sinh(mp.pi * x / p.a))
        assert val == pytest.approx(float(ref), rel=1e-9, abs=1e-300)


# --- correlations ---------------------------------------------------------------


def test_pairwise_zero_loading(jump_structure):
    js = JumpStructure(ROW_S, ROW_V, ROW_R, ROW_Z, (0.0, 2.0, 3.0))
    assert pairwise_jump_correlation(0, 1, js) == 0.0


def test_pairwise_large_loadings_tend_to_one():
    js = JumpStructure(ROW_S, ROW_V, ROW_R, ROW_Z, (1e3, 1e3, 1e3))
    assert pairwise_jump_correlation(0, 1, js) == pytest.approx(1.0, abs=1e-3)
    assert pairwise_jump_correlation(1, 2, js) == pytest.approx(1.0, abs=1e-3)


def test_pairwise_matches_simulated_increments(jump_structure):
    # sample correlations of Y_i + b_i Z from 10^6 inverse-CDF draws of the Meixner law at t = 1
    mc = {(0, 1): (0.514965, 7.35e-4), (0, 2): (0.541819, 7.06e-4), (1, 2): (0.941275, 1.14e-4)}
    for (i, j), (ref, se) in mc.items():
        assert abs(pairwise_jump_correlation(i, j, jump_structure) - ref) < 4 * se


def test_pairwise_degenerate():
    with pytest.raises(DegenerateCorrelationError):
        pairwise_jump_correlation(0, 1, JumpStructure())


@given(i=st.sampled_from([0, 1, 2]), j=st.sampled_from([0, 1, 2]),
       b=st.tuples(*[st.floats(-5, 5).filter(lambda x: abs(x) > 1e-3)] * 3))
def test_pairwise_sign_flip(i, j, b):
    if i == j:
        return
    js = JumpStructure(ROW_S, ROW_V, ROW_R, ROW_Z, b)
    flipped = list(b)
    flipped[i] = -flipped[i]
    js2 = JumpStructure(ROW_S, ROW_V, ROW_R, ROW_Z, tuple(flipped))
    c1, c2 = pairwise_jump_correlation(i, j, js), pairwise_jump_correlation(i, j, js2)
    assert c2 == -c1
    assert -1.0 <= c1 <= 1.0
    assert math.copysign(1.0, c1) == math.copysign(1.0, b[i] * b[j])


def test_total_correlation_reduces_to_rho():
    js = JumpStructure()
    assert total_correlation(0, 1, 0.2, 0.3, -0.587, js) == pytest.approx(-0.587, abs=1e-14)
    assert total_correlation(0, 1, 0.2, 0.3, 0.41, None) == pytest.approx(0.41, abs=1e-14)


def test_total_correlation_pure_jumps(jump_structure):
    assert total_correlation(0, 2, 0.0, 0.0, 0.0, jump_structure) == pytest.approx(
        pairwise_jump_correlation(0, 2, jump_structure), abs=1e-15)


def test_total_correlation_mixed_case(jump_structure):
    # symbolic evaluation with the variance taken as -phi''(0) of the exponent
    assert total_correlation(0, 1, 0.2, 0.3, -0.587, jump_structure) == pytest.approx(0.0066335803754514756, rel=1e-12)
    assert total_correlation(0, 2, 0.2, 0.1, 0.3, jump_structure) == pytest.approx(0.45417805643819951, rel=1e-12)
    assert total_correlation(1, 2, 0.3, 0.1, 0.4, jump_structure) == pytest.approx(0.69801383775992015, rel=1e-12)


@given(rho=st.floats(-1, 1), si=st.floats(0.01, 2), sj=st.floats(0.01, 2))
def test_total_correlation_without_jumps_is_rho(rho, si, sj):
    assert abs(total_correlation(0, 1, si, sj, rho, JumpStructure()) - rho) <= 1e-14


# --- cosine law and PSD -----------------------------------------------------------


def test_cosine_law_examples():
    assert cosine_law_rho(0.0, 0.0, 4 * math.pi / 5) == pytest.approx(-0.809017, abs=1e-6)
    assert round(cosine_law_rho(0.3, 0.4, 4 * math.pi / 5), 3) == -0.587
    assert cosine_law_rho(0.5, 0.5, math.pi / 2) == pytest.approx(0.25, abs=1e-15)


@given(a=st.floats(-1, 1), b=st.floats(-1, 1), phi=st.floats(0, math.pi))
def test_cosine_law_gives_psd(a, b, phi):
    rho_sv = cosine_law_rho(a, b, phi)
    d = DiffusionParams(rho_sv=max(-1.0, min(1.0, rho_sv)), rho_sr=a, rho_vr=b)
    assert np.linalg.eigvalsh(d.correlation_matrix()).min() >= -1e-12


def test_non_psd_rejected():
    with pytest.raises(ValueError):
        DiffusionParams(rho_sv=0.9, rho_sr=0.9, rho_vr=-0.9)


@pytest.mark.parametrize("kw", [dict(a_pow=2.0), dict(kappa_v=-1.0), dict(theta_r=0.0), dict(rho_sv=1.5)])
def test_diffusion_params_validation(kw):
    with pytest.raises(ValueError):
        DiffusionParams(**kw)


# --- time dependence, local vol, serialization -------------------------------------


def test_piecewise_constant_left_endpoint():
    f = PiecewiseConstant([0.0, 0.5, 1.0], [1.0, 2.0, 3.0])
    assert (f(0.0), f(0.49), f(0.5), f(2.0)) == (1.0, 1.0, 2.0, 3.0)
    with pytest.raises(ValueError):
        PiecewiseConstant([0.1, 0.2], [1.0, 2.0])


def test_local_vol_bilinear():
    lv = LocalVolSurface([50.0, 150.0], [0.0, 1.0], [[0.2, 0.4], [0.3, 0.5]])
    assert float(lv(100.0, 0.5)) == pytest.approx(0.35)
    assert float(lv(10.0, 0.0)) == pytest.approx(0.2)  # flat extrapolation
    assert np.all(LocalVolSurface.constant()(np.array([1.0, 500.0]), 0.3) == 1.0)


def test_model_round_trip(jump_structure):
    d = DiffusionParams(q=0.01, kappa_v=PiecewiseConstant([0.0, 0.5], [2.0, 2.5]), rho_sv=-0.5, rho_vr=0.2,
                        local_vol=LocalVolSurface([80.0, 120.0], [0.0], [[0.9, 1.1]]))
    m = ModelSpec(d, jump_structure)
    assert model_from_dict(model_to_dict(m)) == m
    assert m.has_jumps and not m.without_jumps().has_jumps


def test_trivial_jumps_are_no_jumps():
    js = JumpStructure(common=MeixnerParams(a=0.1, b=0.0, d=10.0), loadings=(0.0, 0.0, 0.0))
    assert not ModelSpec(DiffusionParams(), js).has_jumps


def test_scaled_loadings(jump_structure):
    assert jump_structure.scaled_loadings(10.0).loadings == (10.0, 20.0, 30.0)


def test_log_cosh_branch_is_continuous():
    # large |Im| arguments cross many branch cuts of the principal log
    p = MeixnerParams(a=1.0, b=3.0, d=1.0)
    us = np.linspace(-60, 60, 200001)
    vals = meixner_char_exponent_array(us, p)
    # |d Im phi / du| <= 2 d a |tan(b/2)| / 2, so a 6e-4 step moves it by < 0.01
    assert np.abs(np.diff(vals.imag)).max() < 0.01
    assert cmath.isfinite(vals[0])
