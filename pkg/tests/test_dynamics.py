import cmath
import math

import numpy as np
import pytest

from helpers import GOOD_JT, GOOD_LAM, random_symmetric_series
from qpwave.dynamics import ComplexSeries, StepUnstable, evolve, nonlinear_term, standing_wave_deviation
from qpwave.lattice import Region, symbol
from qpwave.series import QPSeries, conv_power
from qpwave.solver import ProblemConfig, solve


def good_cfg(**kw):
    base = dict(d=1, p=1, a=0.01, jtilde=GOOD_JT, lam=GOOD_LAM)
    base.update(kw)
    return ProblemConfig(**base)


# --------------------------------------------------------------------------
# the nonlinear term

@pytest.mark.parametrize("p", [1, 2])
def test_nonlinear_term_constant_field(p):
    a = 0.7
    C = ComplexSeries(1, {(0, 0): a})
    out = nonlinear_term(C, p, Region.full_box(2))
    assert set(out.coeffs) == {(0, 0)}
    assert out.get((0, 0)) == pytest.approx(a ** (2 * p + 1), rel=1e-13)


@pytest.mark.parametrize("p", [1, 2])
def test_nonlinear_term_real_symmetric_matches_convolution_power(p):
    rng = np.random.default_rng(0)
    u = random_symmetric_series(1, rng, n_orbits=3, box_n=2, scale=0.3)
    C = ComplexSeries.from_profile(u)
    box = Region.full_box(12)
    out = nonlinear_term(C, p, box)
    ref = conv_power(u, 2 * p + 1, box)
    for j in set(out.coeffs) | set(ref.coeffs):
        got = out.get(j)
        assert abs(got.imag) <= 1e-14
        assert got.real == pytest.approx(ref.get(j), rel=1e-11, abs=1e-13)


def test_nonlinear_term_collocation_oracle():
    # sample |U|^2 U pointwise on a quasi-random set and project back onto
    # the expected modes by least squares; agreement to 1e-6
    rng = np.random.default_rng(1)
    modes = [(0, 0), (1, 1), (-1, -1), (2, -1), (-2, 1)]
    C = ComplexSeries(1, {j: complex(rng.normal(), rng.normal()) * 0.5 for j in modes})
    p = 1
    out = nonlinear_term(C, p, Region.full_box(9))
    out_modes = sorted(out.coeffs)
    xs = rng.uniform(0.0, 60.0, size=max(50, 2 * len(out_modes)))

    def field(x):
        return sum(v * cmath.exp(1j * (j[0] * GOOD_LAM[0] + j[1] * GOOD_LAM[1]) * x)
                   for j, v in C.coeffs.items())

    target = np.array([abs(field(x)) ** (2 * p) * field(x) for x in xs])
    design = np.array([[cmath.exp(1j * (j[0] * GOOD_LAM[0] + j[1] * GOOD_LAM[1]) * x)
                        for j in out_modes] for x in xs])
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    for j, c in zip(out_modes, coef):
        assert abs(c - out.get(j)) <= 1e-6


def test_nonlinear_term_respects_box():
    C = ComplexSeries(1, {(2, 2): 0.5, (-2, -2): 0.5})
    out = nonlinear_term(C, 1, Region.full_box(3))
    assert all(max(abs(c) for c in j) <= 3 for j in out.coeffs)


# --------------------------------------------------------------------------
# evolution

def test_linear_evolution_is_exact_phase():
    a = 0.3
    C0 = ComplexSeries(1, {GOOD_JT: a / 2, (-1, -1): a / 2})
    T, dt = 1.0, 1e-2
    res = evolve(C0, GOOD_LAM, 1, T, dt, Region.full_box(3), nonlinear=False,
                 phase_reference=symbol(GOOD_JT, GOOD_LAM))
    assert res.max_deviation <= 1e-12
    assert res.mass_drift <= 1e-13


@pytest.mark.parametrize("p", [1, 2])
def test_constant_branch_phase_rotation(p):
    # the constant field rotates with phase +|a|^(2p) t
    a = 0.5
    C0 = ComplexSeries(1, {(0, 0): complex(a)})
    T, dt = 1.0, 1e-3
    res = evolve(C0, GOOD_LAM, p, T, dt, Region.full_box(2),
                 phase_reference=-(a ** (2 * p)))
    assert res.max_deviation <= 1e-10
    assert res.mass_drift <= 1e-12


def test_scheme_order_against_closed_form():
    # halving dt cuts the error by >= ~2^4 for the constant-field closed form
    a, p, T = 0.6, 1, 2.0
    exact = a * cmath.exp(1j * a ** (2 * p) * T)
    errs = []
    for dt in (0.04, 0.02):
        res = evolve(ComplexSeries(1, {(0, 0): complex(a)}), GOOD_LAM, p, T, dt,
                     Region.full_box(1))
        errs.append(abs(res.final.get((0, 0)) - exact))
    assert errs[0] > 0
    assert errs[0] / errs[1] >= 12.0


def test_mass_drift_fourth_order_reduction():
    rng = np.random.default_rng(2)
    u = random_symmetric_series(1, rng, n_orbits=3, box_n=1, scale=0.4)
    C0 = ComplexSeries.from_profile(u)
    drifts = []
    for dt in (0.02, 0.01):
        res = evolve(C0, GOOD_LAM, 1, 1.0, dt, Region.full_box(4))
        drifts.append(res.mass_drift)
    assert drifts[0] / max(drifts[1], 1e-18) >= 10.0


def test_phase_equivariance():
    rng = np.random.default_rng(3)
    u = random_symmetric_series(1, rng, n_orbits=2, box_n=1, scale=0.3)
    C0 = ComplexSeries.from_profile(u)
    phi = 0.739
    C0_rot = ComplexSeries(1, {j: v * cmath.exp(1j * phi) for j, v in C0.coeffs.items()})
    box = Region.full_box(4)
    r1 = evolve(C0, GOOD_LAM, 1, 0.5, 1e-2, box)
    r2 = evolve(C0_rot, GOOD_LAM, 1, 0.5, 1e-2, box)
    for j in set(r1.final.coeffs) | set(r2.final.coeffs):
        assert abs(r2.final.get(j) - r1.final.get(j) * cmath.exp(1j * phi)) <= 1e-12


def test_evenness_preserved_but_not_reality():
    # the even subspace is flow-invariant; literal realness of the field is
    # not (free evolution already rotates each mode's phase)
    rng = np.random.default_rng(4)
    u = random_symmetric_series(1, rng, n_orbits=3, box_n=1, scale=0.3)
    C0 = ComplexSeries.from_profile(u)
    assert C0.reality_defect() == 0.0
    assert C0.evenness_defect() == 0.0
    res = evolve(C0, GOOD_LAM, 1, 0.5, 1e-2, Region.full_box(4))
    assert res.final.evenness_defect() <= 1e-12
    assert res.final.reality_defect() > 1e-3  # phases rotated, as they must


def test_derotated_standing_wave_stays_real():
    # for a constructed solution the conjugate symmetry is restored by
    # removing the eigenvalue phase
    rec = solve(good_cfg())
    C0 = ComplexSeries.from_profile(rec.u)
    res = evolve(C0, rec.config.lam, 1, 0.25, 1e-3, Region.full_box(12))
    t_final = res.times[-1]
    derotated = ComplexSeries(1, {j: v * cmath.exp(1j * rec.E * t_final)
                                  for j, v in res.final.coeffs.items()})
    assert derotated.reality_defect() <= 1e-8 * rec.u.linf_norm()


def test_step_unstable_raises():
    C0 = ComplexSeries(1, {(0, 0): 8.0, (1, 1): 4.0, (-1, -1): 4.0})
    with pytest.raises(StepUnstable):
        evolve(C0, GOOD_LAM, 1, 1.0, 0.5, Region.full_box(2))


def test_out_of_box_mass_reported():
    C0 = ComplexSeries(1, {(2, 2): 0.4, (-2, -2): 0.4})
    res = evolve(C0, GOOD_LAM, 1, 0.1, 1e-2, Region.full_box(2))
    assert res.max_out_of_box > 0.0


# --------------------------------------------------------------------------
# standing waves

def test_standing_wave_zero_amplitude():
    rec = solve(good_cfg(a=0.0))
    assert standing_wave_deviation(rec, T=0.5, dt=1e-2) == 0.0


def test_standing_wave_constant_branch():
    rec = solve(ProblemConfig(d=1, p=1, a=0.25, jtilde=(0, 0), lam=GOOD_LAM))
    dev = standing_wave_deviation(rec, T=1.0, dt=1e-3, box=Region.full_box(2))
    assert dev <= 1e-10


def test_standing_wave_accepted_solution_quick():
    rec = solve(good_cfg())
    dev = standing_wave_deviation(rec, T=0.25, dt=1e-3, box=Region.full_box(12))
    assert dev <= 1e-6


def test_standing_wave_requires_accepted_record():
    rec = solve(good_cfg())
    rec.accepted = False
    with pytest.raises(ValueError):
        standing_wave_deviation(rec, T=0.1, dt=1e-2)


def test_deviation_scales_with_residual():
    # run the dynamics on the seed pair (loose) and the converged pair
    # (tight); deviation tracks the residual roughly linearly
    devs, resids = [], []
    for tol in (1e-6, 1e-12):
        rec = solve(good_cfg(residual_tol=tol))
        assert rec.accepted
        resids.append(max(rec.diagnostics["final_residual"], 1e-300))
        dev = standing_wave_deviation(rec, T=0.5, dt=2e-4, box=Region.full_box(12))
        devs.append(max(dev, 1e-300))
    slope = math.log(devs[0] / devs[1]) / math.log(resids[0] / resids[1])
    assert 0.6 <= slope <= 1.4
