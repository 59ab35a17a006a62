import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from icec1d.grids import Grid1D
from icec1d.model import (CalibrationError, ModelParams, PairSpec, atom_ground_energy,
                          calibrate_charge, effective_potential, electron_nuclei_potential,
                          total_potential_3d)

mp.mp.dps = 30


def transverse_average(z, q, l_alpha, l_c):
    """Independent oracle: Gaussian transverse average of q exp(-r/l_alpha)/r.

    V(z) = q / (2 s^2) * int_0^inf 2 pi rho exp(-rho^2/s^2) exp(-r/l_alpha)/r d rho,
    with r = sqrt(z^2 + rho^2) and s = sqrt(2) l_c.
    """
    s = mp.sqrt(2) * l_c
    z = mp.mpf(z)
    inv_la = 0 if l_alpha is None else 1 / mp.mpf(l_alpha)

    def f(rho):
        r = mp.sqrt(z * z + rho * rho)
        return 2 * mp.pi * rho * mp.exp(-rho ** 2 / s ** 2 - r * inv_la) / r

    # dense breakpoints: the Yukawa factor varies on sqrt(|z| l_alpha) in rho
    pts = [s * k / 4 for k in range(80)] + [mp.inf]
    return float(q * mp.quad(f, pts, maxdegree=10) / (2 * s ** 2))


@pytest.mark.parametrize("z", [0.0, 0.3, 1.0, 2.5, 7.0, 25.0, 80.0])
@pytest.mark.parametrize("l_alpha", [None, 0.5, 1.986, 20.0])
def test_effective_potential_matches_quadrature(z, l_alpha):
    pair = PairSpec(-1.453, l_alpha)
    got = effective_potential(z, pair, 1.25)
    ref = transverse_average(z, -1.453, l_alpha, 1.25)
    # tanh-sinh plateaus near 1e-12 relative on the deepest Yukawa tails
    assert got == pytest.approx(ref, rel=1e-10, abs=1e-300)


def test_large_separation_no_overflow():
    z = np.array([1e3, 1e5, 1e8, 1e12])
    v = effective_potential(z, PairSpec(1.0, None), 1.25)
    assert np.all(np.isfinite(v))
    # Coulomb tail (pi/2) q / |z|
    np.testing.assert_allclose(v * z, np.pi / 2, rtol=1e-5)
    vy = effective_potential(z, PairSpec(1.0, 1.986), 1.25)
    assert np.all(np.isfinite(vy)) and np.all(vy >= 0)


def test_yukawa_tail_decay():
    z = np.array([30.0, 40.0])
    v = effective_potential(z, PairSpec(1.0, 2.0), 1.25)
    ratio = v[1] / v[0]
    # Yukawa law up to the Gaussian broadening of the transverse average
    assert ratio == pytest.approx(30.0 / 40.0 * math.exp(-10.0 / 2.0), rel=2e-2)


@given(st.floats(-200, 200), st.floats(0.2, 50.0), st.floats(0.3, 5.0))
def test_even_finite_and_monotone(z, l_alpha, l_c):
    pair = PairSpec(1.0, l_alpha)
    v = effective_potential(z, pair, l_c)
    assert math.isfinite(v) and v >= 0
    assert v == effective_potential(-z, pair, l_c)
    assert effective_potential(abs(z) + 0.1, pair, l_c) <= v


@given(st.floats(0.1, 5.0), st.floats(0.1, 3.0))
def test_screening_lowers_interaction(z, l_c):
    coul = effective_potential(z, PairSpec(1.0, None), l_c)
    yuk = effective_potential(z, PairSpec(1.0, 1.0), l_c)
    assert yuk < coul


def test_scale_and_charge_linearity():
    z = np.linspace(-5, 5, 11)
    a = effective_potential(z, PairSpec(2.0, 1.5, 0.8), 1.25)
    b = effective_potential(z, PairSpec(1.0, 1.5), 1.25)
    np.testing.assert_allclose(a, 1.6 * b, rtol=1e-15)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        PairSpec(1.0, 0.0)
    with pytest.raises(ValueError):
        effective_potential(1.0, PairSpec(1.0), 0.0)
    with pytest.raises(ValueError):
        effective_potential(np.nan, PairSpec(1.0), 1.0)
    with pytest.raises(ValueError):
        ModelParams(l_c=-1.0)


def test_params_roundtrip_and_unknown_keys():
    p = ModelParams()
    assert ModelParams.from_dict(p.to_dict()) == p
    with pytest.raises((KeyError, ValueError)):
        ModelParams.from_dict({**p.to_dict(), "bogus": 1.0})


def test_centre_of_mass_positions():
    p = ModelParams()
    R = 2.0
    assert p.c_He * R - p.c_Ne * R == pytest.approx(R, rel=1e-15)
    # centre of mass at the origin
    assert p.m_He * p.c_He + p.m_Ne * p.c_Ne == pytest.approx(0.0, abs=1e-9)


def test_total_potential_is_sum_of_pairs():
    p = ModelParams()
    z1, z2, R = 0.7, -2.1, 1.9
    lc = p.l_c
    ref = (effective_potential(z1 - z2, PairSpec(1.0), lc)
           + electron_nuclei_potential(z1, R, p) + electron_nuclei_potential(z2, R, p)
           + effective_potential(R, PairSpec(p.q_Ne * p.q_He, p.l_alpha, p.beta), lc))
    assert total_potential_3d(z1, z2, R, p) == pytest.approx(ref, rel=1e-14)
    # electron exchange symmetry of the potential
    assert total_potential_3d(z2, z1, R, p) == total_potential_3d(z1, z2, R, p)


def test_atom_ground_energy_converged_in_grid():
    coarse = atom_ground_energy(1.453, 1.986, 1.25, grid=Grid1D.from_spacing(-40, 40, 0.1))
    fine = atom_ground_energy(1.453, 1.986, 1.25, grid=Grid1D.from_spacing(-60, 60, 0.05))
    assert abs(coarse - fine) < 2e-4
    assert -0.71 < fine < -0.70


def test_calibration_inverts_forward_solve():
    grid = Grid1D.from_spacing(-40, 40, 0.1)
    e = atom_ground_energy(1.6, 1.986, 1.25, grid=grid)
    q = calibrate_charge(e, 1.986, 1.25, grid=grid)
    assert q == pytest.approx(1.6, abs=1e-7)


def test_calibration_expands_bracket():
    grid = Grid1D.from_spacing(-40, 40, 0.1)
    e = atom_ground_energy(4.2, 1.986, 1.25, grid=grid)
    assert calibrate_charge(e, 1.986, 1.25, grid=grid) == pytest.approx(4.2, abs=1e-7)


def test_calibration_rejects_impossible_targets():
    grid = Grid1D.from_spacing(-40, 40, 0.1)
    with pytest.raises(CalibrationError):
        calibrate_charge(0.1, 1.986, 1.25, grid=grid)
    with pytest.raises(CalibrationError, match="not bracketed"):
        calibrate_charge(-1e4, 1.986, 1.25, grid=grid, q_max=5.0)
