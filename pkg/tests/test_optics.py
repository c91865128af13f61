import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import constants as sc

from cavload import optics as op
from cavload.constants import KB, RB87_D2_GAMMA, RB87_D2_WAVELENGTH, RB87_MASS

CAV = op.CavityParams()
LAM = 805e-9


def depth_two_level(power, eta=1.0, lam=LAM):
    """Independent route: U = hbar Gamma^2 I / (8 I_sat Delta), I_sat = pi h c Gamma / (3 lam0^3)."""
    p_circ = eta * 1060.0 * power
    i_run = 2 * p_circ / (math.pi * CAV.w0 ** 2)  # peak intensity of one running wave
    intensity = 4 * i_run  # fields add at an antinode
    gamma = RB87_D2_GAMMA
    isat = math.pi * sc.h * sc.c * gamma / (3 * RB87_D2_WAVELENGTH ** 3)
    delta = 2 * math.pi * sc.c * (1 / lam - 1 / RB87_D2_WAVELENGTH)
    return -sc.hbar * gamma ** 2 * intensity / (8 * isat * delta)


def test_mode_intensity_landmarks():
    k = 2 * math.pi / LAM
    assert op.mode_intensity([0.0, 0.0, 0.0], CAV, LAM) == 1.0
    assert op.mode_intensity([math.pi / (2 * k), 0.0, 0.0], CAV, LAM) == pytest.approx(0.0, abs=1e-30)
    assert op.mode_intensity([0.0, CAV.w0, 0.0], CAV, LAM) == pytest.approx(math.exp(-2), rel=1e-14)


@given(st.floats(-1e-3, 1e-3), st.floats(-3e-4, 3e-4), st.floats(-3e-4, 3e-4))
def test_mode_intensity_bounded_and_periodic(x, y, z):
    v = op.mode_intensity([x, y, z], CAV, LAM)
    assert 0.0 <= v <= 1.0
    assert op.mode_intensity([x + LAM / 2, y, z], CAV, LAM) == pytest.approx(v, abs=1e-9)


def test_circulating_power():
    assert op.circulating_power(op.TrapBeam(LAM, 0.0), CAV) == 0.0
    assert op.circulating_power(op.TrapBeam(LAM, 12e-3), CAV) == pytest.approx(12.72, rel=1e-12)
    full = op.circulating_power(op.TrapBeam(LAM, 12e-3), CAV)
    assert op.circulating_power(op.TrapBeam(LAM, 12e-3, 0.5), CAV) == 0.5 * full


@pytest.mark.parametrize("power,eta", [(12e-3, 1.0), (1e-3, 1.0), (3e-3, 0.4)])
def test_trap_depth_vs_two_level_route(power, eta):
    u = op.trap_depth(op.TrapBeam(LAM, power, eta), CAV)
    assert u == pytest.approx(depth_two_level(power, eta), rel=1e-12)


def test_trap_depth_12mW_about_2p2_mK():
    u = op.trap_depth(op.TrapBeam(LAM, 12e-3), CAV) / KB
    assert u == pytest.approx(2.2e-3, rel=0.05)


def test_trap_depth_linear_and_zero():
    assert op.trap_depth(op.TrapBeam(LAM, 0.0), CAV) == 0.0
    a = op.trap_depth(op.TrapBeam(LAM, 1e-3), CAV)
    assert op.trap_depth(op.TrapBeam(LAM, 2e-3), CAV) == 2 * a


def test_blue_detuned_depth_negative():
    assert op.trap_depth(op.TrapBeam(770e-9, 1e-3), CAV) < 0


def test_potential_and_gradient_landmarks():
    u0 = 1e-27
    assert op.dipole_potential([0.0, 0.0, 0.0], u0, CAV, LAM) == -u0
    node = [LAM / 4, 0.0, 0.0]
    assert op.dipole_potential(node, u0, CAV, LAM) == pytest.approx(0.0, abs=1e-40)
    assert np.array_equal(op.dipole_gradient([0.0, 0.0, 0.0], u0, CAV, LAM), np.zeros(3))


@given(st.floats(-1e-6, 1e-6), st.floats(-2e-4, 2e-4), st.floats(-2e-4, 2e-4))
def test_gradient_matches_finite_difference(x, y, z):
    u0 = 1e-27
    r = np.array([x, y, z])
    g = op.dipole_gradient(r, u0, CAV, LAM)
    h = np.array([1e-11, 1e-9, 1e-9])
    fd = [(op.dipole_potential(r + h[k] * np.eye(3)[k], u0, CAV, LAM)
           - op.dipole_potential(r - h[k] * np.eye(3)[k], u0, CAV, LAM)) / (2 * h[k])
          for k in range(3)]
    assert np.allclose(g, fd, rtol=1e-4, atol=1e-6 * u0 / CAV.w0)


def test_trap_frequencies_from_curvature():
    u0 = op.trap_depth(op.TrapBeam(LAM, 1e-3), CAV)
    h = 1e-10
    f = lambda r: op.dipole_potential(r, u0, CAV, LAM)
    kx = (f([h, 0, 0]) - 2 * f([0, 0, 0]) + f([-h, 0, 0])) / h ** 2
    assert op.axial_frequency(u0, LAM) == pytest.approx(math.sqrt(kx / RB87_MASS), rel=1e-4)
    h = 1e-7
    ky = (f([0, h, 0]) - 2 * f([0, 0, 0]) + f([0, -h, 0])) / h ** 2
    assert op.radial_frequency(u0, CAV.w0) == pytest.approx(math.sqrt(ky / RB87_MASS), rel=1e-4)


def test_rayleigh_range_guard():
    assert op.rayleigh_range(127e-6, LAM) == pytest.approx(0.063, rel=0.01)
    with pytest.raises(ValueError):
        op.OpticalSetup(op.CavityParams(w0=5e-6))


def test_invalid_parameters():
    with pytest.raises(ValueError):
        op.TrapBeam(LAM, 1e-3, efficiency=1.5)
    with pytest.raises(ValueError):
        op.CavityParams(kappa=-1.0)
