"""Cavity mode geometry, power buildup and dipole potentials.

The mode is a TEM00 standing wave with a constant waist along the cavity;
with the Table-1 waist the Rayleigh range at 805 nm is about 6 cm, more
than four cavity lengths.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .constants import C, RB87_D2_GAMMA, RB87_D2_WAVELENGTH, RB87_MASS


@dataclass(frozen=True)
class CavityParams:
    kappa: float = 2 * np.pi * 3e6
    finesse_over_pi: float = 1060.0
    length: float = 1.5e-2
    fsr: float = 10e9
    w0: float = 127e-6
    g0: float = 2 * np.pi * 0.33e6
    axis: tuple = (1.0, 0.0, 0.0)
    mode_center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("kappa", "finesse_over_pi", "length", "fsr", "w0", "g0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"cavity parameter {name} must be positive")
        if abs(self.fsr / (C / (2 * self.length)) - 1) > 0.01:
            raise ValueError("fsr inconsistent with c/(2*length)")
        # the tabulated kappa and finesse differ by a factor ~2 from each
        # other, so only gross inconsistencies are rejected
        kappa_est = np.pi * self.fsr / (self.finesse_over_pi * np.pi)
        if not 1 / 3 < kappa_est / self.kappa < 3:
            raise ValueError("kappa inconsistent with fsr/finesse")
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValueError("cavity axis must have unit norm")


@dataclass(frozen=True)
class TrapBeam:
    wavelength: float
    input_power: float = 0.0
    efficiency: float = 1.0
    transition_wavelength: float = RB87_D2_WAVELENGTH
    linewidth: float = RB87_D2_GAMMA

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("incoupling efficiency must lie in [0, 1]")
        if self.wavelength == self.transition_wavelength:
            raise ValueError("beam is resonant with the transition")
        if self.input_power < 0:
            raise ValueError("input power must be non-negative")


def rayleigh_range(w0: float, wavelength: float) -> float:
    return np.pi * w0 * w0 / wavelength


@njit(cache=True, nogil=True, inline="always")
def _mode_geom(x, y, z, cx, cy, cz, ux, uy, uz):
    dx, dy, dz = x - cx, y - cy, z - cz
    za = dx * ux + dy * uy + dz * uz
    px, py, pz = dx - za * ux, dy - za * uy, dz - za * uz
    return za, px, py, pz


@njit(cache=True, nogil=True, inline="always")
def _psi2(x, y, z, cx, cy, cz, ux, uy, uz, k, w0):
    za, px, py, pz = _mode_geom(x, y, z, cx, cy, cz, ux, uy, uz)
    c = np.cos(k * za)
    return c * c * np.exp(-2.0 * (px * px + py * py + pz * pz) / (w0 * w0))


@njit(cache=True, nogil=True, inline="always")
def _lattice_grad(x, y, z, cx, cy, cz, ux, uy, uz, k, w0):
    """psi^2 and its gradient."""
    za, px, py, pz = _mode_geom(x, y, z, cx, cy, cz, ux, uy, uz)
    c = np.cos(k * za)
    s = np.sin(k * za)
    env = np.exp(-2.0 * (px * px + py * py + pz * pz) / (w0 * w0))
    c2 = c * c
    fa = -2.0 * k * c * s * env
    fr = -4.0 * c2 * env / (w0 * w0)
    return c2 * env, fa * ux + fr * px, fa * uy + fr * py, fa * uz + fr * pz


@njit(cache=True, nogil=True)
def _psi2_array(pos, cx, cy, cz, ux, uy, uz, k, w0, out):
    for i in range(pos.shape[0]):
        out[i] = _psi2(pos[i, 0], pos[i, 1], pos[i, 2], cx, cy, cz, ux, uy, uz, k, w0)


@njit(cache=True, nogil=True)
def _lattice_grad_array(pos, cx, cy, cz, ux, uy, uz, k, w0, val, grad):
    for i in range(pos.shape[0]):
        r = _lattice_grad(pos[i, 0], pos[i, 1], pos[i, 2], cx, cy, cz, ux, uy, uz, k, w0)
        val[i] = r[0]
        grad[i, 0] = r[1]
        grad[i, 1] = r[2]
        grad[i, 2] = r[3]


def _mode_args(cav: CavityParams, wavelength: float):
    c = np.asarray(cav.mode_center, float)
    u = np.asarray(cav.axis, float)
    return (c[0], c[1], c[2], u[0], u[1], u[2], 2 * np.pi / wavelength, cav.w0)


def mode_intensity(r, cav: CavityParams, wavelength: float):
    """Normalized standing-wave intensity cos^2(k z) exp(-2 rho^2/w0^2)."""
    pts = np.ascontiguousarray(np.atleast_2d(np.asarray(r, float)))
    out = np.empty(len(pts))
    _psi2_array(pts, *_mode_args(cav, wavelength), out)
    return out[0] if np.ndim(r) == 1 else out


def circulating_power(beam: TrapBeam, cav: CavityParams) -> float:
    """Resonant intracavity power eta * (F/pi) * P_in."""
    return beam.efficiency * cav.finesse_over_pi * beam.input_power


def antinode_intensity(power: float, w0: float) -> float:
    """Peak intensity of a standing wave whose running waves each carry ``power``."""
    return 8.0 * power / (np.pi * w0 * w0)


def dipole_prefactor(beam: TrapBeam) -> float:
    """U0 per unit antinode intensity (J m^2/W); negative for blue detuning."""
    w_t = 2 * np.pi * C / beam.transition_wavelength
    w_l = 2 * np.pi * C / beam.wavelength
    delta = w_l - w_t
    return -(3 * np.pi * C ** 2 / (2 * w_t ** 3)) * (beam.linewidth / delta)


def trap_depth(beam: TrapBeam, cav: CavityParams) -> float:
    """Well depth U0 (J) at the antinode of the intracavity standing wave.

    Positive for a red-detuned (attractive) beam.  A blue-detuned beam
    returns a negative value, so ``-U0 * psi^2`` stays the correct potential.
    """
    intensity = antinode_intensity(circulating_power(beam, cav), cav.w0)
    return dipole_prefactor(beam) * intensity


def dipole_potential(r, depth: float, cav: CavityParams, wavelength: float):
    return -depth * mode_intensity(r, cav, wavelength)


def dipole_gradient(r, depth: float, cav: CavityParams, wavelength: float):
    pts = np.ascontiguousarray(np.atleast_2d(np.asarray(r, float)))
    val = np.empty(len(pts))
    grad = np.empty_like(pts)
    _lattice_grad_array(pts, *_mode_args(cav, wavelength), val, grad)
    grad *= -depth
    return grad[0] if np.ndim(r) == 1 else grad


def axial_frequency(depth: float, wavelength: float, mass: float = RB87_MASS) -> float:
    """Small-oscillation angular frequency along the lattice (rad/s)."""
    return 2 * np.pi / wavelength * np.sqrt(2 * abs(depth) / mass)


def radial_frequency(depth: float, w0: float, mass: float = RB87_MASS) -> float:
    return np.sqrt(4 * abs(depth) / (mass * w0 * w0))


@dataclass(frozen=True)
class OpticalSetup:
    """Everything the integrator needs from the cavity light fields.

    ``probe_detuning_factor`` is the empty-cavity Lorentzian transmission of
    the probe, kappa^2/(kappa^2 + Delta_C^2).
    """
    cavity: CavityParams = field(default_factory=CavityParams)
    trap: TrapBeam = field(default_factory=lambda: TrapBeam(805e-9, 1e-3))
    probe: TrapBeam = field(default_factory=lambda: TrapBeam(RB87_D2_WAVELENGTH + 1.83e-13, 0.0))
    probe_detuning_factor: float = 1.0

    def __post_init__(self):
        zr = rayleigh_range(self.cavity.w0, self.trap.wavelength)
        if zr < 4 * self.cavity.length:
            raise ValueError(f"Rayleigh range {zr:.3g} m too short for the "
                             "constant-waist mode model")

    @property
    def trap_depth(self) -> float:
        return trap_depth(self.trap, self.cavity)

    @property
    def probe_intensity(self) -> float:
        """Empty-cavity probe intensity at an antinode (W/m^2)."""
        p = circulating_power(self.probe, self.cavity) * self.probe_detuning_factor
        return antinode_intensity(p, self.cavity.w0)

    def probe_depth(self, delta_a: float) -> float:
        """Probe light shift depth for F=2 atoms at detuning ``delta_a`` (rad/s)."""
        w_t = 2 * np.pi * C / self.probe.transition_wavelength
        pref = -(3 * np.pi * C ** 2 / (2 * w_t ** 3)) * (self.probe.linewidth / delta_a)
        return pref * self.probe_intensity

    def max_axial_frequency(self, delta_a: float | None = None) -> float:
        w = axial_frequency(self.trap_depth, self.trap.wavelength)
        if delta_a is not None:
            u = abs(self.trap_depth) + abs(self.probe_depth(delta_a))
            w = axial_frequency(u, min(self.trap.wavelength, self.probe.wavelength))
        return w
