"""Dispersive cavity readout and the hyperfine pump/repump model.

The probe mode is shifted by the effective atom number,
``Delta_C' = Delta_C - N_eff g0^2 / Delta_A``, and the measured quantity is
the transmittance relative to the empty cavity.  Atoms in F=1 are far
detuned from the probe and contribute nothing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .constants import RB87_D2_GAMMA, RB87_ISAT_CYCLING
from .errors import DomainError, TimestepTooLargeError
from .optics import _mode_args, _psi2
from .rng import SLOT_HYPERFINE, uniform2

TRANSMITTANCE_CLAMP = 1.02
MAX_STEP_PROBABILITY = 0.1

F1, F2 = 1, 2
AXIAL_STATES = {"off": 0, "matched": 1, "opposite": 2}


@dataclass(frozen=True)
class Detunings:
    delta_a: float = -2 * np.pi * 90e6
    delta_c: float = 2 * np.pi * 2e6
    gamma: float = 2 * np.pi * 3e6

    def __post_init__(self):
        if not abs(self.delta_a) > 10 * self.gamma:
            raise ValueError("dispersive regime requires |delta_a| > 10 gamma")


@dataclass(frozen=True)
class PumpModel:
    depump_branching: float = 0.5
    repump_rate: float = 5e4
    closed_cycle_suppression: float = 0.1
    saturation_intensity: float = RB87_ISAT_CYCLING
    shutter_rise: float = 1e-3

    def __post_init__(self):
        for name in ("depump_branching", "closed_cycle_suppression"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.repump_rate < 0 or self.saturation_intensity <= 0 or self.shutter_rise < 0:
            raise ValueError("pump model rates must be non-negative")

    def suppression(self, axial_state: str) -> float:
        return self.closed_cycle_suppression if axial_state == "matched" else 1.0


# -------------------------------------------------------- formula layer

def dispersive_shift(n_eff, det: Detunings, g0: float):
    n_eff = np.asarray(n_eff, dtype=float)
    if np.any(n_eff < 0):
        raise DomainError("effective atom number must be non-negative")
    return det.delta_c - n_eff * g0 * g0 / det.delta_a


def transmittance(n_eff, det: Detunings, g0: float, kappa: float):
    dcp = dispersive_shift(n_eff, det, g0)
    return (kappa ** 2 + det.delta_c ** 2) / (kappa ** 2 + dcp ** 2)


def invert_transmittance(T, det: Detunings, g0: float, kappa: float):
    """Effective atom number from a transmittance value (array or scalar).

    Values in (1, 1.02] are treated as noise on an empty cavity.
    """
    T = np.asarray(T, dtype=float)
    if np.any(~np.isfinite(T)) or np.any(T <= 0) or np.any(T > TRANSMITTANCE_CLAMP):
        raise DomainError("transmittance must lie in (0, 1.02]")
    Tc = np.minimum(T, 1.0)
    dcp2 = (kappa ** 2 + det.delta_c ** 2) / Tc - kappa ** 2
    if np.any(dcp2 < 0):
        raise DomainError("transmittance below the reachable range")
    dcp = np.sqrt(dcp2)
    n = (det.delta_c - dcp) * det.delta_a / (g0 * g0)
    n = np.where(Tc == 1.0, 0.0, n)
    return float(n) if n.ndim == 0 else n


def n_eff_sensitivity(T, det: Detunings, g0: float, kappa: float):
    """|dN_eff/dT|, used to propagate transmittance noise to atom number."""
    T = np.minimum(np.asarray(T, float), 1.0)
    a = kappa ** 2 + det.delta_c ** 2
    dcp = np.sqrt(a / T - kappa ** 2)
    return np.abs(det.delta_a) / g0 ** 2 * a / (2 * T * T * dcp)


@njit(cache=True, nogil=True)
def _neff_sum(pos, f_state, alive, cx, cy, cz, ux, uy, uz, k, w0):
    total = 0.0
    for i in range(pos.shape[0]):
        if alive[i] and f_state[i] == 2:
            total += _psi2(pos[i, 0], pos[i, 1], pos[i, 2], cx, cy, cz, ux, uy, uz, k, w0)
    return total


def effective_atom_number(ensemble, cav, wavelength: float) -> float:
    """Mode-intensity weighted count of living F=2 atoms (fixed summation order)."""
    return float(_neff_sum(ensemble.pos, ensemble.f_state, ensemble.alive,
                           *_mode_args(cav, wavelength)))


# ----------------------------------------------------------- rate model

@njit(cache=True, nogil=True)
def scatter_rate_at(intensity, isat, linewidth, delta_over_gamma2):
    s = intensity / isat
    return 0.5 * linewidth * s / (1.0 + s + delta_over_gamma2)


def scattering_rate(r, peak_intensity: float, cav, wavelength: float, det: Detunings,
                    pm: PumpModel, linewidth: float = RB87_D2_GAMMA):
    """Two-level photon scattering rate at positions ``r`` in the probe mode."""
    from .optics import mode_intensity
    inten = peak_intensity * np.asarray(mode_intensity(r, cav, wavelength))
    rate = 0.5 * linewidth * (inten / pm.saturation_intensity) / (
        1 + inten / pm.saturation_intensity + (det.delta_a / det.gamma) ** 2)
    return rate


@njit(cache=True, nogil=True)
def _poisson_small(mu, u):
    k = 0
    p = np.exp(-mu)
    cdf = p
    while u > cdf and k < 64:
        k += 1
        p *= mu / k
        cdf += p
    return k


@njit(cache=True, nogil=True)
def hyperfine_core(state, r_sc, probe_on, rep_on, eps, beta, r_rep, dt, u_trans, u_count):
    """One stochastic hyperfine update; returns (new state, scattering events)."""
    if state == 2 and probe_on:
        p = eps * beta * r_sc * dt
        n = _poisson_small(r_sc * dt, u_count)
        if u_trans < p:
            return 1, n
        return 2, n
    if state == 1 and rep_on:
        p = r_rep * dt
        n = _poisson_small(r_rep * dt, u_count)
        if u_trans < p:
            return 2, n
        return 1, n
    return state, 0


@njit(cache=True, nogil=True)
def _hyperfine_array(f_state, alive, ids, r_sc, probe_on, rep_on, eps, beta, r_rep,
                     dt, seed, counter, events):
    for i in range(f_state.shape[0]):
        events[i] = 0
        if not alive[i]:
            continue
        u1, u2 = uniform2(seed, ids[i], counter, SLOT_HYPERFINE)
        s, n = hyperfine_core(f_state[i], r_sc[i], probe_on, rep_on, eps, beta,
                              r_rep, dt, u1, u2)
        f_state[i] = s
        events[i] = n


def check_step_probabilities(max_scatter_rate: float, dt: float, pm: PumpModel,
                             eps: float = 1.0):
    p_dep = eps * pm.depump_branching * max_scatter_rate * dt
    p_rep = pm.repump_rate * dt
    p = max(p_dep, p_rep)
    if p >= MAX_STEP_PROBABILITY:
        raise TimestepTooLargeError(
            f"transition probability {p:.3g} per step (dt={dt:g} s) exceeds "
            f"{MAX_STEP_PROBABILITY}")


def hyperfine_step(ensemble, dt, probe_on, repumper_on, axial_state, pm: PumpModel,
                   scatter_rate, counter):
    """Stochastic F=1/F=2 update of every living atom in place.

    ``scatter_rate`` is the probe scattering rate at each atom (scalar or
    array).  Returns the number of scattering events per atom; the draws use
    the ensemble's counter-based stream at step ``counter``.
    """
    n = len(ensemble.ids)
    r_sc = np.broadcast_to(np.asarray(scatter_rate, float), (n,)).copy()
    eps = pm.suppression(axial_state)
    if probe_on:
        check_step_probabilities(float(r_sc.max(initial=0.0)), dt, pm, eps)
    elif repumper_on:
        check_step_probabilities(0.0, dt, pm, eps)
    events = np.zeros(n, dtype=np.int64)
    _hyperfine_array(ensemble.f_state, ensemble.alive, ensemble.ids, r_sc,
                     bool(probe_on), bool(repumper_on), eps, pm.depump_branching,
                     pm.repump_rate, dt, np.uint64(ensemble.master_seed), counter, events)
    return events
