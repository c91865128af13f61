"""Thermal ensembles and classical trajectories in the combined trap.

Atoms are independent, so the integrator loops over atoms with the whole
time stepping inside the compiled kernel.  All randomness comes from the
counter-based streams in :mod:`cavload.rng`, keyed by atom id and global
stochastic step, which makes results independent of how atoms are split
across worker threads.

Coordinates: the cavity axis is horizontal, gravity points along -z.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numba import njit
from scipy.optimize import minimize

from . import rng
from .constants import G_EARTH, HBAR, KB, MU_B, RB87_MASS
from .errors import NumericalBlowupError, SamplingError, TimestepTooLargeError
from .magnetics import FieldSystem, _affine_bmag_grad, _bmag_grad, _ideal_affine
from .optics import OpticalSetup, _psi2
from .readout import hyperfine_core, scatter_rate_at

MAX_OMEGA_DT = 0.1
UMIN = 2.0 ** -54  # smallest value returned by the uniform generator
SLOT_VEL_A = 7
SLOT_VEL_B = 8


# ------------------------------------------------------------- ensembles

@dataclass(frozen=True)
class Atom:
    id: int
    pos: np.ndarray
    vel: np.ndarray
    f_state: int
    alive: bool


@dataclass
class Ensemble:
    """Structure-of-arrays atom cloud."""
    pos: np.ndarray
    vel: np.ndarray
    f_state: np.ndarray
    alive: np.ndarray
    ids: np.ndarray
    t: float = 0.0
    master_seed: int = 0
    mass: float = RB87_MASS
    step_index: int = 0

    def __post_init__(self):
        n = len(self.ids)
        self.pos = np.ascontiguousarray(self.pos, dtype=float).reshape(n, 3)
        self.vel = np.ascontiguousarray(self.vel, dtype=float).reshape(n, 3)
        self.f_state = np.ascontiguousarray(self.f_state, dtype=np.int64)
        self.alive = np.ascontiguousarray(self.alive, dtype=np.bool_)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if len(np.unique(self.ids)) != n:
            raise ValueError("atom ids must be unique")

    @classmethod
    def empty(cls, seed=0, mass=RB87_MASS):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, bool),
                   np.zeros(0, np.int64), master_seed=seed, mass=mass)

    def __len__(self):
        return len(self.ids)

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    def atom(self, i) -> Atom:
        return Atom(int(self.ids[i]), self.pos[i].copy(), self.vel[i].copy(),
                    int(self.f_state[i]), bool(self.alive[i]))

    def copy(self) -> "Ensemble":
        return Ensemble(self.pos.copy(), self.vel.copy(), self.f_state.copy(),
                        self.alive.copy(), self.ids.copy(), self.t, self.master_seed,
                        self.mass, self.step_index)

    def kinetic_energy(self) -> np.ndarray:
        return 0.5 * self.mass * np.einsum("ij,ij->i", self.vel, self.vel)

    def to_text(self) -> str:
        """Columnar snapshot: id x y z vx vy vz F alive."""
        lines = ["id x y z vx vy vz F alive"]
        for i in range(len(self)):
            p, v = self.pos[i], self.vel[i]
            lines.append(" ".join([str(self.ids[i])] + [repr(float(a)) for a in (*p, *v)]
                                  + [str(self.f_state[i]), str(int(self.alive[i]))]))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class HeatingModel:
    D: float = 0.0
    recoil_enabled: bool = True
    diffusion_enabled: bool = True

    def __post_init__(self):
        if self.D < 0:
            raise ValueError("diffusion coefficient must be non-negative")

    def kick_sigma(self, mass: float) -> float:
        """Per-axis velocity spread per sqrt(second)."""
        return math.sqrt(2 * self.D / (3 * mass)) if self.diffusion_enabled else 0.0


# --------------------------------------------------------- parameter pack

# indices into the float parameter vector shared by every kernel
(P_MASS, P_MU, P_G, P_CX, P_CY, P_CZ, P_UX, P_UY, P_UZ, P_W0, P_KT, P_UT, P_KP, P_UP,
 P_IP, P_ISAT, P_GAM, P_DG2, P_BETA, P_EPS, P_RREP, P_PON, P_RISE, P_RON, P_ROFF,
 P_KICK, P_VRP, P_VRR, P_DTF, P_DTC, P_SPARE, P_DS, P_RREG, P_REGT, P_MAGQ, P_POFF,
 P_HWX, P_HWY, P_HWZ, P_HCX, P_HCY, P_HCZ, N_PARAMS) = range(43)


def _empty_field():
    return FieldSystem().packed


@dataclass(frozen=True)
class TrapModel:
    """All conservative forces acting on the atoms.

    ``harmonic`` adds an optional anisotropic harmonic potential
    ``(omega_xyz, center)``, used as a test trap.
    """
    field_sys: FieldSystem | None = None
    optics: OpticalSetup | None = None
    mu_eff: float = MU_B
    mass: float = RB87_MASS
    gravity: bool = True
    g: float = G_EARTH
    probe_depth: float = 0.0
    harmonic: tuple | None = None
    probe_on_at: float = math.inf
    probe_off_at: float = math.inf
    shutter_rise: float = 0.0

    def params(self) -> np.ndarray:
        p = np.zeros(N_PARAMS)
        p[P_MASS] = self.mass
        p[P_MU] = self.mu_eff
        p[P_G] = self.g if self.gravity else 0.0
        if self.optics is not None:
            cav = self.optics.cavity
            p[P_CX:P_CZ + 1] = cav.mode_center
            p[P_UX:P_UZ + 1] = cav.axis
            p[P_W0] = cav.w0
            p[P_KT] = 2 * np.pi / self.optics.trap.wavelength
            p[P_UT] = self.optics.trap_depth
            p[P_KP] = 2 * np.pi / self.optics.probe.wavelength
            p[P_UP] = self.probe_depth
        else:
            p[P_UX] = 1.0
            p[P_W0] = 1.0
        p[P_PON] = self.probe_on_at
        p[P_POFF] = self.probe_off_at
        p[P_RISE] = self.shutter_rise
        p[P_RON] = math.inf
        p[P_ROFF] = math.inf
        p[P_MAGQ] = -math.inf if self.field_sys is None else self.field_sys.quiet_after()
        if self.harmonic is not None:
            w, c = self.harmonic
            p[P_HWX:P_HWZ + 1] = np.asarray(w, float) ** 2
            p[P_HCX:P_HCZ + 1] = c
        return p

    def packed_field(self):
        return _empty_field() if self.field_sys is None else self.field_sys.packed

    def max_frequency(self) -> float:
        w = 0.0
        if self.optics is not None:
            from .optics import axial_frequency
            u = abs(self.optics.trap_depth) + abs(self.probe_depth)
            w = axial_frequency(u, min(self.optics.trap.wavelength,
                                       self.optics.probe.wavelength), self.mass)
        if self.harmonic is not None:
            w = max(w, float(np.max(self.harmonic[0])))
        return w

    def potential(self, pos, t, f_state=None):
        pos = np.ascontiguousarray(np.atleast_2d(pos), dtype=float)
        fs = np.full(len(pos), 2, np.int64) if f_state is None else np.asarray(f_state, np.int64)
        out = np.empty(len(pos))
        segs, ptr, ptab, be = self.packed_field()
        _potential_array(pos, fs, float(t), self.params(), segs, ptr, ptab, be, out)
        return out

    def acceleration(self, pos, t, f_state=None):
        pos = np.ascontiguousarray(np.atleast_2d(pos), dtype=float)
        fs = np.full(len(pos), 2, np.int64) if f_state is None else np.asarray(f_state, np.int64)
        out = np.empty_like(pos)
        segs, ptr, ptab, be = self.packed_field()
        _accel_array(pos, fs, float(t), self.params(), segs, ptr, ptab, be, out)
        return out


# ---------------------------------------------------------- scalar kernels

@njit(cache=True, nogil=True, inline="always")
def _probe_factor(prm, t):
    if t < prm[P_PON] or t >= prm[P_POFF]:
        return 0.0
    rise = prm[P_RISE]
    if rise > 0.0 and t < prm[P_PON] + rise:
        return (t - prm[P_PON]) / rise
    return 1.0


@njit(cache=True, nogil=True, inline="always")
def _static_accel(x, y, z, prm, ft, fp):
    """Acceleration from both lattices, gravity and the harmonic term.

    Same forces as ``_accel`` without magnetic fields, with the Gaussian
    envelope shared by the two lattices.
    """
    dx, dy, dz = x - prm[P_CX], y - prm[P_CY], z - prm[P_CZ]
    za = dx * prm[P_UX] + dy * prm[P_UY] + dz * prm[P_UZ]
    px, py, pz = dx - za * prm[P_UX], dy - za * prm[P_UY], dz - za * prm[P_UZ]
    iw2 = 1.0 / (prm[P_W0] * prm[P_W0])
    env = np.exp(-2.0 * (px * px + py * py + pz * pz) * iw2)
    kt = prm[P_KT]
    c = np.cos(kt * za)
    s = np.sin(kt * za)
    fa = -2.0 * kt * c * s * env * ft
    fr = -4.0 * c * c * env * iw2 * ft
    if fp != 0.0:
        kp = prm[P_KP]
        c = np.cos(kp * za)
        s = np.sin(kp * za)
        fa += -2.0 * kp * c * s * env * fp
        fr += -4.0 * c * c * env * iw2 * fp
    ax = fa * prm[P_UX] + fr * px
    ay = fa * prm[P_UY] + fr * py
    az = fa * prm[P_UZ] + fr * pz - prm[P_G]
    if prm[P_HWX] != 0.0 or prm[P_HWY] != 0.0 or prm[P_HWZ] != 0.0:
        ax -= prm[P_HWX] * (x - prm[P_HCX])
        ay -= prm[P_HWY] * (y - prm[P_HCY])
        az -= prm[P_HWZ] * (z - prm[P_HCZ])
    return ax, ay, az


@njit(cache=True, nogil=True, inline="always")
def _mag_coeffs(t, st, prm, segs, ptr, ptab, backend):
    """Whether the magnetic force acts, and the affine field if ideal."""
    on = st == 2 and t < prm[P_MAGQ]
    if on and backend == 0:
        return on, _ideal_affine(t, segs, ptr, ptab)
    return on, (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@njit(cache=True, nogil=True, inline="always")
def _accel_with(x, y, z, t, st, prm, segs, ptr, ptab, backend, pf, mag_on, aff):
    fp = pf * prm[P_UP] / prm[P_MASS] if st == 2 else 0.0
    ax, ay, az = _static_accel(x, y, z, prm, prm[P_UT] / prm[P_MASS], fp)
    if mag_on:
        if backend == 0:
            b = _affine_bmag_grad(x, y, z, aff)
        else:
            b = _bmag_grad(x, y, z, t, segs, ptr, ptab, backend)
        f = prm[P_MU] / prm[P_MASS]
        ax -= f * b[1]
        ay -= f * b[2]
        az -= f * b[3]
    return ax, ay, az


@njit(cache=True, nogil=True, inline="always")
def _accel(x, y, z, t, st, prm, segs, ptr, ptab, backend, pf):
    on, aff = _mag_coeffs(t, st, prm, segs, ptr, ptab, backend)
    return _accel_with(x, y, z, t, st, prm, segs, ptr, ptab, backend, pf, on, aff)


@njit(cache=True, nogil=True, inline="always")
def _potential(x, y, z, t, st, prm, segs, ptr, ptab, backend, pf):
    m = prm[P_MASS]
    u = m * prm[P_G] * (z - prm[P_CZ])
    if prm[P_UT] != 0.0:
        u -= prm[P_UT] * _psi2(x, y, z, prm[P_CX], prm[P_CY], prm[P_CZ], prm[P_UX],
                               prm[P_UY], prm[P_UZ], prm[P_KT], prm[P_W0])
    if st == 2 and pf > 0.0 and prm[P_UP] != 0.0:
        u -= pf * prm[P_UP] * _psi2(x, y, z, prm[P_CX], prm[P_CY], prm[P_CZ], prm[P_UX],
                                    prm[P_UY], prm[P_UZ], prm[P_KP], prm[P_W0])
    if st == 2 and t < prm[P_MAGQ]:
        b = _bmag_grad(x, y, z, t, segs, ptr, ptab, backend)
        u += prm[P_MU] * b[0]
    u += 0.5 * m * (prm[P_HWX] * (x - prm[P_HCX]) ** 2 + prm[P_HWY] * (y - prm[P_HCY]) ** 2
                    + prm[P_HWZ] * (z - prm[P_HCZ]) ** 2)
    return u


@njit(cache=True, nogil=True)
def _accel_array(pos, fs, t, prm, segs, ptr, ptab, backend, out):
    pf = _probe_factor(prm, t)
    for i in range(pos.shape[0]):
        a = _accel(pos[i, 0], pos[i, 1], pos[i, 2], t, fs[i], prm, segs, ptr, ptab, backend, pf)
        out[i, 0] = a[0]
        out[i, 1] = a[1]
        out[i, 2] = a[2]


@njit(cache=True, nogil=True)
def _potential_array(pos, fs, t, prm, segs, ptr, ptab, backend, out):
    pf = _probe_factor(prm, t)
    for i in range(pos.shape[0]):
        out[i] = _potential(pos[i, 0], pos[i, 1], pos[i, 2], t, fs[i], prm, segs, ptr, ptab,
                            backend, pf)


@njit(cache=True, nogil=True)
def escape_saddle(depth, w0, mass, g):
    """Lowest energy at which an atom can leave a lattice site, and where.

    Energies are measured from the node level at the height of the cavity
    axis.  With gravity the radial well is tilted and the atom leaves
    downward over the saddle of ``-V exp(-2u^2) + m g w0 u`` (u = height
    over w0); without gravity the threshold is zero and there is no saddle.
    Returns (energy, saddle height below the axis); the energy is ``-inf``
    when the tilted well has no minimum at all.
    """
    if depth <= 0.0:
        return -np.inf, 0.0
    G = mass * g * w0
    if G == 0.0:
        return 0.0, -np.inf
    q = G / (4.0 * depth)
    if q >= 0.5 * np.exp(-0.5):
        return -np.inf, 0.0
    # saddle at u < -1/2 where u exp(-2u^2) = -q
    lo, hi = -20.0, -0.5
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if -mid * np.exp(-2.0 * mid * mid) > q:
            hi = mid
        else:
            lo = mid
    u = 0.5 * (lo + hi)
    return -depth * np.exp(-2.0 * u * u) + G * u, u * w0


def escape_energy(depth, w0, mass, g):
    return escape_saddle(depth, w0, mass, g)[0]


@njit(cache=True, nogil=True)
def _captured(x, y, z, vx, vy, vz, prm, e_esc, z_sad):
    """Bound in a lattice site: energy below the escape energy and position
    above the gravity saddle (i.e. inside the tilted well)."""
    m = prm[P_MASS]
    dz = z - prm[P_CZ]
    if dz <= z_sad:
        return False
    e = (0.5 * m * (vx * vx + vy * vy + vz * vz) + m * prm[P_G] * dz
         - prm[P_UT] * _psi2(x, y, z, prm[P_CX], prm[P_CY], prm[P_CZ], prm[P_UX],
                             prm[P_UY], prm[P_UZ], prm[P_KT], prm[P_W0]))
    return e < e_esc


@njit(cache=True, nogil=True)
def observe(pos, vel, fs, alive, prm, e_esc, z_sad, with_capture):
    """(n_eff, n_F1, n_F2, n_captured, n_escaped, captured n_eff), fixed-order sums."""
    neff = 0.0
    ncap_eff = 0.0
    n1 = 0
    n2 = 0
    ncap = 0
    nesc = 0
    for i in range(pos.shape[0]):
        if not alive[i]:
            nesc += 1
            continue
        p2 = _psi2(pos[i, 0], pos[i, 1], pos[i, 2], prm[P_CX], prm[P_CY], prm[P_CZ],
                   prm[P_UX], prm[P_UY], prm[P_UZ], prm[P_KP], prm[P_W0])
        if fs[i] == 2:
            n2 += 1
            neff += p2
        else:
            n1 += 1
        if with_capture and _captured(pos[i, 0], pos[i, 1], pos[i, 2], vel[i, 0],
                                      vel[i, 1], vel[i, 2], prm, e_esc, z_sad):
            ncap += 1
            ncap_eff += p2
    return neff, n1, n2, ncap, nesc, ncap_eff


# ------------------------------------------------------ trajectory kernel

@njit(cache=True, nogil=True)
def _verlet_static(x, y, z, vx, vy, vz, nsub, h, prm, pf, ax, ay, az, have_accel):
    """Verlet substeps in time-independent fields.

    The acceleration at the start position can be passed in (it is the
    final one of the previous step when nothing changed in between).
    """
    ft = prm[P_UT] / prm[P_MASS]
    fp = pf * prm[P_UP] / prm[P_MASS]
    if not have_accel:
        ax, ay, az = _static_accel(x, y, z, prm, ft, fp)
    hh = 0.5 * h
    for j in range(nsub):
        vx += hh * ax
        vy += hh * ay
        vz += hh * az
        x += h * vx
        y += h * vy
        z += h * vz
        ax, ay, az = _static_accel(x, y, z, prm, ft, fp)
        vx += hh * ax
        vy += hh * ay
        vz += hh * az
    return x, y, z, vx, vy, vz, ax, ay, az


@njit(cache=True, nogil=True)
def _propagate(pos, vel, fs, alive, ids, s0, s1, prm, segs, ptr, ptab, backend,
               seed, flags, err):
    """Advance every living atom from stochastic step s0 to s1.

    flags: [recoil_enabled, diffusion_enabled, stochastic_enabled]
    err[0] receives the id of the first atom whose state became non-finite.
    """
    ds = prm[P_DS]
    nfine = int(round(ds / prm[P_DTF]))
    ncoarse = int(round(ds / prm[P_DTC]))
    rreg2 = prm[P_RREG] * prm[P_RREG]
    kick = prm[P_KICK] * np.sqrt(ds)
    dg2 = prm[P_DG2]
    for i in range(pos.shape[0]):
        if not alive[i]:
            continue
        x, y, z = pos[i, 0], pos[i, 1], pos[i, 2]
        vx, vy, vz = vel[i, 0], vel[i, 1], vel[i, 2]
        st = fs[i]
        ident = ids[i]
        live = True
        cached = False
        cpf = 0.0
        cax, cay, caz = 0.0, 0.0, 0.0
        for s in range(s0, s1):
            ts = s * ds
            te = (s + 1) * ds
            dx, dy, dz = x - prm[P_CX], y - prm[P_CY], z - prm[P_CZ]
            za = dx * prm[P_UX] + dy * prm[P_UY] + dz * prm[P_UZ]
            rho2 = dx * dx + dy * dy + dz * dz - za * za
            # substeps follow the local lattice stiffness, ~exp(-rho^2/w0^2)
            nsub = int(np.ceil(nfine * np.exp(-rho2 / (prm[P_W0] * prm[P_W0])) - 1e-9))
            if nsub < ncoarse:
                nsub = ncoarse
            h = ds / nsub
            pf0 = _probe_factor(prm, ts)
            pf1 = _probe_factor(prm, te)
            static = (ts >= prm[P_MAGQ] and pf0 == pf1
                      and not (ts < prm[P_PON] + prm[P_RISE] and te > prm[P_PON]))
            if static:
                pf = pf0 if st == 2 else 0.0
                reuse = cached and pf == cpf
                x, y, z, vx, vy, vz, cax, cay, caz = _verlet_static(
                    x, y, z, vx, vy, vz, nsub, h, prm, pf, cax, cay, caz, reuse)
                cached = True
                cpf = pf
            else:
                cached = False
                ax, ay, az = 0.0, 0.0, 0.0
                for j in range(nsub):
                    tm = ts + (j + 0.5) * h
                    pf = _probe_factor(prm, tm)
                    on, aff = _mag_coeffs(tm, st, prm, segs, ptr, ptab, backend)
                    if j == 0:
                        ax, ay, az = _accel_with(x, y, z, tm, st, prm, segs, ptr, ptab,
                                                 backend, pf, on, aff)
                    vx += 0.5 * h * ax
                    vy += 0.5 * h * ay
                    vz += 0.5 * h * az
                    x += h * vx
                    y += h * vy
                    z += h * vz
                    ax, ay, az = _accel_with(x, y, z, tm, st, prm, segs, ptr, ptab,
                                             backend, pf, on, aff)
                    vx += 0.5 * h * ax
                    vy += 0.5 * h * ay
                    vz += 0.5 * h * az
            if flags[2]:
                tmid = ts + 0.5 * ds
                pfm = _probe_factor(prm, tmid)
                probe_on = pfm > 0.0
                rep_on = prm[P_RON] <= s and s < prm[P_ROFF]
                rsc = 0.0
                if probe_on:
                    p2 = _psi2(x, y, z, prm[P_CX], prm[P_CY], prm[P_CZ], prm[P_UX],
                               prm[P_UY], prm[P_UZ], prm[P_KP], prm[P_W0])
                    rsc = scatter_rate_at(pfm * prm[P_IP] * p2, prm[P_ISAT], prm[P_GAM], dg2)
                # below the smallest possible uniform draw no event can happen,
                # so the draw is skipped without changing any outcome
                active = (rep_on and st == 1) or (st == 2 and rsc * ds >= UMIN)
                if active:
                    u1, u2 = rng.uniform2(seed, ident, s, rng.SLOT_HYPERFINE)
                    was = st
                    st, nev = hyperfine_core(st, rsc, probe_on, rep_on, prm[P_EPS],
                                             prm[P_BETA], prm[P_RREP], ds, u1, u2)
                    if flags[0] and nev > 0:
                        vr = prm[P_VRP] if was == 2 else prm[P_VRR]
                        for e in range(nev):
                            kx, ky, kz = rng.unit_vector(seed, ident, s,
                                                         rng.SLOT_RECOIL_BASE + e)
                            vx += vr * kx
                            vy += vr * ky
                            vz += vr * kz
                if flags[1] and kick > 0.0:
                    g0, g1, g2 = rng.normal3(seed, ident, s, rng.SLOT_DIFFUSION_A,
                                             rng.SLOT_DIFFUSION_B)
                    vx += kick * g0
                    vy += kick * g1
                    vz += kick * g2
            if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(z)
                    and np.isfinite(vx) and np.isfinite(vy) and np.isfinite(vz)):
                if err[0] < 0:
                    err[0] = ident
                live = False
                break
            if te >= prm[P_REGT]:
                dx, dy, dz = x - prm[P_CX], y - prm[P_CY], z - prm[P_CZ]
                if dx * dx + dy * dy + dz * dz > rreg2:
                    live = False
                    break
        pos[i, 0], pos[i, 1], pos[i, 2] = x, y, z
        vel[i, 0], vel[i, 1], vel[i, 2] = vx, vy, vz
        fs[i] = st
        alive[i] = live


# ---------------------------------------------------------- public operators

def sample_thermal_cloud(n: int, T: float, potential: Callable, center_guess, seed: int,
                         mass: float = RB87_MASS, max_extent=0.02, first_id: int = 0,
                         f_state: int = 2, t: float = 0.0) -> Ensemble:
    """Boltzmann-distributed positions and Maxwellian velocities.

    ``potential`` maps an (N, 3) position array to energies (J).  Positions
    are rejection-sampled inside the box where ``U < U_min + 10 k_B T``,
    found by marching out from the potential minimum along each axis;
    ``max_extent`` caps the half-width (per axis, scalar or 3-vector).
    """
    if n < 0 or T <= 0:
        raise ValueError("need n >= 0 and T > 0")
    kT = KB * T
    ids = np.arange(first_id, first_id + n, dtype=np.int64)
    if n == 0:
        return Ensemble(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, bool),
                        ids, t=t, master_seed=seed, mass=mass)
    guess = np.asarray(center_guess, float)

    def f(r):
        return potential(r[None, :])[0] / kT

    res = minimize(lambda q: f(guess + q * 1e-6), np.zeros(3), method="Nelder-Mead",
                   options={"xatol": 1e-6, "fatol": 1e-9, "maxiter": 4000,
                            "initial_simplex": np.vstack([np.zeros(3), 5 * np.eye(3)])})
    r_min = guess + res.x * 1e-6
    u_min = potential(r_min[None, :])[0]
    cap = np.broadcast_to(np.asarray(max_extent, float), (3,))
    lo, hi = np.empty(3), np.empty(3)
    for k in range(3):
        for sgn, store in ((1.0, hi), (-1.0, lo)):
            e = np.zeros(3)
            e[k] = sgn
            step = 1e-9
            while step < cap[k] and potential((r_min + step * e)[None, :])[0] - u_min < 10 * kT:
                step *= 1.5
            store[k] = r_min[k] + sgn * min(step, cap[k])
    width = hi - lo
    pos = np.empty((n, 3))
    pending = np.arange(n)
    attempts = 0
    attempt = 0
    while pending.size:
        pid = ids[pending]
        ua = rng.uniforms(seed, pid, attempt, rng.SLOT_SAMPLE_A)
        ub = rng.uniforms(seed, pid, attempt, rng.SLOT_SAMPLE_B)
        trial = lo + np.column_stack([ua[:, 0], ua[:, 1], ub[:, 0]]) * width
        w = np.exp(-(potential(trial) - u_min) / kT)
        ok = ub[:, 1] < w
        pos[pending[ok]] = trial[ok]
        attempts += pending.size
        pending = pending[~ok]
        attempt += 1
        if attempts >= 10000 and (n - pending.size) / attempts < 1e-4:
            raise SamplingError("rejection sampling acceptance below 1e-4; "
                                "potential too flat or unbounded")
    sig = math.sqrt(kT / mass)
    vel = sig * rng.normals3(seed, ids, 0, SLOT_VEL_A, SLOT_VEL_B)
    return Ensemble(pos, vel, np.full(n, f_state), np.ones(n, bool), ids, t=t,
                    master_seed=seed, mass=mass)


def check_timestep(model: TrapModel, dt: float):
    w = model.max_frequency()
    if dt * w >= MAX_OMEGA_DT:
        raise TimestepTooLargeError(
            f"dt*omega_max = {dt * w:.3g} >= {MAX_OMEGA_DT} (dt={dt:g} s, omega={w:.4g} rad/s)")


def step(ensemble: Ensemble, model: TrapModel, dt: float) -> Ensemble:
    """One velocity-Verlet step (deterministic forces only), in place.

    Both force evaluations use the field values at the step midpoint.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    check_timestep(model, dt)
    live = ensemble.alive
    tm = ensemble.t + 0.5 * dt
    pos = ensemble.pos[live]
    vel = ensemble.vel[live]
    fs = ensemble.f_state[live]
    a = model.acceleration(pos, tm, fs)
    vel = vel + 0.5 * dt * a
    pos = pos + dt * vel
    a = model.acceleration(pos, tm, fs)
    vel = vel + 0.5 * dt * a
    bad = ~np.all(np.isfinite(pos) & np.isfinite(vel), axis=1)
    if bad.any():
        aid = int(ensemble.ids[live][np.argmax(bad)])
        raise NumericalBlowupError(f"non-finite state for atom {aid}", aid)
    ensemble.pos[live] = pos
    ensemble.vel[live] = vel
    ensemble.t += dt
    return ensemble


def apply_diffusion(ensemble: Ensemble, hm: HeatingModel, dt: float, counter: int) -> Ensemble:
    """Isotropic Gaussian velocity kicks adding D*dt of energy per atom on average."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    sig = hm.kick_sigma(ensemble.mass) * math.sqrt(dt)
    if sig == 0.0:
        return ensemble
    live = ensemble.alive
    g = rng.normals3(ensemble.master_seed, ensemble.ids[live], counter)
    ensemble.vel[live] += sig * g
    return ensemble


def recoil_velocity(wavelength: float, mass: float = RB87_MASS) -> float:
    return HBAR * 2 * np.pi / wavelength / mass


@njit(cache=True, nogil=True)
def _recoil_array(vel, ids, n_events, vr, seed, counter):
    for i in range(vel.shape[0]):
        for e in range(n_events[i]):
            kx, ky, kz = rng.unit_vector(seed, ids[i], counter, rng.SLOT_RECOIL_BASE + e)
            vel[i, 0] += vr * kx
            vel[i, 1] += vr * ky
            vel[i, 2] += vr * kz


def apply_recoils(ensemble: Ensemble, n_events, wavelength: float, counter: int) -> Ensemble:
    """Random-direction photon recoil kicks, ``n_events`` per atom."""
    n_events = np.broadcast_to(np.asarray(n_events, np.int64), (len(ensemble),)).copy()
    if np.any(n_events < 0):
        raise ValueError("event counts must be non-negative")
    n_events[~ensemble.alive] = 0
    _recoil_array(ensemble.vel, ensemble.ids, n_events, recoil_velocity(wavelength, ensemble.mass),
                  np.uint64(ensemble.master_seed), counter)
    return ensemble


def capture_reference(model: TrapModel):
    """(escape energy, saddle height) of the trap lattice for ``model``."""
    if model.optics is None:
        return -math.inf, 0.0
    return escape_saddle(model.optics.trap_depth, model.optics.cavity.w0, model.mass,
                         model.g if model.gravity else 0.0)


def cull_and_classify(ensemble: Ensemble, model: TrapModel, region_radius: float = 5e-3):
    """Kill atoms outside the region ball and count optically captured atoms.

    An atom is captured when its energy in the lattice plus gravity (height
    measured from the cavity axis) is below the escape energy of its site.
    Magnetic fields are ignored.
    """
    c = np.asarray(model.optics.cavity.mode_center, float)
    out = np.linalg.norm(ensemble.pos - c, axis=1) > region_radius
    ensemble.alive &= ~out
    prm = model.params()
    cap = np.zeros(len(ensemble), bool)
    e_esc, z_sad = capture_reference(model)
    for i in np.flatnonzero(ensemble.alive):
        cap[i] = _captured(*ensemble.pos[i], *ensemble.vel[i], prm, e_esc, z_sad)
    counts = {"captured": int(cap.sum()), "escaped": int((~ensemble.alive).sum())}
    return ensemble, counts, cap


# ------------------------------------------------------------- propagator

@dataclass
class Propagator:
    """Compiled multi-step integrator with operator-split stochastic terms.

    Time advances in stochastic steps of ``stochastic_dt``.  Inside each, an
    atom takes Verlet substeps whose number scales with the local lattice
    stiffness: ``dt_fine`` on the cavity axis, growing as exp(rho^2/w0^2)
    away from it, never longer than ``dt_coarse``.  Repumper switching
    times are rounded to the stochastic grid.
    """
    model: TrapModel
    heating: HeatingModel = field(default_factory=HeatingModel)
    detunings: object = None
    pump: object = None
    probe_intensity: float = 0.0
    axial_state: str = "off"
    repumper_on_at: float = math.inf
    repumper_off_at: float = math.inf
    dt_fine: float = 5e-8
    dt_coarse: float = 1e-6
    stochastic_dt: float = 1e-6
    region_radius: float = 5e-3
    region_from: float | None = None
    stochastic: bool = True
    threads: int = 1

    def __post_init__(self):
        for dt in (self.dt_fine, self.dt_coarse):
            r = self.stochastic_dt / dt
            if dt <= 0 or abs(r - round(r)) > 1e-9:
                raise ValueError("stochastic_dt must be an integer multiple of each Verlet dt")
        check_timestep(self.model, self.dt_fine)
        self._prm = self._build_params()
        if self.stochastic and self.pump is not None:
            from .readout import check_step_probabilities
            rmax = scatter_rate_at(self.probe_intensity, self.pump.saturation_intensity,
                                   self.model.optics.probe.linewidth if self.model.optics else 0.0,
                                   self._prm[P_DG2])
            check_step_probabilities(rmax, self.stochastic_dt, self.pump, self._prm[P_EPS])

    def _build_params(self):
        p = self.model.params()
        if self.pump is not None:
            p[P_ISAT] = self.pump.saturation_intensity
            p[P_BETA] = self.pump.depump_branching
            p[P_EPS] = self.pump.suppression(self.axial_state)
            p[P_RREP] = self.pump.repump_rate
        else:
            p[P_ISAT] = 1.0
        if self.detunings is not None:
            p[P_DG2] = (self.detunings.delta_a / self.detunings.gamma) ** 2
        if self.model.optics is not None:
            p[P_GAM] = self.model.optics.probe.linewidth
            p[P_VRP] = recoil_velocity(self.model.optics.probe.wavelength, self.model.mass)
            p[P_VRR] = p[P_VRP]
        p[P_IP] = self.probe_intensity
        p[P_RON] = self._grid(self.repumper_on_at)
        p[P_ROFF] = self._grid(self.repumper_off_at)
        p[P_KICK] = self.heating.kick_sigma(self.model.mass)
        p[P_DTF] = self.dt_fine
        p[P_DTC] = self.dt_coarse
        p[P_DS] = self.stochastic_dt
        p[P_RREG] = self.region_radius
        p[P_REGT] = (max(p[P_MAGQ], 0.0) if self.region_from is None else self.region_from)
        return p

    def _grid(self, t):
        return math.inf if not math.isfinite(t) else float(round(t / self.stochastic_dt))

    def with_repumper(self, on_at: float, off_at: float = math.inf) -> "Propagator":
        return replace(self, repumper_on_at=on_at, repumper_off_at=off_at)

    @property
    def params(self):
        return self._prm

    def step_index(self, t: float) -> int:
        return int(round(t / self.stochastic_dt))

    def advance(self, ens: Ensemble, s_target: int) -> Ensemble:
        """Integrate ``ens`` (in place) up to stochastic step ``s_target``."""
        s0 = ens.step_index
        if s_target < s0:
            raise ValueError("cannot integrate backwards")
        if s_target == s0 or len(ens) == 0:
            ens.step_index = s_target
            ens.t = s_target * self.stochastic_dt
            return ens
        segs, ptr, ptab, be = self.model.packed_field()
        flags = np.array([self.heating.recoil_enabled, self.heating.diffusion_enabled,
                          self.stochastic], dtype=np.bool_)
        seed = np.uint64(ens.master_seed)
        n = len(ens)
        nw = max(1, min(self.threads, n))
        bounds = np.linspace(0, n, nw + 1).astype(int)
        errs = [np.array([-1], np.int64) for _ in range(nw)]

        def work(k):
            a, b = bounds[k], bounds[k + 1]
            _propagate(ens.pos[a:b], ens.vel[a:b], ens.f_state[a:b], ens.alive[a:b],
                       ens.ids[a:b], s0, s_target, self._prm, segs, ptr, ptab, be, seed,
                       flags, errs[k])

        if nw == 1:
            work(0)
        else:
            with ThreadPoolExecutor(nw) as ex:
                list(ex.map(work, range(nw)))
        for e in errs:
            if e[0] >= 0:
                raise NumericalBlowupError(
                    f"non-finite state for atom {int(e[0])} between "
                    f"t={s0 * self.stochastic_dt:g} and {s_target * self.stochastic_dt:g} s",
                    int(e[0]))
        ens.step_index = s_target
        ens.t = s_target * self.stochastic_dt
        return ens

    def observe(self, ens: Ensemble, with_capture: bool = True):
        e_esc, z_sad = capture_reference(self.model)
        return observe(ens.pos, ens.vel, ens.f_state, ens.alive, self._prm, e_esc, z_sad,
                       with_capture)
