"""Coil fields, ramp schedules and the adiabatic magnetic potential.

Two backends are available for a coil pair.  ``ideal_quadrupole`` keeps
only the linear expansion about the pair center: the antisymmetric part of
the coil currents gives a quadrupole, the symmetric part a homogeneous
field along the pair axis.  ``biot_savart`` sums the exact fields of the two
current loops (complete elliptic integrals).

The scalar kernels are numba-compiled so the trajectory integrator in
:mod:`cavload.dynamics` evaluates exactly the same arithmetic as the public
functions here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from numba import njit

from .constants import G_EARTH, MU0
from .errors import (DegenerateConfigurationError, NoZeroFoundError,
                     OutOfRangeError, SingularityError)

TANH_STEEPNESS = 2.5
_TANH_NORM = float(np.tanh(TANH_STEEPNESS))

SHAPES = {"constant": 0, "linear": 1, "tanh": 2}
BACKENDS = {"ideal_quadrupole": 0, "biot_savart": 1}
POLARITIES = {"anti_helmholtz": 1.0, "helmholtz": -1.0}

FD_STEP = 1e-6  # m, central-difference step for the Biot-Savart backend


# ---------------------------------------------------------------- ramps

@dataclass(frozen=True)
class RampSegment:
    t_start: float
    t_end: float
    v_start: float
    v_end: float
    shape: str = "linear"

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ValueError(f"ramp segment needs t_end > t_start, got "
                             f"[{self.t_start}, {self.t_end}]")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown ramp shape {self.shape!r}")


@njit(cache=True, nogil=True)
def _ramp_value(t0, t1, v0, v1, shape, t):
    if t == t0:
        return v0
    if t == t1:
        return v1
    if shape == 0:
        return v0
    tau = (t - t0) / (t1 - t0)
    if shape == 1:
        return v0 + (v1 - v0) * tau
    frac = (np.tanh(TANH_STEEPNESS * (2.0 * tau - 1.0)) + _TANH_NORM) / (2.0 * _TANH_NORM)
    return v0 + (v1 - v0) * frac


def eval_ramp(seg: RampSegment, t: float) -> float:
    """Value of a single ramp segment at ``t``.

    The tanh shape is affinely renormalized so both endpoints are met
    exactly.
    """
    if not seg.t_start <= t <= seg.t_end:
        raise OutOfRangeError(f"t={t} outside ramp [{seg.t_start}, {seg.t_end}]")
    return float(_ramp_value(seg.t_start, seg.t_end, seg.v_start, seg.v_end,
                             SHAPES[seg.shape], t))


def _check_contiguous(segments: Sequence[RampSegment], what: str):
    for a, b in zip(segments, segments[1:]):
        if a.t_end != b.t_start:
            raise ValueError(f"{what}: schedule gap/overlap between "
                             f"t={a.t_end} and t={b.t_start}")


@njit(cache=True, nogil=True)
def _schedule_value(segs, lo, hi, t):
    # empty schedule: identically zero
    if hi == lo:
        return 0.0
    if t < segs[lo, 0] or t > segs[hi - 1, 1]:
        return np.nan
    for i in range(lo, hi):
        if t <= segs[i, 1]:
            return _ramp_value(segs[i, 0], segs[i, 1], segs[i, 2], segs[i, 3],
                               int(segs[i, 4]), t)
    return np.nan


def eval_schedule(segments: Sequence[RampSegment], t: float) -> float:
    """Value of a contiguous schedule; an empty schedule is zero."""
    if not segments:
        return 0.0
    if not segments[0].t_start <= t <= segments[-1].t_end:
        raise OutOfRangeError(f"t={t} outside schedule "
                              f"[{segments[0].t_start}, {segments[-1].t_end}]")
    for seg in segments:
        if t <= seg.t_end:
            return eval_ramp(seg, t)
    raise OutOfRangeError(t)  # pragma: no cover


# ------------------------------------------------------------ geometry

def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("axis must be non-zero")
    return v / n


@dataclass(frozen=True)
class CoilPair:
    radius: float
    half_separation: float
    axis: tuple = (0.0, 0.0, 1.0)
    center: tuple = (0.0, 0.0, 0.0)
    turns: float = 1.0
    polarity: str = "anti_helmholtz"

    def __post_init__(self):
        if self.radius <= 0 or self.half_separation <= 0:
            raise ValueError("coil radius and half separation must be positive")
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValueError("coil axis must have unit norm")
        if self.polarity not in POLARITIES:
            raise ValueError(f"unknown polarity {self.polarity!r}")

    def gradient_per_amp(self) -> float:
        """Axial gradient at the center per ampere of opposed current (T/m/A)."""
        a, s = self.radius, self.half_separation
        return 3 * MU0 * self.turns * a * a * s / (a * a + s * s) ** 2.5

    def field_per_amp(self) -> float:
        """Axial field at the center per ampere of co-directed current (T/A)."""
        a, s = self.radius, self.half_separation
        return MU0 * self.turns * a * a / (a * a + s * s) ** 1.5


@dataclass(frozen=True)
class PairDrive:
    """A coil pair with its current schedule(s).

    ``current`` drives the coil at ``center + half_separation*axis``;
    ``current_b`` (if given) drives the other coil, otherwise both coils
    carry the same schedule.  Current signs follow the pair polarity: for
    an anti-Helmholtz pair equal positive values produce opposed currents.
    """
    pair: CoilPair
    current: tuple = ()
    current_b: tuple | None = None
    gradient_calibration: float | None = None

    def __post_init__(self):
        _check_contiguous(self.current, "pair current")
        if self.current_b is not None:
            _check_contiguous(self.current_b, "pair current_b")
        if self.gradient_calibration is not None and self.gradient_calibration <= 0:
            raise ValueError("gradient calibration must be positive")

    @property
    def g_cal(self) -> float:
        if self.gradient_calibration is not None:
            return self.gradient_calibration
        return self.pair.gradient_per_amp()

    @property
    def h_cal(self) -> float:
        # the homogeneous part keeps the same geometric ratio to the gradient
        return self.pair.field_per_amp() * self.g_cal / self.pair.gradient_per_amp()


@dataclass(frozen=True)
class FieldSystem:
    pairs: tuple = ()
    bias: tuple = ((), (), ())
    backend: str = "ideal_quadrupole"

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        if len(self.bias) != 3:
            raise ValueError("bias needs three schedules (x, y, z)")
        for k, sched in enumerate(self.bias):
            _check_contiguous(sched, f"bias[{k}]")

    @cached_property
    def packed(self):
        """Flat arrays consumed by the compiled kernels."""
        chans = []
        for d in self.pairs:
            chans.append(tuple(d.current))
            chans.append(tuple(d.current if d.current_b is None else d.current_b))
        chans.extend(tuple(b) for b in self.bias)
        rows, ptr = [], [0]
        for ch in chans:
            for s in ch:
                rows.append((s.t_start, s.t_end, s.v_start, s.v_end, SHAPES[s.shape]))
            ptr.append(len(rows))
        segs = np.array(rows, dtype=float).reshape(-1, 5)
        ptab = np.zeros((len(self.pairs), 12))
        for i, d in enumerate(self.pairs):
            p = d.pair
            ptab[i, 0:3] = p.center
            ptab[i, 3:6] = _unit(p.axis)
            ptab[i, 6] = p.radius
            ptab[i, 7] = p.half_separation
            ptab[i, 8] = p.turns
            ptab[i, 9] = POLARITIES[p.polarity]
            ptab[i, 10] = d.g_cal
            ptab[i, 11] = d.h_cal
        return segs, np.array(ptr, dtype=np.int64), ptab, BACKENDS[self.backend]

    def time_domain(self):
        lo, hi = -np.inf, np.inf
        for d in self.pairs:
            for sched in (d.current, d.current_b):
                if sched:
                    lo = max(lo, sched[0].t_start)
                    hi = min(hi, sched[-1].t_end)
        for sched in self.bias:
            if sched:
                lo = max(lo, sched[0].t_start)
                hi = min(hi, sched[-1].t_end)
        return lo, hi

    def check_time(self, t):
        lo, hi = self.time_domain()
        if not lo <= t <= hi:
            raise OutOfRangeError(f"t={t} outside field schedule domain [{lo}, {hi}]")

    def scaled(self, alpha: float) -> "FieldSystem":
        """Copy with every pair current multiplied by ``alpha``."""
        def sc(sched):
            return tuple(RampSegment(s.t_start, s.t_end, alpha * s.v_start,
                                     alpha * s.v_end, s.shape) for s in sched)
        pairs = tuple(PairDrive(d.pair, sc(d.current),
                                None if d.current_b is None else sc(d.current_b),
                                d.gradient_calibration) for d in self.pairs)
        return FieldSystem(pairs, self.bias, self.backend)

    def quiet_after(self) -> float:
        """Time after which the field exerts no force.

        From then on every pair current is zero and the bias field is
        constant, so |B| is uniform.
        """
        t_quiet = -np.inf
        for d in self.pairs:
            for sched in (d.current, d.current_b or ()):
                for s in sched:
                    if s.v_start != 0 or s.v_end != 0:
                        t_quiet = max(t_quiet, s.t_end)
        for sched in self.bias:
            for s in sched:
                if s.v_start != s.v_end:
                    t_quiet = max(t_quiet, s.t_end)
        return t_quiet


# ------------------------------------------------------ elliptic integrals

@njit(cache=True, nogil=True)
def ellipke(m):
    """Complete elliptic integrals K(m), E(m) by the AGM, parameter m=k^2."""
    if m >= 1.0:
        return np.inf, 1.0
    a = 1.0
    b = np.sqrt(1.0 - m)
    c2 = m
    acc = 0.5 * c2
    pw = 0.5
    for _ in range(60):
        an = 0.5 * (a + b)
        bn = np.sqrt(a * b)
        c = 0.5 * (a - b)
        pw *= 2.0
        acc += pw * c * c
        a, b = an, bn
        if abs(c) <= 1e-15 * a:
            break
    K = np.pi / (2.0 * a)
    return K, K * (1.0 - acc)


# ----------------------------------------------------------- field kernels

@njit(cache=True, nogil=True)
def _loop_local(rho, z, a, current):
    """(B_rho, B_z) of a loop of radius ``a`` in the plane z=0."""
    c0 = MU0 * current
    if rho < 1e-3 * a:
        s = a * a + z * z
        cp = 0.5 * c0 * a * a
        b0 = cp * s ** -1.5
        d1 = -3.0 * cp * z * s ** -2.5
        d2 = 3.0 * cp * (4.0 * z * z - a * a) * s ** -3.5
        d3 = 15.0 * cp * z * (3.0 * a * a - 4.0 * z * z) * s ** -4.5
        return -0.5 * rho * d1 + rho ** 3 * d3 / 16.0, b0 - 0.25 * rho * rho * d2
    r2 = a * a + rho * rho + z * z
    alpha2 = r2 - 2.0 * a * rho
    beta2 = r2 + 2.0 * a * rho
    if alpha2 <= (1e-12 * a) ** 2:
        return np.nan, np.nan
    beta = np.sqrt(beta2)
    k2 = 1.0 - alpha2 / beta2
    K, E = ellipke(k2)
    C = c0 / np.pi
    brho = C * z / (2.0 * alpha2 * beta * rho) * (r2 * E - alpha2 * K)
    bz = C / (2.0 * alpha2 * beta) * ((a * a - rho * rho - z * z) * E + alpha2 * K)
    return brho, bz


@njit(cache=True, nogil=True)
def _loop_global(x, y, z, cx, cy, cz, ax, ay, az, a, current):
    dx, dy, dz = x - cx, y - cy, z - cz
    zl = dx * ax + dy * ay + dz * az
    px, py, pz = dx - zl * ax, dy - zl * ay, dz - zl * az
    rho = np.sqrt(px * px + py * py + pz * pz)
    brho, bz = _loop_local(rho, zl, a, current)
    if rho > 0.0:
        ux, uy, uz = px / rho, py / rho, pz / rho
    else:
        ux = uy = uz = 0.0
    return (brho * ux + bz * ax, brho * uy + bz * ay, brho * uz + bz * az)


@njit(cache=True, nogil=True)
def _field(x, y, z, t, segs, ptr, ptab, backend):
    bx = _schedule_value(segs, ptr[-4], ptr[-3], t)
    by = _schedule_value(segs, ptr[-3], ptr[-2], t)
    bz = _schedule_value(segs, ptr[-2], ptr[-1], t)
    for p in range(ptab.shape[0]):
        ia = _schedule_value(segs, ptr[2 * p], ptr[2 * p + 1], t)
        ib = _schedule_value(segs, ptr[2 * p + 1], ptr[2 * p + 2], t)
        cx, cy, cz = ptab[p, 0], ptab[p, 1], ptab[p, 2]
        ax, ay, az = ptab[p, 3], ptab[p, 4], ptab[p, 5]
        pol = ptab[p, 9]
        top = ia
        bot = -ib if pol > 0 else ib
        if backend == 0:
            quad = 0.5 * (top - bot) * ptab[p, 10]
            hom = 0.5 * (top + bot) * ptab[p, 11]
            dx, dy, dz = x - cx, y - cy, z - cz
            zl = dx * ax + dy * ay + dz * az
            # B = G (-r/2 + 3/2 (r.n) n) + H n
            f = 1.5 * quad * zl + hom
            bx += -0.5 * quad * dx + f * ax
            by += -0.5 * quad * dy + f * ay
            bz += -0.5 * quad * dz + f * az
        else:
            s, rad, n = ptab[p, 7], ptab[p, 6], ptab[p, 8]
            b1 = _loop_global(x, y, z, cx + s * ax, cy + s * ay, cz + s * az,
                              ax, ay, az, rad, n * top)
            b2 = _loop_global(x, y, z, cx - s * ax, cy - s * ay, cz - s * az,
                              ax, ay, az, rad, n * bot)
            bx += b1[0] + b2[0]
            by += b1[1] + b2[1]
            bz += b1[2] + b2[2]
    return bx, by, bz


@njit(cache=True, nogil=True)
def _ideal_jacobian(t, segs, ptr, ptab, jac):
    for i in range(3):
        for j in range(3):
            jac[i, j] = 0.0
    for p in range(ptab.shape[0]):
        ia = _schedule_value(segs, ptr[2 * p], ptr[2 * p + 1], t)
        ib = _schedule_value(segs, ptr[2 * p + 1], ptr[2 * p + 2], t)
        pol = ptab[p, 9]
        bot = -ib if pol > 0 else ib
        quad = 0.5 * (ia - bot) * ptab[p, 10]
        for i in range(3):
            jac[i, i] += -0.5 * quad
            for j in range(3):
                jac[i, j] += 1.5 * quad * ptab[p, 3 + i] * ptab[p, 3 + j]


@njit(cache=True, nogil=True)
def _ideal_affine(t, segs, ptr, ptab):
    """Ideal-backend field as B(r) = M r + c at time t.

    Returns the six independent entries of the symmetric M
    (xx, xy, xz, yy, yz, zz) followed by c.
    """
    m00 = m01 = m02 = m11 = m12 = m22 = 0.0
    c0 = _schedule_value(segs, ptr[-4], ptr[-3], t)
    c1 = _schedule_value(segs, ptr[-3], ptr[-2], t)
    c2 = _schedule_value(segs, ptr[-2], ptr[-1], t)
    for p in range(ptab.shape[0]):
        ia = _schedule_value(segs, ptr[2 * p], ptr[2 * p + 1], t)
        ib = _schedule_value(segs, ptr[2 * p + 1], ptr[2 * p + 2], t)
        bot = -ib if ptab[p, 9] > 0 else ib
        quad = 0.5 * (ia - bot) * ptab[p, 10]
        hom = 0.5 * (ia + bot) * ptab[p, 11]
        ax, ay, az = ptab[p, 3], ptab[p, 4], ptab[p, 5]
        q = 1.5 * quad
        a00 = q * ax * ax - 0.5 * quad
        a01 = q * ax * ay
        a02 = q * ax * az
        a11 = q * ay * ay - 0.5 * quad
        a12 = q * ay * az
        a22 = q * az * az - 0.5 * quad
        cx, cy, cz = ptab[p, 0], ptab[p, 1], ptab[p, 2]
        m00 += a00
        m01 += a01
        m02 += a02
        m11 += a11
        m12 += a12
        m22 += a22
        c0 += hom * ax - (a00 * cx + a01 * cy + a02 * cz)
        c1 += hom * ay - (a01 * cx + a11 * cy + a12 * cz)
        c2 += hom * az - (a02 * cx + a12 * cy + a22 * cz)
    return m00, m01, m02, m11, m12, m22, c0, c1, c2


@njit(cache=True, nogil=True, inline="always")
def _affine_bmag_grad(x, y, z, a):
    """|B| and grad|B| = M B / |B| for an affine field."""
    bx = a[0] * x + a[1] * y + a[2] * z + a[6]
    by = a[1] * x + a[3] * y + a[4] * z + a[7]
    bz = a[2] * x + a[4] * y + a[5] * z + a[8]
    bm = np.sqrt(bx * bx + by * by + bz * bz)
    if bm == 0.0:
        return bm, 0.0, 0.0, 0.0
    return (bm, (a[0] * bx + a[1] * by + a[2] * bz) / bm,
            (a[1] * bx + a[3] * by + a[4] * bz) / bm,
            (a[2] * bx + a[4] * by + a[5] * bz) / bm)


@njit(cache=True, nogil=True)
def _bmag_grad(x, y, z, t, segs, ptr, ptab, backend):
    """|B| and grad|B| at one point."""
    bx, by, bz = _field(x, y, z, t, segs, ptr, ptab, backend)
    bm = np.sqrt(bx * bx + by * by + bz * bz)
    if backend == 0:
        jac = np.empty((3, 3))
        _ideal_jacobian(t, segs, ptr, ptab, jac)
        if bm == 0.0:
            return bm, 0.0, 0.0, 0.0
        gx = (jac[0, 0] * bx + jac[1, 0] * by + jac[2, 0] * bz) / bm
        gy = (jac[0, 1] * bx + jac[1, 1] * by + jac[2, 1] * bz) / bm
        gz = (jac[0, 2] * bx + jac[1, 2] * by + jac[2, 2] * bz) / bm
        return bm, gx, gy, gz
    h = FD_STEP
    g = np.empty(3)
    for k in range(3):
        ex = h if k == 0 else 0.0
        ey = h if k == 1 else 0.0
        ez = h if k == 2 else 0.0
        p = _field(x + ex, y + ey, z + ez, t, segs, ptr, ptab, backend)
        m = _field(x - ex, y - ey, z - ez, t, segs, ptr, ptab, backend)
        g[k] = (np.sqrt(p[0] ** 2 + p[1] ** 2 + p[2] ** 2)
                - np.sqrt(m[0] ** 2 + m[1] ** 2 + m[2] ** 2)) / (2.0 * h)
    return bm, g[0], g[1], g[2]


@njit(cache=True, nogil=True)
def _field_array(pos, t, segs, ptr, ptab, backend, out):
    for i in range(pos.shape[0]):
        b = _field(pos[i, 0], pos[i, 1], pos[i, 2], t, segs, ptr, ptab, backend)
        out[i, 0] = b[0]
        out[i, 1] = b[1]
        out[i, 2] = b[2]


@njit(cache=True, nogil=True)
def _bgrad_array(pos, t, segs, ptr, ptab, backend, bm, grad):
    for i in range(pos.shape[0]):
        r = _bmag_grad(pos[i, 0], pos[i, 1], pos[i, 2], t, segs, ptr, ptab, backend)
        bm[i] = r[0]
        grad[i, 0] = r[1]
        grad[i, 1] = r[2]
        grad[i, 2] = r[3]


# ------------------------------------------------------------ public API

def _as_points(r):
    r = np.asarray(r, dtype=float)
    single = r.ndim == 1
    return np.ascontiguousarray(np.atleast_2d(r)), single


def quadrupole_field(r, gradient, center=(0.0, 0.0, 0.0), axis=(0.0, 0.0, 1.0)):
    """Ideal linear quadrupole: ``gradient`` is the strong (axial) gradient in T/m."""
    if gradient < 0:
        raise ValueError("gradient must be non-negative")
    pts, single = _as_points(r)
    n = _unit(axis)
    d = pts - np.asarray(center, dtype=float)
    zl = d @ n
    b = gradient * (-0.5 * d + 1.5 * zl[:, None] * n)
    return b[0] if single else b


def loop_field(r, radius, center, axis, current):
    """Exact field of a circular current loop (T).

    Raises :class:`SingularityError` for points on the wire.
    """
    pts, single = _as_points(r)
    c = np.asarray(center, dtype=float)
    n = _unit(axis)
    out = np.empty_like(pts)
    for i, p in enumerate(pts):
        out[i] = _loop_global(p[0], p[1], p[2], c[0], c[1], c[2],
                              n[0], n[1], n[2], float(radius), float(current))
    if np.isnan(out).any():
        raise SingularityError("field point lies on the loop wire")
    return out[0] if single else out


def total_field(sys: FieldSystem, t: float, r):
    """Superposed field of all pairs plus the homogeneous bias (T)."""
    sys.check_time(t)
    pts, single = _as_points(r)
    segs, ptr, ptab, be = sys.packed
    out = np.empty_like(pts)
    _field_array(pts, float(t), segs, ptr, ptab, be, out)
    if np.isnan(out).any():
        raise SingularityError("field point lies on a coil wire")
    return out[0] if single else out


def field_jacobian(sys: FieldSystem, t: float, r) -> np.ndarray:
    """dB_i/dx_j at one point."""
    segs, ptr, ptab, be = sys.packed
    if be == 0:
        jac = np.empty((3, 3))
        _ideal_jacobian(float(t), segs, ptr, ptab, jac)
        return jac
    r = np.asarray(r, dtype=float)
    jac = np.empty((3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = FD_STEP
        jac[:, k] = (total_field(sys, t, r + e) - total_field(sys, t, r - e)) / (2 * FD_STEP)
    return jac


def zero_locus(sys: FieldSystem, t: float, guess, tol=1e-10, max_iter=100):
    """Point where the total field vanishes, by damped Newton iteration."""
    r = np.asarray(guess, dtype=float).copy()
    b = total_field(sys, t, r)
    for _ in range(max_iter):
        bn = np.linalg.norm(b)
        if bn < tol:
            return r
        jac = field_jacobian(sys, t, r)
        sv = np.linalg.svd(jac, compute_uv=False)
        if sv[0] == 0.0 or sv[-1] <= 1e-12 * sv[0]:
            raise DegenerateConfigurationError(
                "field gradient is singular; zero locus is not isolated")
        step = np.linalg.solve(jac, b)
        lam = 1.0
        while lam > 1e-6:
            trial = r - lam * step
            bt = total_field(sys, t, trial)
            if np.linalg.norm(bt) < bn:
                break
            lam *= 0.5
        r, b = trial, bt
    if np.linalg.norm(b) < tol:
        return r
    raise NoZeroFoundError(f"no field zero found near {guess} after {max_iter} iterations")


def magnetic_potential(sys: FieldSystem, t: float, r, mu_eff: float, mass: float,
                       g: float = G_EARTH, up=(0.0, 0.0, 1.0), datum: float = 0.0):
    """Adiabatic potential mu_eff*|B| plus gravity, height measured along ``up``."""
    pts, single = _as_points(r)
    b = total_field(sys, t, pts)
    u = mu_eff * np.linalg.norm(b, axis=1) + mass * g * (pts @ np.asarray(up, float) - datum)
    return u[0] if single else u


def magnetic_potential_gradient(sys: FieldSystem, t: float, r, mu_eff: float,
                                mass: float, g: float = G_EARTH, up=(0.0, 0.0, 1.0)):
    """Gradient of :func:`magnetic_potential` (analytic for the ideal backend)."""
    sys.check_time(t)
    pts, single = _as_points(r)
    segs, ptr, ptab, be = sys.packed
    bm = np.empty(len(pts))
    grad = np.empty_like(pts)
    _bgrad_array(pts, float(t), segs, ptr, ptab, be, bm, grad)
    out = mu_eff * grad + mass * g * np.asarray(up, float)
    return out[0] if single else out


# ------------------------------------------------------ transport planning

@dataclass
class TransportPlan:
    drives: tuple
    max_gradient_deviation: float
    knot_times: np.ndarray = field(repr=False)
    knot_positions: np.ndarray = field(repr=False)


def _unit_responses(pairs: Sequence[CoilPair], backend, point, axis):
    """Axial field and axial gradient at ``point`` per unit schedule value of each coil."""
    cols = []
    for i, p in enumerate(pairs):
        for coil in (0, 1):
            cur = [RampSegment(0.0, 1.0, 1.0 if coil == 0 else 0.0,
                               1.0 if coil == 0 else 0.0, "constant")]
            other = [RampSegment(0.0, 1.0, 1.0 if coil == 1 else 0.0,
                                 1.0 if coil == 1 else 0.0, "constant")]
            fs = FieldSystem((PairDrive(p, tuple(cur), tuple(other)),), backend=backend)
            b = total_field(fs, 0.5, point) @ axis
            h = 1e-6
            db = (total_field(fs, 0.5, point + h * axis) @ axis
                  - total_field(fs, 0.5, point - h * axis) @ axis) / (2 * h)
            cols.append((b, db))
    return np.array(cols).T  # shape (2, 2*len(pairs))


def plan_transport(pairs: Sequence[CoilPair], start, end, gradient: float,
                   t_start: float, t_end: float, backend="ideal_quadrupole",
                   n_knots: int = 24, tolerance: float = 0.05) -> TransportPlan:
    """Coil currents moving the field zero from ``start`` to ``end`` on a tanh profile.

    At each knot the minimum-norm coil currents are chosen that put the
    field zero at the knot position with the requested axial gradient;
    currents are linear between knots.  The gradient along the path is then
    checked on a fine grid and must stay within ``tolerance`` (relative).
    """
    start = np.asarray(start, float)
    end = np.asarray(end, float)
    axis = _unit(pairs[0].axis)
    th = np.tanh(TANH_STEEPNESS)
    taus = np.linspace(0.0, 1.0, n_knots + 1)
    frac = (np.tanh(TANH_STEEPNESS * (2 * taus - 1)) + th) / (2 * th)
    times = t_start + taus * (t_end - t_start)
    positions = start + frac[:, None] * (end - start)
    currents = []
    for pos in positions:
        resp = _unit_responses(pairs, backend, pos, axis)
        sol, *_ = np.linalg.lstsq(resp, np.array([0.0, gradient]), rcond=None)
        currents.append(sol)
    currents = np.array(currents)
    drives = []
    for i, p in enumerate(pairs):
        sa = tuple(RampSegment(times[k], times[k + 1], currents[k, 2 * i],
                               currents[k + 1, 2 * i], "linear") for k in range(n_knots))
        sb = tuple(RampSegment(times[k], times[k + 1], currents[k, 2 * i + 1],
                               currents[k + 1, 2 * i + 1], "linear")
                   for k in range(n_knots))
        drives.append(PairDrive(p, sa, sb))
    fs = FieldSystem(tuple(drives), backend=backend)
    worst = 0.0
    for t in np.linspace(t_start, t_end, 8 * n_knots + 1):
        z0 = zero_locus(fs, t, positions[np.searchsorted(times, t).clip(0, n_knots)])
        g = field_jacobian(fs, t, z0) @ axis @ axis
        worst = max(worst, abs(g / gradient - 1.0))
    if worst > tolerance:
        raise DegenerateConfigurationError(
            f"transport gradient deviates by {worst:.3g} (> {tolerance}) from target")
    return TransportPlan(tuple(drives), worst, times, positions)
