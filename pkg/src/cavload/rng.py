"""Counter-based random streams (Philox4x32-10).

Every draw is a pure function of ``(seed, atom id, counter, slot)``, so a
simulation gives bit-identical results however the atoms are split among
workers.  ``counter`` is normally the global stochastic step index and
``slot`` separates the independent draws needed within one step.
"""
import hashlib

import numpy as np
from numba import njit

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_MASK16 = np.uint64(0xFFFF)
_S32 = np.uint64(32)
_S16 = np.uint64(16)
_S5 = np.uint64(5)
_S6 = np.uint64(6)

SLOT_HYPERFINE = 0
SLOT_DIFFUSION_A = 1
SLOT_DIFFUSION_B = 2
SLOT_NOISE = 3
SLOT_SAMPLE_A = 4
SLOT_SAMPLE_B = 5
SLOT_SAMPLE_C = 6
SLOT_RECOIL_BASE = 16  # one slot per recoil event in a step


@njit(cache=True, nogil=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten-round Philox4x32 bijection on 32-bit words held in uint64."""
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _S32
        lo0 = p0 & _MASK
        hi1 = p1 >> _S32
        lo1 = p1 & _MASK
        c0, c1, c2, c3 = (hi1 ^ c1 ^ k0) & _MASK, lo1, (hi0 ^ c3 ^ k1) & _MASK, lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@njit(cache=True, nogil=True)
def _to_unit(a, b):
    # 53 random bits, offset by half an ulp so the result lies in (0, 1)
    x = (a >> _S5) * np.uint64(67108864) + (b >> _S6)
    return (np.float64(x) + 0.5) * (1.0 / 9007199254740992.0)


@njit(cache=True, nogil=True)
def uniform2(seed, ident, counter, slot):
    """Two independent uniforms in (0, 1)."""
    s = np.uint64(seed)
    i = np.uint64(ident)
    n = np.uint64(counter)
    c0 = n & _MASK
    c1 = (n >> _S32) & _MASK
    c2 = i & _MASK
    c3 = ((i >> _S32) & _MASK16) | (np.uint64(slot) << _S16)
    r0, r1, r2, r3 = philox4x32(c0, c1, c2, c3, s & _MASK, (s >> _S32) & _MASK)
    return _to_unit(r0, r1), _to_unit(r2, r3)


@njit(cache=True, nogil=True)
def normal2(seed, ident, counter, slot):
    """Two independent standard normals (Box-Muller)."""
    u1, u2 = uniform2(seed, ident, counter, slot)
    r = np.sqrt(-2.0 * np.log(u1))
    th = 2.0 * np.pi * u2
    return r * np.cos(th), r * np.sin(th)


@njit(cache=True, nogil=True)
def normal3(seed, ident, counter, slot_a, slot_b):
    g0, g1 = normal2(seed, ident, counter, slot_a)
    g2, _ = normal2(seed, ident, counter, slot_b)
    return g0, g1, g2


@njit(cache=True, nogil=True)
def unit_vector(seed, ident, counter, slot):
    """Isotropically distributed unit vector."""
    u1, u2 = uniform2(seed, ident, counter, slot)
    cz = 2.0 * u1 - 1.0
    sz = np.sqrt(max(0.0, 1.0 - cz * cz))
    ph = 2.0 * np.pi * u2
    return sz * np.cos(ph), sz * np.sin(ph), cz


@njit(cache=True, nogil=True)
def _uniform_array(seed, ids, counter, slot, out):
    for j in range(ids.shape[0]):
        a, b = uniform2(seed, ids[j], counter, slot)
        out[j, 0] = a
        out[j, 1] = b


@njit(cache=True, nogil=True)
def _normal_array(seed, ids, counter, slot_a, slot_b, out):
    for j in range(ids.shape[0]):
        g0, g1, g2 = normal3(seed, ids[j], counter, slot_a, slot_b)
        out[j, 0] = g0
        out[j, 1] = g1
        out[j, 2] = g2


def uniforms(seed, ids, counter, slot):
    """Array version of :func:`uniform2`; returns shape (len(ids), 2)."""
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    out = np.empty((ids.shape[0], 2))
    _uniform_array(np.uint64(seed), ids, counter, slot, out)
    return out


def normals3(seed, ids, counter, slot_a=SLOT_DIFFUSION_A, slot_b=SLOT_DIFFUSION_B):
    """Three standard normals per id; returns shape (len(ids), 3)."""
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    out = np.empty((ids.shape[0], 3))
    _normal_array(np.uint64(seed), ids, counter, slot_a, slot_b, out)
    return out


def derive_seed(master, *labels):
    """Deterministic 63-bit child seed from a master seed and labels.

    Labels are integers or strings (strings are hashed with SHA-256).
    """
    s = np.uint64(master & 0xFFFFFFFFFFFFFFFF)
    h = s
    for n, lab in enumerate(labels):
        if isinstance(lab, str):
            lab = int.from_bytes(hashlib.sha256(lab.encode()).digest()[:8], "little")
        lab = int(lab) & 0xFFFFFFFFFFFFFFFF
        r = philox4x32(np.uint64(lab & 0xFFFFFFFF), np.uint64(lab >> 32),
                       np.uint64(n), np.uint64(0x5EED),
                       h & _MASK, (h >> _S32) & _MASK)
        h = (r[0] << _S32) | r[1]
    return int(h) & 0x7FFFFFFFFFFFFFFF
