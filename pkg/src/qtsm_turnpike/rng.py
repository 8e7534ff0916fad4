"""Counter-based Gaussian random numbers.

Every normal is a pure function of ``(seed, path, step, slot)``. The
Philox4x32-10 block cipher (Salmon et al., SC'11) is keyed with the 64-bit
seed; the counter is ``(step, path_lo, path_hi, block)``. Block ``b`` yields
the 64-bit words for slots ``2b`` and ``2b+1``, and each word is mapped to a
normal by a 256-layer ziggurat. A rejected slot ``j`` continues on its own
retry counters ``block = 2^31 + 2^16·j + k``, so rejections never shift the
numbers used by other slots, steps or paths. Results therefore do not
depend on how paths are grouped or scheduled across threads.

The generator works on chunks of consecutive paths with the path index in
the innermost loop, which lets the compiler vectorize the cipher.
"""

from __future__ import annotations

import numba as nb
import numpy as np

MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_SH32 = np.uint64(32)
_SH11 = np.uint64(11)
_U53 = 1.0 / 9007199254740992.0
_RETRY_BASE = np.uint64(1 << 31)
_SH16 = np.uint64(16)


@nb.njit(inline="always", cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Philox4x32 with 10 rounds; all arguments are 32-bit values held in uint64."""
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _SH32
        lo0 = p0 & MASK32
        hi1 = p1 >> _SH32
        lo1 = p1 & MASK32
        c0, c1, c2, c3 = (hi1 ^ c1 ^ k0) & MASK32, lo1, (hi0 ^ c3 ^ k1) & MASK32, lo0
        k0 = (k0 + _W0) & MASK32
        k1 = (k1 + _W1) & MASK32
    return c0, c1, c2, c3


def _ziggurat_tables(n: int = 256, r: float = 3.6541528853610088, v: float = 0.00492867323399):
    """Layer tables for the normal ziggurat with 52-bit magnitudes (Marsaglia and Tsang)."""
    m1 = 2.0**52
    f = lambda x: np.exp(-0.5 * x * x)  # noqa: E731
    ki = np.zeros(n, dtype=np.uint64)
    wi = np.zeros(n)
    fi = np.zeros(n)
    dn = tn = r
    q = v / f(dn)
    ki[0] = np.uint64((dn / q) * m1)
    ki[1] = 0
    wi[0] = q / m1
    wi[n - 1] = dn / m1
    fi[0] = 1.0
    fi[n - 1] = f(dn)
    for i in range(n - 2, 0, -1):
        dn = np.sqrt(-2.0 * np.log(v / dn + f(dn)))
        ki[i + 1] = np.uint64((dn / tn) * m1)
        tn = dn
        fi[i] = f(dn)
        wi[i] = dn / m1
    return ki, wi, fi


ZIG_K, ZIG_W, ZIG_F = _ziggurat_tables()
ZIG_R = 3.6541528853610088
_IDX = np.uint64(0xFF)
_MANT = np.uint64((1 << 52) - 1)
_SH8 = np.uint64(8)
_SH9 = np.uint64(9)
_ONE = np.uint64(1)


@nb.njit(inline="always", cache=True)
def _u01(u):
    """Uniform in (0, 1) from the top 53 bits of a 64-bit word."""
    return (float(u >> _SH11) + 0.5) * _U53


@nb.njit(inline="always", cache=True)
def _zig_fast(u):
    """Candidate normal from a word, and whether the fast path accepts it."""
    idx = u & _IDX
    sign = (u >> _SH8) & _ONE
    rabs = (u >> _SH9) & _MANT
    x = float(np.int64(rabs)) * ZIG_W[idx]
    return x * (1.0 - 2.0 * float(sign)), rabs < ZIG_K[idx]


@nb.njit(cache=True)
def _zig_slow(u, k0, k1, c0, c1, c2, slot):
    """Finish a rejected ziggurat draw using the retry counters of ``slot``."""
    block = _RETRY_BASE + (np.uint64(slot) << _SH16)
    while True:
        idx = np.int64(u & _IDX)
        sign = (u >> _SH8) & _ONE
        rabs = (u >> _SH9) & _MANT
        x = float(np.int64(rabs)) * ZIG_W[idx]
        if sign:
            x = -x
        if rabs < ZIG_K[idx]:
            return x
        a, b, c, e = philox4x32(c0, c1, c2, block, k0, k1)
        block += _ONE
        if idx == 0:
            # tail beyond r
            xx = -np.log(_u01((a << _SH32) | b)) / ZIG_R
            yy = -np.log(_u01((c << _SH32) | e))
            while yy + yy <= xx * xx:
                a, b, c, e = philox4x32(c0, c1, c2, block, k0, k1)
                block += _ONE
                xx = -np.log(_u01((a << _SH32) | b)) / ZIG_R
                yy = -np.log(_u01((c << _SH32) | e))
            return -(ZIG_R + xx) if sign else ZIG_R + xx
        if (ZIG_F[idx - 1] - ZIG_F[idx]) * _u01((c << _SH32) | e) + ZIG_F[idx] < np.exp(-0.5 * x * x):
            return x
        u = (a << _SH32) | b


@nb.njit(cache=True)
def fill_chunk(k0, k1, step, path0, nc, d, words, z):
    """Normals for slots ``0..d−1`` of paths ``path0..path0+nc−1`` at ``step``.

    ``words`` is scratch of shape ``(≥ d+1, ≥ nc)`` (uint64); ``z`` receives
    the normals with shape ``(≥ d, ≥ nc)``.
    """
    c0 = np.uint64(step) & MASK32
    nblocks = (d + 1) // 2
    for b in range(nblocks):
        cb = np.uint64(b)
        for i in range(nc):
            p = np.uint64(path0 + i)
            a, bb, c, e = philox4x32(c0, p & MASK32, p >> _SH32, cb, k0, k1)
            words[2 * b, i] = (a << _SH32) | bb
            words[2 * b + 1, i] = (c << _SH32) | e
    nrej = 0
    for j in range(d):
        for i in range(nc):
            x, ok = _zig_fast(words[j, i])
            z[j, i] = x
            if not ok:
                nrej += 1
    if nrej > 0:
        for j in range(d):
            for i in range(nc):
                u = words[j, i]
                _, ok = _zig_fast(u)
                if not ok:
                    p = np.uint64(path0 + i)
                    z[j, i] = _zig_slow(u, k0, k1, c0, p & MASK32, p >> _SH32, j)


def split_seed(seed: int) -> tuple[np.uint64, np.uint64]:
    """Philox key words from a 64-bit seed."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


@nb.njit(cache=True)
def _normal_block(k0, k1, path0, npaths, step0, nsteps, d, chunk):
    out = np.empty((npaths, nsteps, d))
    words = np.empty((d + 1, chunk), dtype=np.uint64)
    z = np.empty((d, chunk))
    for c in range(0, npaths, chunk):
        nc = min(chunk, npaths - c)
        for s in range(nsteps):
            fill_chunk(k0, k1, step0 + s, path0 + c, nc, d, words, z)
            for i in range(nc):
                for j in range(d):
                    out[c + i, s, j] = z[j, i]
    return out


def normal_block(
    seed: int, npaths: int, nsteps: int, d: int, path0: int = 0, step0: int = 0, chunk: int = 512
) -> np.ndarray:
    """Normals of shape ``(npaths, nsteps, d)`` for the given path and step ranges.

    The values do not depend on ``chunk``.
    """
    k0, k1 = split_seed(seed)
    return _normal_block(k0, k1, path0, npaths, step0, nsteps, d, chunk)


@nb.njit(cache=True)
def _philox_py(c0, c1, c2, c3, k0, k1):
    return philox4x32(c0, c1, c2, c3, k0, k1)


def philox(counter, key) -> tuple[int, int, int, int]:
    """Philox4x32-10 of a 4-word counter and 2-word key (Python ints)."""
    c = [np.uint64(v & 0xFFFFFFFF) for v in counter]
    k = [np.uint64(v & 0xFFFFFFFF) for v in key]
    return tuple(int(v) for v in _philox_py(c[0], c[1], c[2], c[3], k[0], k[1]))
