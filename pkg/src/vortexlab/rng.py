"""Counter-based random numbers (Philox4x32-10), vectorized over numpy.

Every draw is a pure function of ``(seed, counter)`` so a stream can be
addressed directly by ``(replica, particle slot, step)`` without carrying
generator state between workers.
"""

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)

# stream tags (fourth counter word)
STREAM_NOISE = 0
STREAM_INIT_PLUS = 1
STREAM_INIT_MINUS = 2
STREAM_MISC = 3


def philox4x32(counter, key, rounds=10):
    """Philox4x32 block function.

    ``counter`` is a sequence of four uint32-valued arrays (broadcastable),
    ``key`` a pair of uint32 integers. Returns four uint64 arrays holding
    32-bit outputs.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in counter)
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _S32, p0 & _MASK
        hi1, lo1 = p1 >> _S32, p1 & _MASK
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


def _key(seed):
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return seed & 0xFFFFFFFF, seed >> 32


def _to_unit(hi, lo):
    # 53-bit mantissa from two 32-bit words, in [0, 1)
    return ((hi >> np.uint64(5)).astype(np.float64) * 67108864.0
            + (lo >> np.uint64(6)).astype(np.float64)) / 9007199254740992.0


def uniform_pairs(seed, slots, step, replica=0, stream=STREAM_MISC):
    """Two U[0,1) variates per slot; shape ``(len(slots), 2)``."""
    slots = np.asarray(slots, dtype=np.uint64)
    w0, w1, w2, w3 = philox4x32((slots, step, replica, stream), _key(seed))
    return np.stack([_to_unit(w0, w1), _to_unit(w2, w3)], axis=-1)


def normal_pairs(seed, slots, step, replica=0, stream=STREAM_NOISE):
    """Two independent standard normals per slot (Box-Muller)."""
    u = uniform_pairs(seed, slots, step, replica, stream)
    rad = np.sqrt(-2.0 * np.log1p(-u[..., 0]))
    ang = 2.0 * np.pi * u[..., 1]
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)


def derive_seed(master, *words):
    """Mix a master seed with integer words into a new 64-bit seed."""
    key = _key(master)
    w = [int(x) & 0xFFFFFFFF for x in words] + [0] * 4
    out = philox4x32(tuple(np.uint64(x) for x in w[:4]), key)
    return (int(out[0]) << 32) | int(out[1])
