"""Counter-based random streams.

Every photon history owns an independent stream keyed by
``(seed, angle index, energy bin, photon index)``. Draw ``i`` of a stream is
``mix64(key + (i + 1) * GOLDEN)`` (the SplitMix64 output function applied to a
Weyl sequence), so a history's numbers do not depend on which worker runs it
or on how many histories ran before it.

A stream state is a two-element ``uint64`` array ``[key, counter]``.
"""

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53

# per-field salts so (a, b) and (b, a) give different keys
_SALT = (np.uint64(0xD1B54A32D192ED03), np.uint64(0x8CB92BA72F3D8DD7),
         np.uint64(0xABC98388FB8FAC03), np.uint64(0xE7037ED1A0B428DB))


@nb.njit(cache=True, nogil=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True, nogil=True)
def stream_key(seed, a, b, c):
    k = mix64(np.uint64(seed) ^ _SALT[0])
    k = mix64(k ^ (np.uint64(a) * _SALT[1]))
    k = mix64(k ^ (np.uint64(b) * _SALT[2]))
    k = mix64(k ^ (np.uint64(c) * _SALT[3]))
    return k


@nb.njit(cache=True, nogil=True)
def new_state(seed, a, b, c):
    st = np.empty(2, dtype=np.uint64)
    st[0] = stream_key(seed, a, b, c)
    st[1] = np.uint64(0)
    return st


@nb.njit(cache=True, nogil=True)
def next_u64(state):
    state[1] += _ONE
    return mix64(state[0] + state[1] * _GOLDEN)


@nb.njit(cache=True, nogil=True)
def uniform(state):
    """Uniform double in the open interval (0, 1)."""
    return (np.float64(next_u64(state) >> _S11) + 0.5) * _INV53


@nb.njit(cache=True, nogil=True)
def fill_uniform(state, out):
    for i in range(out.shape[0]):
        out[i] = uniform(state)


class CounterRNG:
    """Python handle on one stream; pass ``rng.state`` into compiled kernels."""

    def __init__(self, seed, *stream):
        ids = list(stream) + [0] * (3 - len(stream))
        if len(ids) != 3:
            raise ValueError("at most three stream identifiers")
        self.seed = int(seed)
        self.stream = tuple(int(i) for i in ids)
        self.state = new_state(np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF), *[np.uint64(i) for i in ids])

    def random(self, size=None):
        if size is None:
            return uniform(self.state)
        out = np.empty(int(np.prod(size)))
        fill_uniform(self.state, out)
        return out.reshape(size)

    @property
    def counter(self):
        return int(self.state[1])
