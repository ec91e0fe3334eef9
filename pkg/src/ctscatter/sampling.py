"""Differential cross sections and interaction sampling.

Compton scattering uses the Klein-Nishina cross section multiplied by the
incoherent scattering function S(q); Rayleigh scattering uses the Thomson
cross section multiplied by F(q)^2. Both are functions of the momentum
transfer q = sin(theta/2) * E / 12.398 [1/Angstrom].

The ``_k``-suffixed functions are compiled kernels working on
:class:`~ctscatter.physics_data.PackedMaterials` and are called directly by
the transport code. The public wrappers take a :class:`Material`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numba as nb
import numpy as np

from . import rng as _rng
from .constants import HC_KEV_ANGSTROM, MEC2_KEV, R0_CM
from .errors import DomainError, SimulationError
from .physics_data import _check_energy, linear_interp, loglog_interp, pack_materials

PHOTOELECTRIC, COMPTON, RAYLEIGH = 0, 1, 2
INTERACTION_NAMES = ("photoelectric", "compton", "rayleigh")

_R0SQ = R0_CM * R0_CM
_PI_R0SQ_BARN = math.pi * _R0SQ * 1e24  # pi r0^2 in barns


@dataclass(frozen=True)
class PhysicsConstants:
    r0: float = R0_CM
    mec2: float = MEC2_KEV


@dataclass(frozen=True)
class ComptonSample:
    theta: float
    alpha_prime: float  # outgoing energy / mec2
    phi: float


# ---------------------------------------------------------------------------
# compiled kernels


@nb.njit(cache=True, nogil=True)
def momentum_transfer(energy, cos_t):
    return math.sqrt(max(0.5 * (1.0 - cos_t), 0.0)) * energy / HC_KEV_ANGSTROM


@nb.njit(cache=True, nogil=True)
def s_k(pk, m, q):
    return linear_interp(pk.s_x[m], pk.s_y[m], pk.s_n[m], q, pk.z_eff[m])


@nb.njit(cache=True, nogil=True)
def f_k(pk, m, q):
    n = pk.f_n[m]
    return linear_interp(pk.f_x[m], pk.f_y[m], n, q, pk.f_y[m, n - 1])


@nb.njit(cache=True, nogil=True)
def mass_mu_k(pk, m, energy):
    return loglog_interp(pk.mu_x[m], pk.mu_y[m], pk.mu_n[m], energy)


@nb.njit(cache=True, nogil=True)
def sigma_k(pk, m, energy, kind):
    if kind == PHOTOELECTRIC:
        return loglog_interp(pk.pe_x[m], pk.pe_y[m], pk.pe_n[m], energy)
    if kind == COMPTON:
        return loglog_interp(pk.inc_x[m], pk.inc_y[m], pk.inc_n[m], energy)
    return loglog_interp(pk.coh_x[m], pk.coh_y[m], pk.coh_n[m], energy)


@nb.njit(cache=True, nogil=True)
def kn_shape(alpha, cos_t):
    """(a'/a)^2 (a'/a + a/a' - sin^2) and a'/a."""
    r = 1.0 / (1.0 + alpha * (1.0 - cos_t))
    return r * r * (r + 1.0 / r - (1.0 - cos_t * cos_t)), r


@nb.njit(cache=True, nogil=True)
def dsigma_compton_k(pk, m, energy, cos_t):
    shape, _ = kn_shape(energy / MEC2_KEV, cos_t)
    return 0.5 * _R0SQ * shape * s_k(pk, m, momentum_transfer(energy, cos_t))


@nb.njit(cache=True, nogil=True)
def dsigma_rayleigh_k(pk, m, energy, cos_t):
    f = f_k(pk, m, momentum_transfer(energy, cos_t))
    return 0.5 * _R0SQ * (1.0 + cos_t * cos_t) * f * f


@nb.njit(cache=True, nogil=True)
def p_lambda_compton_k(pk, m, energy, cos_t):
    sig = sigma_k(pk, m, energy, COMPTON)
    if sig <= 0.0:
        return -1.0
    shape, _ = kn_shape(energy / MEC2_KEV, cos_t)
    return _PI_R0SQ_BARN / sig * shape * s_k(pk, m, momentum_transfer(energy, cos_t))


@nb.njit(cache=True, nogil=True)
def p_lambda_rayleigh_k(pk, m, energy, cos_t):
    sig = sigma_k(pk, m, energy, RAYLEIGH)
    if sig <= 0.0:
        return -1.0
    f = f_k(pk, m, momentum_transfer(energy, cos_t))
    return _PI_R0SQ_BARN / sig * (1.0 + cos_t * cos_t) * f * f


@nb.njit(cache=True, nogil=True)
def select_interaction_k(pk, m, energy, u):
    s_pe = sigma_k(pk, m, energy, PHOTOELECTRIC)
    s_in = sigma_k(pk, m, energy, COMPTON)
    s_co = sigma_k(pk, m, energy, RAYLEIGH)
    tot = s_pe + s_in + s_co
    if not tot > 0.0:
        return -1
    x = u * tot
    if x < s_pe:
        return PHOTOELECTRIC
    if x < s_pe + s_in:
        return COMPTON
    return RAYLEIGH


@nb.njit(cache=True, nogil=True)
def kahn_kn_k(alpha, state):
    """Kahn's rejection sampler for the free-electron Klein-Nishina law.

    Returns (cos_theta, x) with x = E/E' = 1 + alpha (1 - cos_theta).
    """
    two_a = 2.0 * alpha
    split = (1.0 + two_a) / (9.0 + two_a)
    while True:
        r1 = _rng.uniform(state)
        r2 = _rng.uniform(state)
        r3 = _rng.uniform(state)
        if r1 <= split:
            x = 1.0 + two_a * r2
            if r3 <= 4.0 * (1.0 / x - 1.0 / (x * x)):
                break
        else:
            x = (1.0 + two_a) / (1.0 + two_a * r2)
            c = 1.0 - (x - 1.0) / alpha
            if r3 <= 0.5 * (c * c + 1.0 / x):
                break
    cos_t = 1.0 - (x - 1.0) / alpha
    if cos_t < -1.0:
        cos_t = -1.0
    elif cos_t > 1.0:
        cos_t = 1.0
    return cos_t, x


@nb.njit(cache=True, nogil=True)
def sample_compton_k(pk, m, energy, state):
    """Kahn KN sample thinned by S(q)/S(q_max); returns (cos_theta, E_out)."""
    alpha = energy / MEC2_KEV
    s_max = s_k(pk, m, energy / HC_KEV_ANGSTROM)
    while True:
        cos_t, _ = kahn_kn_k(alpha, state)
        s = s_k(pk, m, momentum_transfer(energy, cos_t))
        if _rng.uniform(state) * s_max <= s:
            break
    # exact Compton relation, independent of the rejection variable
    return cos_t, energy / (1.0 + alpha * (1.0 - cos_t))


@nb.njit(cache=True, nogil=True)
def _g_seg(a, b, q):
    return a * a * q * q + (4.0 / 3.0) * a * b * q * q * q + 0.5 * b * b * q * q * q * q


@nb.njit(cache=True, nogil=True)
def invert_f2_k(pk, m, target):
    """q such that int_0^q F^2 d(q^2) == target (F piecewise linear)."""
    n = pk.f_n[m]
    xs = pk.f_x[m]
    ys = pk.f_y[m]
    cum = pk.ray_cum[m]
    if target >= cum[n - 1]:
        fl = ys[n - 1]
        return math.sqrt(xs[n - 1] ** 2 + (target - cum[n - 1]) / (fl * fl))
    i = np.searchsorted(cum[:n], target, side="right") - 1
    if i < 0:
        i = 0
    q0 = xs[i]
    q1 = xs[i + 1]
    b = (ys[i + 1] - ys[i]) / (q1 - q0)
    a = ys[i] - b * q0
    goal = target - cum[i] + _g_seg(a, b, q0)
    lo = q0
    hi = q1
    q = 0.5 * (lo + hi)
    for _ in range(100):
        g = _g_seg(a, b, q) - goal
        if g > 0.0:
            hi = q
        else:
            lo = q
        d = 2.0 * q * (a + b * q) ** 2
        qn = q - g / d if d > 0.0 else 0.5 * (lo + hi)
        if not (lo < qn < hi):
            qn = 0.5 * (lo + hi)
        if abs(qn - q) <= 1e-15 * q1:
            q = qn
            break
        q = qn
    return q


@nb.njit(cache=True, nogil=True)
def sample_rayleigh_k(pk, m, energy, state):
    """Invert the F(q)^2 distribution in q^2, then accept with (1+cos^2)/2."""
    qmax = energy / HC_KEV_ANGSTROM
    n = pk.f_n[m]
    if qmax <= pk.f_x[m, n - 1]:
        gmax = 0.0
        # cumulative at qmax inside the table
        i = np.searchsorted(pk.f_x[m, :n], qmax, side="right") - 1
        q0 = pk.f_x[m, i]
        if i >= n - 1:
            gmax = pk.ray_cum[m, n - 1]
        else:
            b = (pk.f_y[m, i + 1] - pk.f_y[m, i]) / (pk.f_x[m, i + 1] - q0)
            a = pk.f_y[m, i] - b * q0
            gmax = pk.ray_cum[m, i] + _g_seg(a, b, qmax) - _g_seg(a, b, q0)
    else:
        fl = pk.f_y[m, n - 1]
        gmax = pk.ray_cum[m, n - 1] + fl * fl * (qmax * qmax - pk.f_x[m, n - 1] ** 2)
    while True:
        q = invert_f2_k(pk, m, _rng.uniform(state) * gmax)
        cos_t = 1.0 - 2.0 * (q / qmax) ** 2
        if cos_t < -1.0:
            cos_t = -1.0
        if 2.0 * _rng.uniform(state) <= 1.0 + cos_t * cos_t:
            return cos_t


@nb.njit(cache=True, nogil=True)
def sample_compton_batch_k(pk, m, energy, n, state):
    cos_out = np.empty(n)
    e_out = np.empty(n)
    for i in range(n):
        cos_out[i], e_out[i] = sample_compton_k(pk, m, energy, state)
    return cos_out, e_out


@nb.njit(cache=True, nogil=True)
def sample_rayleigh_batch_k(pk, m, energy, n, state):
    out = np.empty(n)
    for i in range(n):
        out[i] = sample_rayleigh_k(pk, m, energy, state)
    return out


@nb.njit(cache=True, nogil=True)
def select_batch_k(pk, m, energy, n, state):
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = select_interaction_k(pk, m, energy, _rng.uniform(state))
    return out


@nb.njit(cache=True, nogil=True)
def rotate_direction(u, v, w, cos_t, phi):
    """Rotate unit vector (u, v, w) by polar angle acos(cos_t) and azimuth phi."""
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    cp = math.cos(phi)
    sp = math.sin(phi)
    if abs(w) > 0.99999:
        sgn = 1.0 if w > 0 else -1.0
        return sin_t * cp, sin_t * sp, sgn * cos_t
    tmp = math.sqrt(1.0 - w * w)
    nu = sin_t * (u * w * cp - v * sp) / tmp + u * cos_t
    nv = sin_t * (v * w * cp + u * sp) / tmp + v * cos_t
    nw = -sin_t * cp * tmp + w * cos_t
    norm = math.sqrt(nu * nu + nv * nv + nw * nw)
    return nu / norm, nv / norm, nw / norm


# ---------------------------------------------------------------------------
# Python API


@lru_cache(maxsize=64)
def packed(mat):
    """Single-material pack (material id 1); cached per Material instance."""
    return pack_materials({1: mat})


def _check_theta(theta):
    if not 0.0 <= theta <= math.pi:
        raise DomainError("scatter angle must lie in [0, pi]")


def d_sigma_compton(mat, energy, theta):
    """Bound-electron Compton cross section dsigma/dOmega [cm^2/sr]."""
    _check_energy(mat, energy)
    _check_theta(theta)
    return dsigma_compton_k(packed(mat), 1, float(energy), math.cos(theta))


def d_sigma_rayleigh(mat, energy, theta):
    """Coherent cross section dsigma/dOmega [cm^2/sr]."""
    _check_energy(mat, energy)
    _check_theta(theta)
    return dsigma_rayleigh_k(packed(mat), 1, float(energy), math.cos(theta))


def _p_lambda(kernel, mat, energy, theta, kind):
    _check_energy(mat, energy)
    _check_theta(theta)
    val = kernel(packed(mat), 1, float(energy), math.cos(theta))
    if val < 0:
        raise SimulationError(f"{mat.name}: integrated {kind} cross section is zero at {energy} keV")
    return val


def p_lambda_compton(mat, energy, theta):
    """Directional scatter probability density for Compton (2*pi/sigma_incoh * dsigma/dOmega)."""
    return _p_lambda(p_lambda_compton_k, mat, energy, theta, "incoherent")


def p_lambda_rayleigh(mat, energy, theta):
    return _p_lambda(p_lambda_rayleigh_k, mat, energy, theta, "coherent")


def sample_compton(mat, energy, rng):
    """Draw one Compton event from ``rng`` (a :class:`~ctscatter.rng.CounterRNG`)."""
    _check_energy(mat, energy)
    cos_t, e_out = sample_compton_k(packed(mat), 1, float(energy), rng.state)
    phi = 2.0 * math.pi * rng.random()
    return ComptonSample(theta=math.acos(cos_t), alpha_prime=e_out / MEC2_KEV, phi=phi)


def sample_rayleigh(mat, energy, rng):
    """Returns (theta, phi); energy is unchanged by coherent scattering."""
    _check_energy(mat, energy)
    cos_t = sample_rayleigh_k(packed(mat), 1, float(energy), rng.state)
    return math.acos(cos_t), 2.0 * math.pi * rng.random()


def sample_compton_cos(mat, energy, n, rng):
    """Vectorised draw: arrays (cos_theta, outgoing energy keV) of length ``n``."""
    _check_energy(mat, energy)
    return sample_compton_batch_k(packed(mat), 1, float(energy), int(n), rng.state)


def sample_rayleigh_cos(mat, energy, n, rng):
    _check_energy(mat, energy)
    return sample_rayleigh_batch_k(packed(mat), 1, float(energy), int(n), rng.state)


def select_interaction(mat, energy, rng, n=None):
    """Interaction type name (or an int array of ``n`` type codes)."""
    _check_energy(mat, energy)
    pk = packed(mat)
    if n is None:
        code = select_interaction_k(pk, 1, float(energy), rng.random())
        if code < 0:
            raise SimulationError(f"{mat.name}: all cross sections vanish at {energy} keV")
        return INTERACTION_NAMES[code]
    codes = select_batch_k(pk, 1, float(energy), int(n), rng.state)
    if codes.size and codes[0] < 0:
        raise SimulationError(f"{mat.name}: all cross sections vanish at {energy} keV")
    return codes
