"""Scatter-image post-processing: Savitzky-Golay smoothing, linear
interpolation between projection angles and Catmull-Rom up-sampling.

All three are linear operators. The 2-D ones are applied separably as
``A_v @ img @ A_u.T`` with small per-axis matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ValidationError
from .transport import DetectorImage, ProjectionStack

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SgFilterSpec:
    window: int | tuple = 15  # odd, per axis (u, v) or one value for both
    polyorder: int = 3

    def __post_init__(self):
        w = tuple(int(x) for x in np.broadcast_to(self.window, 2))
        object.__setattr__(self, "window", w)
        for x in w:
            if x < 5 or x % 2 == 0:
                raise ValidationError("SG window must be an odd integer >= 5")
            if not 0 <= self.polyorder < x:
                raise ValidationError("SG polyorder must satisfy 0 <= polyorder < window")

    @classmethod
    def scaled(cls, dims, polyorder=3, reference=(576, 800), reference_window=15):
        """Window scaled from 15 px at a 576 x 800 detector, at least 5."""
        out = []
        for n, ref in zip(dims, reference):
            w = int(round(reference_window * n / ref))
            w = max(5, w | 1)
            out.append(min(w, n if n % 2 else n - 1))
        return cls(tuple(out), polyorder)


@lru_cache(maxsize=64)
def sg_coefficients(window, polyorder, pos=None):
    """Weights that evaluate the least-squares polynomial of a window at
    offset ``pos`` (in samples from the window centre; default 0)."""
    h = window // 2
    x = np.arange(-h, h + 1, dtype=float)
    vander = x[:, None] ** np.arange(polyorder + 1)
    t = 0.0 if pos is None else float(pos)
    return (t ** np.arange(polyorder + 1)) @ np.linalg.pinv(vander)


@lru_cache(maxsize=64)
def sg_matrix(n, window, polyorder):
    """n x n smoothing matrix. Near the borders the window is shifted so it
    ends at the border (one-sided) and the fit is evaluated off-centre."""
    if n < window:
        raise ValidationError(f"image dimension {n} is smaller than the SG window {window}")
    h = window // 2
    m = np.zeros((n, n))
    for i in range(n):
        lo = min(max(i - h, 0), n - window)
        m[i, lo:lo + window] = sg_coefficients(window, polyorder, i - lo - h)
    m.setflags(write=False)
    return m


def sg_smooth(img, f=None):
    """Separable 2-D Savitzky-Golay smoothing of a DetectorImage or array."""
    arr = img.values if isinstance(img, DetectorImage) else np.asarray(img, dtype=float)
    f = f or SgFilterSpec.scaled(arr.shape[::-1])
    nv, nu = arr.shape
    out = sg_matrix(nv, f.window[1], f.polyorder) @ arr @ sg_matrix(nu, f.window[0], f.polyorder).T
    return DetectorImage(out) if isinstance(img, DetectorImage) else out


def sg_smooth_stack(stack, f=None):
    vals = np.stack([sg_smooth(v, f) for v in stack.values])
    return ProjectionStack(vals, stack.angles)


def interpolate_angles(stack, target_angles, period=TWO_PI, atol=1e-9):
    """Per-pixel linear interpolation from ``stack.angles`` to ``target_angles``.

    With ``period`` set, angles wrap around (a target after the last present
    angle is bracketed by the last and first). With ``period=None`` a target
    outside the present range is an error.
    """
    src = stack.angles
    tgt = np.asarray(target_angles, dtype=float).ravel()
    if np.any(np.diff(src) <= 0):
        raise ValidationError("present angles must be strictly increasing")
    out = np.empty((len(tgt),) + stack.values.shape[1:])
    for k, a in enumerate(tgt):
        d = src - a
        if period is not None:
            d = (d + 0.5 * period) % period - 0.5 * period
        hit = np.flatnonzero(np.abs(d) <= atol)
        if hit.size:
            out[k] = stack.values[hit[0]]
            continue
        lo, hi = _bracket(src, a, period)
        if lo is None:
            raise ValidationError(f"angle {a:.6g} rad is not bracketed by two present angles")
        a0, a1 = src[lo], src[hi]
        span = (a1 - a0) % period if period is not None else a1 - a0
        off = (a - a0) % period if period is not None else a - a0
        t = off / span
        out[k] = (1.0 - t) * stack.values[lo] + t * stack.values[hi]
    return ProjectionStack(out, tgt)


def _bracket(src, a, period):
    n = len(src)
    if period is None:
        i = np.searchsorted(src, a)
        if i == 0 or i == n:
            return None, None
        return i - 1, i
    if n < 2:
        return None, None
    aw = a % period
    sw = src % period
    order = np.argsort(sw, kind="stable")
    sw = sw[order]
    i = np.searchsorted(sw, aw)
    lo, hi = order[(i - 1) % n], order[i % n]
    gap = (src[hi] - src[lo]) % period
    if gap == 0 or gap > 0.5 * period + 1e-12 and n > 2:
        # a gap wider than half a turn is not a bracket but an uncovered arc
        return None, None
    return lo, hi


def _catmull_rom_weights(t):
    t2, t3 = t * t, t * t * t
    return np.stack([
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ], axis=-1)


@lru_cache(maxsize=64)
def cubic_matrix(n_in, n_out):
    """n_out x n_in Catmull-Rom resampling matrix for pixel grids covering
    the same length; the border is extended linearly so that linear ramps
    are reproduced exactly."""
    if n_in < 2 or n_out < 1:
        raise ValidationError("cubic resampling needs at least 2 source pixels")
    x = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    i0 = np.floor(x).astype(int)
    i0 = np.clip(i0, 0, n_in - 2)
    w = _catmull_rom_weights(x - i0)
    m = np.zeros((n_out, n_in))
    for k in range(n_out):
        for j in range(4):
            idx = i0[k] - 1 + j
            # linear extrapolation of ghost samples: f[-1] = 2f[0]-f[1], f[n] = 2f[n-1]-f[n-2]
            if idx < 0:
                m[k, 0] += 2 * w[k, j]
                m[k, 1] -= w[k, j]
            elif idx >= n_in:
                m[k, n_in - 1] += 2 * w[k, j]
                m[k, n_in - 2] -= w[k, j]
            else:
                m[k, idx] += w[k, j]
    m.setflags(write=False)
    return m


def upsample_image(img, target_dims):
    """Catmull-Rom resampling to ``target_dims = (nu, nv)`` over the same area."""
    arr = img.values if isinstance(img, DetectorImage) else np.asarray(img, dtype=float)
    nv, nu = arr.shape
    tu, tv = (int(x) for x in target_dims)
    if tu < nu or tv < nv:
        raise ValidationError("target dims must be >= source dims")
    if nu < 2 or nv < 2:
        raise ValidationError("degenerate source image")
    out = cubic_matrix(nv, tv) @ arr @ cubic_matrix(nu, tu).T
    return DetectorImage(out) if isinstance(img, DetectorImage) else out


def upsample_stack(stack, target_dims):
    return ProjectionStack(np.stack([upsample_image(v, target_dims) for v in stack.values]), stack.angles)


def downsample_image(arr, factor):
    """Block mean; the adjoint-style companion used for round-trip checks."""
    arr = np.asarray(arr, dtype=float)
    nv, nu = arr.shape
    if nv % factor or nu % factor:
        raise ValidationError("dims must be divisible by the factor")
    return arr.reshape(nv // factor, factor, nu // factor, factor).mean(axis=(1, 3))
