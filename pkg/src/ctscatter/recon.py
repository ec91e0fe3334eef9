"""FDK reconstruction, multi-level Otsu segmentation and conversion of a
segmented volume back into a voxel phantom.

Volumes hold linear attenuation coefficients in 1/cm (the unit of the
material tables and of the line integrals ``a = ln(I0/I)`` with lengths in cm).
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np

from .errors import ValidationError
from .geometry import VoxelPhantom
from .transport import DetectorImage, ProjectionStack

log = logging.getLogger(__name__)

VOLUME_MAGIC = b"XVOL1"


@dataclass(eq=False)
class Volume:
    """Reconstructed volume, ``values[ix, iy, iz]`` in 1/cm, centred on the isocentre."""

    values: np.ndarray
    voxel_size: tuple

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        self.voxel_size = tuple(float(s) for s in np.broadcast_to(self.voxel_size, 3))
        if self.values.ndim != 3:
            raise ValidationError("volume must be 3-D")
        if min(self.voxel_size) <= 0:
            raise ValidationError("voxel size must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("volume has non-finite values")

    @property
    def dims(self):
        return tuple(self.values.shape)

    @property
    def origin(self):
        return tuple(-0.5 * n * s for n, s in zip(self.dims, self.voxel_size))

    def central_slice(self, axis=2):
        return np.take(self.values, self.dims[axis] // 2, axis=axis)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(VOLUME_MAGIC)
            fh.write(struct.pack("<3I", *self.dims))
            fh.write(struct.pack("<3d", *self.voxel_size))
            fh.write(np.asarray(self.values, dtype="<f4").tobytes(order="F"))

    @classmethod
    def load(cls, path):
        hdr = read_volume_header(path)
        dims = hdr["dims"]
        raw = Path(path).read_bytes()[hdr["offset"]:]
        if len(raw) != 4 * int(np.prod(dims)):
            raise ValidationError(f"{path}: truncated volume data")
        vals = np.frombuffer(raw, dtype="<f4").reshape(dims, order="F")
        return cls(vals.copy(), hdr["voxel_size"])


def read_volume_header(path):
    with open(path, "rb") as fh:
        if fh.read(5) != VOLUME_MAGIC:
            raise ValidationError(f"{path}: not an XVOL1 volume file")
        dims = struct.unpack("<3I", fh.read(12))
        vs = struct.unpack("<3d", fh.read(24))
    return {"dims": dims, "voxel_size": vs, "offset": 41}


def export_slice(arr, path, fmt=None):
    """Write a 2-D array as CSV (full precision) or 16-bit binary PGM (min-max scaled)."""
    arr = np.asarray(arr, dtype=float)
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt == "csv":
        np.savetxt(path, arr, delimiter=",", fmt="%.9g")
    elif fmt == "pgm":
        lo, hi = float(arr.min()), float(arr.max())
        scale = 65535.0 / (hi - lo) if hi > lo else 0.0
        data = np.round((arr - lo) * scale).astype(">u2")
        with open(path, "wb") as fh:
            fh.write(f"P5\n# min={lo:.9g} max={hi:.9g}\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode())
            fh.write(data.tobytes())
    else:
        raise ValidationError(f"unknown slice format {fmt!r} (csv or pgm)")


# ---------------------------------------------------------------------------
# intensities and line integrals


def intensity_to_attenuation(stack, flatfield):
    """a = ln(flatfield / I) per pixel."""
    flat = flatfield.values if isinstance(flatfield, DetectorImage) else np.asarray(flatfield, float)
    if np.any(~(flat > 0)):
        raise ValidationError(f"flat field has {int(np.sum(~(flat > 0)))} non-positive pixels")
    vals = stack.values
    bad = int(np.sum(~(vals > 0)))
    if bad:
        raise ValidationError(f"{bad} non-positive intensity pixels (underexposed projections)")
    return ProjectionStack(np.log(flat[None] / vals), stack.angles)


# ---------------------------------------------------------------------------
# FDK


def ramp_filter(n, tau, window="hann"):
    """Frequency response of the band-limited ramp for ``n`` samples at spacing
    ``tau``, zero-padded to a power of two >= 2n. Built from the exact
    spatial-domain kernel so the DC term is right."""
    size = 1 << int(math.ceil(math.log2(2 * n)))
    k = np.arange(size)
    k = np.where(k > size // 2, k - size, k)
    h = np.zeros(size)
    h[0] = 1.0 / (4.0 * tau * tau)
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * np.pi * tau * tau * k[odd] ** 2)
    resp = np.real(np.fft.fft(h)) * tau
    if window == "hann":
        f = np.abs(np.fft.fftfreq(size))  # cycles/sample, Nyquist = 0.5
        resp *= 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    elif window not in (None, "none", "ramp"):
        raise ValidationError(f"unknown filter window {window!r}")
    return resp, size


def _coverage(angles):
    """(arc covered, per-view angular weights, is_full_scan)."""
    a = np.asarray(angles, dtype=float)
    n = len(a)
    if n < 2:
        raise ValidationError("at least 2 projection angles are required")
    if np.any(np.diff(a) <= 0):
        raise ValidationError("angles must be strictly increasing")
    steps = np.diff(a)
    arc = a[-1] - a[0] + float(np.median(steps))
    full = arc >= 2.0 * math.pi * (1.0 - 1e-6)
    if full:
        gaps = np.diff(np.concatenate([a, [a[0] + 2.0 * math.pi]]))
        dbeta = 0.5 * (gaps + np.roll(gaps, 1))
    else:
        mid = np.concatenate([[a[0]], 0.5 * (a[1:] + a[:-1]), [a[-1]]])
        dbeta = np.diff(mid)
        dbeta[0] += 0.5 * steps[0]
        dbeta[-1] += 0.5 * steps[-1]
    return arc, dbeta, full


def parker_weights(beta, gamma, delta):
    """Short-scan redundancy weights; ``beta`` from the first view, ``gamma``
    the signed fan angle of each column (conjugate ray at beta + pi + 2 gamma)."""
    w = np.ones(np.broadcast(beta, gamma).shape)
    b = np.broadcast_to(beta, w.shape)
    g = np.broadcast_to(gamma, w.shape)
    r1 = b < 2 * (delta - g)
    w[r1] = np.sin(0.25 * np.pi * b[r1] / (delta - g[r1])) ** 2
    r3 = b > np.pi - 2 * g
    w[r3] = np.sin(0.25 * np.pi * (np.pi + 2 * delta - b[r3]) / (delta + g[r3])) ** 2
    w[b > np.pi + 2 * delta] = 0.0
    return w


@nb.njit(cache=True, nogil=True)
def _backproject(q, cos_b, sin_b, sod, du, dv, u0, v0, xs, ys, zs, ix0, ix1, out):
    """Accumulate distance-weighted backprojection of filtered views ``q``
    (n_views, nv, nu) given on the isocentre plane with spacing (du, dv),
    for the x-slab ``ix0 <= ix < ix1``."""
    n_views, nv, nu = q.shape
    ny, nz = out.shape[1], out.shape[2]
    for ix in range(ix0, ix1):
        x = xs[ix]
        for iy in range(ny):
            y = ys[iy]
            for k in range(n_views):
                s = x * cos_b[k] + y * sin_b[k]
                t = -x * sin_b[k] + y * cos_b[k]
                U = sod - s
                mag = sod / U
                fu = (t * mag - u0) / du
                if fu < 0.0 or fu > nu - 1:
                    continue
                iu = min(int(fu), nu - 2)
                au = fu - iu
                wk = mag * mag
                for iz in range(nz):
                    fv = (zs[iz] * mag - v0) / dv
                    if fv < 0.0 or fv > nv - 1:
                        continue
                    iv = min(int(fv), nv - 2)
                    av = fv - iv
                    val = ((1 - av) * ((1 - au) * q[k, iv, iu] + au * q[k, iv, iu + 1])
                           + av * ((1 - au) * q[k, iv + 1, iu] + au * q[k, iv + 1, iu + 1]))
                    out[ix, iy, iz] += wk * val


def fbp_reconstruct(stack, g, dims, voxel_size=None, window="hann", workers=1):
    """FDK reconstruction of line integrals on the circular trajectory of ``g``.

    ``dims`` = (nx, ny, nz). The default voxel size is the detector pitch
    projected to the isocentre. Full scans use weight 1/2 per view; shorter
    scans covering at least pi plus the fan angle use Parker weights.
    """
    vals = np.asarray(stack.values, dtype=float)
    if vals.shape[1:] != (g.nv, g.nu):
        raise ValidationError("projection dims do not match the scan geometry")
    angles = stack.angles
    arc, dbeta, full = _coverage(angles)
    mag0 = g.sod / g.sdd
    du, dv = g.pixel_pitch[0] * mag0, g.pixel_pitch[1] * mag0
    u = (np.arange(g.nu) - 0.5 * (g.nu - 1)) * du
    v = (np.arange(g.nv) - 0.5 * (g.nv - 1)) * dv
    delta = math.atan((0.5 * g.nu * du) / g.sod)
    if not full and arc < math.pi + 2 * delta - 1e-9:
        raise ValidationError(
            f"insufficient angular coverage: {math.degrees(arc):.1f} deg < 180 deg + fan {math.degrees(2 * delta):.1f} deg"
        )
    D = g.sod
    cosw = D / np.sqrt(D * D + u[None, :] ** 2 + v[:, None] ** 2)
    resp, size = ramp_filter(g.nu, du, window)
    pre = vals * cosw[None]
    padded = np.zeros(pre.shape[:2] + (size,))
    padded[..., : g.nu] = pre
    q = np.real(np.fft.ifft(np.fft.fft(padded, axis=-1) * resp, axis=-1))[..., : g.nu]
    if full:
        view_w = 0.5 * dbeta
        q = q * view_w[:, None, None]
    else:
        gamma = -np.arctan(u / D)
        pw = parker_weights((angles - angles[0])[:, None], gamma[None, :], delta)
        q = q * (pw * dbeta[:, None])[:, None, :]
    nx, ny, nz = (int(n) for n in dims)
    vs = np.broadcast_to(np.asarray(voxel_size if voxel_size is not None else du, dtype=float), 3)
    xs = (np.arange(nx) - 0.5 * (nx - 1)) * vs[0]
    ys = (np.arange(ny) - 0.5 * (ny - 1)) * vs[1]
    zs = (np.arange(nz) - 0.5 * (nz - 1)) * vs[2]
    out = np.zeros((nx, ny, nz))
    q = np.ascontiguousarray(q)
    cb, sb = np.cos(angles), np.sin(angles)

    def slab(bounds):
        _backproject(q, cb, sb, D, du, dv, u[0], v[0], xs, ys, zs, bounds[0], bounds[1], out)

    # disjoint x-slabs; each voxel sums its views in the same order for any worker count
    cuts = np.linspace(0, nx, max(1, min(workers, nx)) + 1).astype(int)
    slabs = list(zip(cuts[:-1], cuts[1:]))
    if len(slabs) == 1:
        slab(slabs[0])
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(slab, slabs))
    return Volume(out, tuple(vs))


# ---------------------------------------------------------------------------
# Otsu


@nb.njit(cache=True, nogil=True)
def _otsu_search(hist, n_classes):
    """Exhaustive search for thresholds t1 < ... < t_{k-1} (bin indices; class j
    holds bins [t_j, t_{j+1})) maximising sum_j S_j^2 / W_j with bin index as
    the value. Ties keep the lexicographically first tuple."""
    nb_ = hist.shape[0]
    w = np.zeros(nb_ + 1)
    s = np.zeros(nb_ + 1)
    for i in range(nb_):
        w[i + 1] = w[i] + hist[i]
        s[i + 1] = s[i] + hist[i] * i
    best = -1.0
    bt = np.zeros(3, dtype=np.int64)

    def term(a, b):
        ww = w[b] - w[a]
        if ww <= 0.0:
            return 0.0
        ss = s[b] - s[a]
        return ss * ss / ww

    if n_classes == 2:
        for t1 in range(1, nb_):
            v = term(0, t1) + term(t1, nb_)
            if v > best:
                best = v
                bt[0] = t1
    elif n_classes == 3:
        for t1 in range(1, nb_ - 1):
            a = term(0, t1)
            for t2 in range(t1 + 1, nb_):
                v = a + term(t1, t2) + term(t2, nb_)
                if v > best:
                    best = v
                    bt[0] = t1
                    bt[1] = t2
    else:
        for t1 in range(1, nb_ - 2):
            a = term(0, t1)
            for t2 in range(t1 + 1, nb_ - 1):
                b = a + term(t1, t2)
                for t3 in range(t2 + 1, nb_):
                    v = b + term(t2, t3) + term(t3, nb_)
                    if v > best:
                        best = v
                        bt[0] = t1
                        bt[1] = t2
                        bt[2] = t3
    return bt[: n_classes - 1].copy()


def interior(values, margin=0.05):
    """Central sub-array excluding ``margin`` of each dimension at both ends."""
    sl = tuple(slice(int(math.floor(margin * n)), n - int(math.floor(margin * n))) for n in values.shape)
    return values[sl]


def otsu_histogram(values, bins=1024, value_range=None):
    v = np.asarray(values, dtype=float).ravel()
    lo, hi = value_range if value_range is not None else (float(v.min()), float(v.max()))
    if not hi > lo:
        raise ValidationError("degenerate histogram: all values are equal")
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return hist.astype(np.float64), edges


def otsu_thresholds(vol, n_classes=2, bins=1024, margin=0.05):
    """Multi-level Otsu thresholds (attenuation values, increasing).

    The histogram is taken over the interior of a Volume (``margin`` of each
    dimension trimmed) or over a plain array as given.
    """
    if not 2 <= n_classes <= 4:
        raise ValidationError("n_classes must be 2, 3 or 4")
    vals = interior(vol.values, margin) if isinstance(vol, Volume) else np.asarray(vol)
    hist, edges = otsu_histogram(vals, bins)
    if np.count_nonzero(hist) < n_classes:
        raise ValidationError("degenerate histogram: fewer occupied bins than classes")
    idx = _otsu_search(hist, n_classes)
    return [float(edges[i]) for i in idx]


@dataclass
class SegmentationResult:
    thresholds: list
    labels: np.ndarray
    class_map: dict = field(default_factory=dict)  # class id -> (Material or None, density g/cm3)

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=float)
        if np.any(np.diff(t) <= 0):
            raise ValidationError("thresholds must be strictly increasing")


def segment(vol, n_classes, class_map=None, bins=1024, margin=0.05, thresholds=None):
    """Label every voxel by the Otsu thresholds (value >= t goes to the upper class)."""
    t = thresholds if thresholds is not None else otsu_thresholds(vol, n_classes, bins, margin)
    labels = np.digitize(vol.values, t).astype(np.uint8)
    return SegmentationResult(list(t), labels, dict(class_map or {}))


def mode_pool(labels, factor):
    """Block mode of integer labels; ties go to the smallest label."""
    f = tuple(int(x) for x in np.broadcast_to(factor, 3))
    nx, ny, nz = labels.shape
    if nx % f[0] or ny % f[1] or nz % f[2]:
        raise ValidationError("volume dims must be divisible by the pooling factor")
    blocks = labels.reshape(nx // f[0], f[0], ny // f[1], f[1], nz // f[2], f[2])
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(nx // f[0], ny // f[1], nz // f[2], -1)
    n_lab = int(labels.max()) + 1
    counts = np.stack([(blocks == k).sum(axis=-1) for k in range(n_lab)], axis=-1)
    return np.argmax(counts, axis=-1).astype(labels.dtype)


def mean_pool(values, factor):
    f = tuple(int(x) for x in np.broadcast_to(factor, 3))
    nx, ny, nz = values.shape
    return values.reshape(nx // f[0], f[0], ny // f[1], f[1], nz // f[2], f[2]).mean(axis=(1, 3, 5))


def to_density_phantom(vol, seg, target_dims=None, density_mode="class"):
    """Voxel phantom from a segmented volume.

    Labels are mode-pooled to ``target_dims``. With ``density_mode="class"``
    each voxel gets its class density; with ``"scaled"`` the class density is
    multiplied by the block-mean attenuation over the class mean attenuation.
    """
    target = vol.dims if target_dims is None else tuple(int(n) for n in target_dims)
    if any(n % t for n, t in zip(vol.dims, target)):
        raise ValidationError(f"volume dims {vol.dims} are not a multiple of target dims {target}")
    factor = tuple(n // t for n, t in zip(vol.dims, target))
    labels = mode_pool(seg.labels, factor)
    missing = sorted(set(int(x) for x in np.unique(labels)) - set(seg.class_map))
    if missing:
        raise ValidationError(f"segmentation classes {missing} have no class_map entry")
    mat_ids = np.zeros(target, np.uint8)
    density = np.zeros(target, np.float32)
    table, names, ids = {}, {}, {}
    if density_mode == "scaled":
        pooled = mean_pool(vol.values.astype(float), factor)
    elif density_mode != "class":
        raise ValidationError("density_mode must be 'class' or 'scaled'")
    for cls_id, (mat, rho) in sorted(seg.class_map.items()):
        sel = labels == cls_id
        if mat is None or rho == 0:
            continue
        if id(mat) not in ids:
            ids[id(mat)] = len(ids) + 1
            table[ids[id(mat)]] = mat
            names[ids[id(mat)]] = mat.name
        mat_ids[sel] = ids[id(mat)]
        if density_mode == "scaled":
            ref = float(vol.values[seg.labels == cls_id].mean())
            density[sel] = rho * np.clip(pooled[sel] / ref, 0.0, None) if ref > 0 else rho
        else:
            density[sel] = rho
    density[mat_ids == 0] = 0.0
    vs = tuple(s * f for s, f in zip(vol.voxel_size, factor))
    return VoxelPhantom.centered(mat_ids, density, vs, table, names)
