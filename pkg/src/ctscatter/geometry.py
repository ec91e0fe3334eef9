"""Voxel phantoms, circular cone-beam geometry and ray tracing.

World frame (cm): the rotation axis is z. At gantry angle ``beta`` the unit
vector from the isocentre to the source is ``e_s = (cos b, sin b, 0)``; the
detector u axis is ``e_u = (-sin b, cos b, 0)`` and the v axis is +z. The
phantom stays fixed and source/detector rotate.

Detector images are stored row-major with shape ``(nv, nu)``; pixel
``(iu, iv)`` has its centre at continuous coordinate ``(iu, iv)``.

Voxel ``(i, j, k)`` spans the half-open box
``[origin + i*size, origin + (i+1)*size)`` per axis.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np

from .errors import DomainError, ValidationError
from .physics_data import _check_energy, pack_materials
from .sampling import mass_mu_k

PHANTOM_MAGIC = b"XVOX1"


# ---------------------------------------------------------------------------
# domain types


@dataclass(eq=False)
class VoxelPhantom:
    """Material-id and density grid placed in the world frame.

    ``material_id`` and ``density`` are indexed ``[ix, iy, iz]``.
    ``material_table`` maps ids >= 1 to :class:`Material`; id 0 is vacuum.
    """

    material_id: np.ndarray
    density: np.ndarray
    voxel_size: tuple
    origin: tuple
    material_table: dict = field(default_factory=dict)
    material_names: dict = field(default_factory=dict)

    def __post_init__(self):
        self.material_id = np.ascontiguousarray(self.material_id, dtype=np.uint8)
        self.density = np.ascontiguousarray(self.density, dtype=np.float32)
        self.voxel_size = tuple(float(s) for s in np.broadcast_to(self.voxel_size, 3))
        self.origin = tuple(float(o) for o in self.origin)
        self.validate()
        self._packed = None

    def validate(self):
        if self.material_id.ndim != 3 or min(self.material_id.shape) < 1:
            raise ValidationError("phantom must be a non-empty 3-D grid")
        if self.density.shape != self.material_id.shape:
            raise ValidationError("density and material_id grids differ in shape")
        if min(self.voxel_size) <= 0:
            raise ValidationError("voxel size must be positive")
        if len(self.origin) != 3:
            raise ValidationError("origin must have three coordinates")
        if not np.all(np.isfinite(self.density)) or np.any(self.density < 0):
            raise ValidationError("densities must be finite and >= 0")
        if 0 in self.material_table:
            raise ValidationError("material id 0 is reserved for vacuum")
        used = np.unique(self.material_id)
        missing = [int(i) for i in used if i != 0 and int(i) not in self.material_table]
        if missing:
            raise ValidationError(f"material ids {missing} have no table entry")
        if np.any(self.density[self.material_id == 0] != 0):
            raise ValidationError("vacuum voxels (id 0) must have density 0")

    @property
    def dims(self):
        return tuple(self.material_id.shape)

    @property
    def extent(self):
        return tuple(n * s for n, s in zip(self.dims, self.voxel_size))

    @property
    def packed(self):
        if self._packed is None:
            self._packed = pack_materials(self.material_table)
        return self._packed

    def grid_args(self):
        return (np.array(self.origin), np.array(self.voxel_size),
                np.array(self.dims, dtype=np.int64), self.material_id, self.density)

    def mass_mu_table(self, energy):
        """Mass attenuation per material id at ``energy``; checks table ranges."""
        out = np.zeros(len(self.packed.z_eff))
        for i, mat in self.material_table.items():
            _check_energy(mat, energy)
            out[i] = mass_mu_k(self.packed, i, float(energy))
        return out

    @classmethod
    def centered(cls, material_id, density, voxel_size, material_table, material_names=None):
        """Phantom whose grid centre sits on the isocentre."""
        dims = np.asarray(material_id).shape
        vs = np.broadcast_to(np.asarray(voxel_size, dtype=float), 3)
        origin = tuple(-0.5 * n * s for n, s in zip(dims, vs))
        return cls(material_id, density, tuple(vs), origin, dict(material_table), dict(material_names or {}))

    @classmethod
    def vacuum(cls, dims, voxel_size):
        return cls.centered(np.zeros(dims, np.uint8), np.zeros(dims, np.float32), voxel_size, {})


@dataclass(frozen=True)
class Ray:
    origin: tuple
    direction: tuple

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        if o.shape != (3,) or d.shape != (3,):
            raise DomainError("ray origin and direction must be 3-vectors")
        if not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
            raise DomainError("ray has non-finite components")
        n = np.linalg.norm(d)
        if n == 0:
            raise DomainError("ray direction is zero")
        object.__setattr__(self, "origin", tuple(o))
        object.__setattr__(self, "direction", tuple(d / n))

    def at(self, t):
        return np.asarray(self.origin) + t * np.asarray(self.direction)


@dataclass(frozen=True, eq=False)
class ScanGeometry:
    """Circular cone-beam scan with a flat detector (distances in cm)."""

    sdd: float
    sod: float
    det_pixels: tuple  # (nu, nv)
    pixel_pitch: object  # float or (pitch_u, pitch_v)
    angles: np.ndarray

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=np.float64).ravel()
        angles.setflags(write=False)
        object.__setattr__(self, "angles", angles)
        pitch = np.broadcast_to(np.asarray(self.pixel_pitch, dtype=float), 2)
        object.__setattr__(self, "pixel_pitch", (float(pitch[0]), float(pitch[1])))
        object.__setattr__(self, "det_pixels", tuple(int(n) for n in self.det_pixels))
        if not 0 < self.sod < self.sdd:
            raise ValidationError("geometry requires 0 < sod < sdd")
        if len(self.det_pixels) != 2 or min(self.det_pixels) < 1:
            raise ValidationError("detector needs positive (nu, nv) pixel counts")
        if min(self.pixel_pitch) <= 0:
            raise ValidationError("pixel pitch must be positive")
        if len(angles) < 1:
            raise ValidationError("at least one projection angle is required")
        if np.any(np.diff(angles) <= 0) or angles[0] < 0 or angles[-1] >= 2 * math.pi:
            raise ValidationError("angles must be strictly increasing within [0, 2*pi)")

    @property
    def n_angles(self):
        return len(self.angles)

    @property
    def nu(self):
        return self.det_pixels[0]

    @property
    def nv(self):
        return self.det_pixels[1]

    @property
    def detector_size(self):
        return self.nu * self.pixel_pitch[0], self.nv * self.pixel_pitch[1]

    def with_pixels(self, nu, nv):
        """Same detector area sampled on a different pixel grid."""
        w, h = self.detector_size
        return ScanGeometry(self.sdd, self.sod, (nu, nv), (w / nu, h / nv), self.angles)

    def with_angles(self, angles):
        return ScanGeometry(self.sdd, self.sod, self.det_pixels, self.pixel_pitch, angles)

    @classmethod
    def uniform(cls, sdd, sod, det_pixels, pixel_pitch, n_angles, arc=2 * math.pi):
        return cls(sdd, sod, det_pixels, pixel_pitch, np.arange(n_angles) * (arc / n_angles))

    def frame(self, angle_idx):
        """(source, detector centre, e_u, e_v, e_s) for one angle."""
        if not 0 <= angle_idx < self.n_angles:
            raise IndexError(f"angle index {angle_idx} out of range")
        b = self.angles[angle_idx]
        e_s = np.array([math.cos(b), math.sin(b), 0.0])
        e_u = np.array([-math.sin(b), math.cos(b), 0.0])
        e_v = np.array([0.0, 0.0, 1.0])
        return self.sod * e_s, -(self.sdd - self.sod) * e_s, e_u, e_v, e_s

    def pixel_center(self, angle_idx, u, v):
        _, c, e_u, e_v, _ = self.frame(angle_idx)
        pu, pv = self.pixel_pitch
        return c + (u - 0.5 * (self.nu - 1)) * pu * e_u + (v - 0.5 * (self.nv - 1)) * pv * e_v

    def pixel_centers(self, angle_idx):
        """Array (nv, nu, 3) of pixel centre positions."""
        _, c, e_u, e_v, _ = self.frame(angle_idx)
        pu, pv = self.pixel_pitch
        a = (np.arange(self.nu) - 0.5 * (self.nu - 1)) * pu
        b = (np.arange(self.nv) - 0.5 * (self.nv - 1)) * pv
        return c + a[None, :, None] * e_u + b[:, None, None] * e_v


def pixel_ray(g, angle_idx, u, v):
    """Ray from the source through detector coordinate (u, v)."""
    if not (-0.5 <= u <= g.nu - 0.5 and -0.5 <= v <= g.nv - 0.5):
        raise IndexError(f"pixel coordinate ({u}, {v}) off the detector")
    src = g.frame(angle_idx)[0]
    return Ray(tuple(src), tuple(g.pixel_center(angle_idx, u, v) - src))


def point_to_pixel(g, angle_idx, point):
    """Continuous detector coordinate (u, v) of a world point, or None if off-detector."""
    src, c, e_u, e_v, e_s = g.frame(angle_idx)
    d = np.asarray(point, dtype=float) - src
    along = d @ e_s
    if along >= 0:
        return None
    hit = src + d * (-g.sdd / along)
    pu, pv = g.pixel_pitch
    u = (hit - c) @ e_u / pu + 0.5 * (g.nu - 1)
    v = (hit - c) @ e_v / pv + 0.5 * (g.nv - 1)
    if not (-0.5 <= u <= g.nu - 0.5 and -0.5 <= v <= g.nv - 0.5):
        return None
    return float(u), float(v)


# ---------------------------------------------------------------------------
# compiled ray kernels


@nb.njit(cache=True, nogil=True)
def box_interval(ox, oy, oz, dx, dy, dz, g0, gs, gn):
    """Parametric [t_in, t_out] of the ray inside the grid box (t_in > t_out if missed)."""
    t_in = -np.inf
    t_out = np.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        lo = g0[a]
        hi = g0[a] + gn[a] * gs[a]
        if d[a] == 0.0:
            if o[a] < lo or o[a] >= hi:
                return 1.0, 0.0
        else:
            t1 = (lo - o[a]) / d[a]
            t2 = (hi - o[a]) / d[a]
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > t_in:
                t_in = t1
            if t2 < t_out:
                t_out = t2
    return t_in, t_out


@nb.njit(cache=True, nogil=True)
def _voxel_index(p, lo, size, n):
    i = int(math.floor((p - lo) / size))
    if i < 0:
        return 0
    if i >= n:
        return n - 1
    return i


@nb.njit(cache=True, nogil=True)
def walk_k(ox, oy, oz, dx, dy, dz, t_max, g0, gs, gn, mat, rho, mu_mass, target):
    """Exact voxel walk from t=0 to ``t_max``.

    Accumulates optical depth sum(mu_i * l_i). If ``target`` >= 0 the walk
    stops where the depth first reaches ``target``. Returns
    ``(depth, t_hit, material_id)``; ``t_hit`` is -1 when the target is not
    reached (photon escaped).
    """
    t_in, t_out = box_interval(ox, oy, oz, dx, dy, dz, g0, gs, gn)
    t0 = max(t_in, 0.0)
    t1 = min(t_out, t_max)
    if not t0 < t1:
        return 0.0, -1.0, 0
    d = (dx, dy, dz)
    o = (ox, oy, oz)
    # voxel holding the start of the segment (midpoint of a tiny step avoids face ties)
    tm = t0 + 1e-9 * (t1 - t0)
    ix = _voxel_index(ox + tm * dx, g0[0], gs[0], gn[0])
    iy = _voxel_index(oy + tm * dy, g0[1], gs[1], gn[1])
    iz = _voxel_index(oz + tm * dz, g0[2], gs[2], gn[2])
    idx = np.array([ix, iy, iz])
    step = np.zeros(3, dtype=np.int64)
    for a in range(3):
        step[a] = 1 if d[a] > 0.0 else (-1 if d[a] < 0.0 else 0)
    depth = 0.0
    t = t0
    while t < t1:
        # exit parameter of the current voxel along each axis, from the index (no drift)
        t_next = t1
        axis = -1
        for a in range(3):
            if step[a] != 0:
                face = g0[a] + (idx[a] + (1 if step[a] > 0 else 0)) * gs[a]
                ta = (face - o[a]) / d[a]
                if ta < t_next:
                    t_next = ta
                    axis = a
        if t_next < t:
            t_next = t
        m = mat[idx[0], idx[1], idx[2]]
        mu = mu_mass[m] * rho[idx[0], idx[1], idx[2]] if m != 0 else 0.0
        seg = mu * (t_next - t)
        if target >= 0.0 and depth + seg >= target and mu > 0.0:
            return target, t + (target - depth) / mu, m
        depth += seg
        t = t_next
        if axis < 0:
            break
        idx[axis] += step[axis]
        if idx[axis] < 0 or idx[axis] >= gn[axis]:
            break
    return depth, -1.0, 0


@nb.njit(cache=True, nogil=True)
def march_k(ox, oy, oz, dx, dy, dz, t_max, g0, gs, gn, mat, rho, mu_mass, step_len):
    """Fixed-step march with midpoint evaluation (the coarse scoring step)."""
    t_in, t_out = box_interval(ox, oy, oz, dx, dy, dz, g0, gs, gn)
    t0 = max(t_in, 0.0)
    t1 = min(t_out, t_max)
    if not t0 < t1:
        return 0.0
    n = int(math.ceil((t1 - t0) / step_len))
    depth = 0.0
    for s in range(n):
        a = t0 + s * step_len
        b = min(a + step_len, t1)
        tm = 0.5 * (a + b)
        px = ox + tm * dx
        py = oy + tm * dy
        pz = oz + tm * dz
        i = int(math.floor((px - g0[0]) / gs[0]))
        j = int(math.floor((py - g0[1]) / gs[1]))
        k = int(math.floor((pz - g0[2]) / gs[2]))
        if i < 0 or j < 0 or k < 0 or i >= gn[0] or j >= gn[1] or k >= gn[2]:
            continue
        m = mat[i, j, k]
        if m != 0:
            depth += mu_mass[m] * rho[i, j, k] * (b - a)
    return depth


@nb.njit(cache=True, nogil=True)
def optical_depth_k(ox, oy, oz, dx, dy, dz, t_max, g0, gs, gn, mat, rho, mu_mass, step_voxels):
    if step_voxels <= 1:
        return walk_k(ox, oy, oz, dx, dy, dz, t_max, g0, gs, gn, mat, rho, mu_mass, -1.0)[0]
    h = step_voxels * min(gs[0], min(gs[1], gs[2]))
    return march_k(ox, oy, oz, dx, dy, dz, t_max, g0, gs, gn, mat, rho, mu_mass, h)


@nb.njit(cache=True, nogil=True)
def material_paths_k(ox, oy, oz, dx, dy, dz, t_max, g0, gs, gn, mat, rho, out):
    """Exact per-material density-weighted path length sum(rho_i l_i) [g/cm^2]."""
    for m in range(out.shape[0]):
        out[m] = 0.0
    t_in, t_out = box_interval(ox, oy, oz, dx, dy, dz, g0, gs, gn)
    t0 = max(t_in, 0.0)
    t1 = min(t_out, t_max)
    if not t0 < t1:
        return
    d = (dx, dy, dz)
    o = (ox, oy, oz)
    tm = t0 + 1e-9 * (t1 - t0)
    idx = np.array([_voxel_index(ox + tm * dx, g0[0], gs[0], gn[0]),
                    _voxel_index(oy + tm * dy, g0[1], gs[1], gn[1]),
                    _voxel_index(oz + tm * dz, g0[2], gs[2], gn[2])])
    t = t0
    while t < t1:
        t_next = t1
        axis = -1
        for a in range(3):
            if d[a] != 0.0:
                face = g0[a] + (idx[a] + (1 if d[a] > 0.0 else 0)) * gs[a]
                ta = (face - o[a]) / d[a]
                if ta < t_next:
                    t_next = ta
                    axis = a
        if t_next < t:
            t_next = t
        m = mat[idx[0], idx[1], idx[2]]
        if m != 0:
            out[m] += rho[idx[0], idx[1], idx[2]] * (t_next - t)
        t = t_next
        if axis < 0:
            break
        idx[axis] += 1 if d[axis] > 0.0 else -1
        if idx[axis] < 0 or idx[axis] >= gn[axis]:
            break


# ---------------------------------------------------------------------------
# Python API


def _check_step(step_voxels):
    if int(step_voxels) != step_voxels or step_voxels < 1:
        raise DomainError("step_voxels must be a positive integer")


def trace_attenuation(ph, ray, energy, step_voxels=1, t_max=math.inf):
    """Optical depth along ``ray`` at ``energy`` keV.

    ``step_voxels=1`` is the exact voxel walk; larger values march in fixed
    steps of ``step_voxels * min(voxel_size)`` with midpoint evaluation.
    """
    _check_step(step_voxels)
    mu = ph.mass_mu_table(energy)
    g0, gs, gn, mat, rho = ph.grid_args()
    return optical_depth_k(*ray.origin, *ray.direction, float(t_max), g0, gs, gn, mat, rho, mu, int(step_voxels))


def sample_free_path(ph, ray, energy, u):
    """Interaction point for uniform variate ``u`` in (0, 1), or None if the photon escapes."""
    if not 0.0 < u < 1.0:
        raise DomainError("u must lie in the open interval (0, 1)")
    mu = ph.mass_mu_table(energy)
    g0, gs, gn, mat, rho = ph.grid_args()
    _, t_hit, _ = walk_k(*ray.origin, *ray.direction, math.inf, g0, gs, gn, mat, rho, mu, -math.log(u))
    if t_hit < 0:
        return None
    return ray.at(t_hit)


def material_paths(ph, ray, t_max=math.inf):
    out = np.zeros(len(ph.packed.z_eff))
    g0, gs, gn, mat, rho = ph.grid_args()
    material_paths_k(*ray.origin, *ray.direction, float(t_max), g0, gs, gn, mat, rho, out)
    return out


# ---------------------------------------------------------------------------
# phantom file
#
# magic "XVOX1" | u32 nx ny nz | f64 sx sy sz | f64 ox oy oz | u32 n_materials
# n_materials x (u8 id | u16 name length | utf-8 name)
# u8 material ids (nx*ny*nz, x fastest) | f32 densities (same order); little-endian


def save_phantom(ph, path):
    names = {i: ph.material_names.get(i) or ph.material_table[i].name for i in ph.material_table}
    with open(path, "wb") as fh:
        fh.write(PHANTOM_MAGIC)
        fh.write(struct.pack("<3I", *ph.dims))
        fh.write(struct.pack("<3d", *ph.voxel_size))
        fh.write(struct.pack("<3d", *ph.origin))
        fh.write(struct.pack("<I", len(names)))
        for i in sorted(names):
            raw = names[i].encode("utf-8")
            fh.write(struct.pack("<BH", i, len(raw)))
            fh.write(raw)
        fh.write(ph.material_id.ravel(order="F").astype("<u1").tobytes())
        fh.write(ph.density.ravel(order="F").astype("<f4").tobytes())


def read_phantom_header(path):
    with open(path, "rb") as fh:
        if fh.read(5) != PHANTOM_MAGIC:
            raise ValidationError(f"{path}: not an XVOX1 phantom file")
        dims = struct.unpack("<3I", fh.read(12))
        vs = struct.unpack("<3d", fh.read(24))
        origin = struct.unpack("<3d", fh.read(24))
        (nmat,) = struct.unpack("<I", fh.read(4))
        names = {}
        for _ in range(nmat):
            i, ln = struct.unpack("<BH", fh.read(3))
            names[i] = fh.read(ln).decode("utf-8")
        return {"dims": dims, "voxel_size": vs, "origin": origin, "materials": names, "offset": fh.tell()}


def load_phantom(path, library):
    """Read an XVOX1 file, resolving material names through ``library``
    (a mapping name -> Material, e.g. :class:`~ctscatter.physics_data.MaterialLibrary`)."""
    hdr = read_phantom_header(path)
    n = int(np.prod(hdr["dims"]))
    raw = Path(path).read_bytes()[hdr["offset"]:]
    if len(raw) != 5 * n:
        raise ValidationError(f"{path}: expected {5 * n} data bytes, found {len(raw)}")
    ids = np.frombuffer(raw[:n], dtype="<u1").reshape(hdr["dims"], order="F")
    rho = np.frombuffer(raw[n:], dtype="<f4").reshape(hdr["dims"], order="F")
    table = {i: library[name] for i, name in hdr["materials"].items()}
    return VoxelPhantom(ids.copy(), rho.copy(), hdr["voxel_size"], hdr["origin"], table, hdr["materials"])
