"""Synthetic voxel phantoms. All are centred on the isocentre with the
cylinder axes along z (the rotation axis). Voxels are assigned by their
centre point."""

from __future__ import annotations

import math

import numpy as np

from .errors import ValidationError
from .geometry import VoxelPhantom


def _centres(dims, voxel_size):
    vs = np.broadcast_to(np.asarray(voxel_size, dtype=float), 3)
    axes = [(np.arange(n) - 0.5 * (n - 1)) * s for n, s in zip(dims, vs)]
    return np.meshgrid(*axes, indexing="ij")


def _check(dims, voxel_size, **lengths):
    if len(dims) != 3 or min(dims) < 1:
        raise ValidationError("dims must be three positive integers")
    if np.min(voxel_size) <= 0:
        raise ValidationError("voxel size must be positive")
    for k, v in lengths.items():
        if v is not None and not v > 0:
            raise ValidationError(f"{k} must be > 0")


class _Builder:
    def __init__(self, dims, voxel_size):
        self.dims = tuple(int(n) for n in dims)
        self.vs = voxel_size
        self.x, self.y, self.z = _centres(self.dims, voxel_size)
        self.ids = np.zeros(self.dims, np.uint8)
        self.rho = np.zeros(self.dims, np.float32)
        self.table, self.names = {}, {}

    def paint(self, mask, material, density):
        if material is None:
            self.ids[mask] = 0
            self.rho[mask] = 0.0
            return
        key = next((k for k, m in self.table.items() if m is material), None)
        if key is None:
            key = len(self.table) + 1
            self.table[key] = material
            self.names[key] = material.name
        self.ids[mask] = key
        self.rho[mask] = density

    def zband(self, height):
        return np.ones(self.dims, bool) if height is None else np.abs(self.z) <= 0.5 * height

    def build(self):
        return VoxelPhantom.centered(self.ids, self.rho, self.vs, self.table, self.names)


def cylinder(dims, voxel_size, radius, material, density=None, height=None, center=(0.0, 0.0)):
    _check(dims, voxel_size, radius=radius, height=height)
    b = _Builder(dims, voxel_size)
    mask = ((b.x - center[0]) ** 2 + (b.y - center[1]) ** 2 <= radius * radius) & b.zband(height)
    b.paint(mask, material, material.density_ref if density is None else density)
    return b.build()


def cube(dims, voxel_size, side, material, density=None):
    _check(dims, voxel_size, side=side)
    b = _Builder(dims, voxel_size)
    h = 0.5 * side
    mask = (np.abs(b.x) <= h) & (np.abs(b.y) <= h) & (np.abs(b.z) <= h)
    b.paint(mask, material, material.density_ref if density is None else density)
    return b.build()


def rods(dims, voxel_size, radius, matrix, rod_material, n_rods=8, rod_radius=None,
         ring_radius=None, height=None, matrix_density=None, rod_density=None):
    """Cylinder of ``matrix`` with ``n_rods`` rods of ``rod_material`` evenly
    spaced on a ring (default: 8 rods at 0.6 r, rod radius 0.1 r)."""
    rod_radius = 0.1 * radius if rod_radius is None else rod_radius
    ring_radius = 0.6 * radius if ring_radius is None else ring_radius
    _check(dims, voxel_size, radius=radius, rod_radius=rod_radius, ring_radius=ring_radius, height=height)
    if n_rods < 1:
        raise ValidationError("n_rods must be >= 1")
    if ring_radius + rod_radius > radius:
        raise ValidationError("rods must lie inside the cylinder")
    if n_rods > 1 and 2 * ring_radius * math.sin(math.pi / n_rods) <= 2 * rod_radius:
        raise ValidationError("rods overlap")
    b = _Builder(dims, voxel_size)
    band = b.zband(height)
    b.paint((b.x ** 2 + b.y ** 2 <= radius * radius) & band, matrix,
            matrix.density_ref if matrix_density is None else matrix_density)
    for k in range(n_rods):
        a = 2 * math.pi * k / n_rods
        cx, cy = ring_radius * math.cos(a), ring_radius * math.sin(a)
        b.paint(((b.x - cx) ** 2 + (b.y - cy) ** 2 <= rod_radius ** 2) & band, rod_material,
                rod_material.density_ref if rod_density is None else rod_density)
    return b.build()


def cylinder_head_like(dims, voxel_size, radius, body, insert, height=None,
                       body_density=None, insert_density=None):
    """Light-metal body with dense inserts and air channels: a block-like
    casting (rounded square of half-width ``radius``) with two air bores
    and two dense seat rings, three classes air / body / insert."""
    _check(dims, voxel_size, radius=radius, height=height)
    b = _Builder(dims, voxel_size)
    band = b.zband(height)
    r = radius
    corner = 0.3 * r
    dx = np.maximum(np.abs(b.x) - (r - corner), 0.0)
    dy = np.maximum(np.abs(b.y) - (r - corner), 0.0)
    block = (np.abs(b.x) <= r) & (np.abs(b.y) <= r) & (dx ** 2 + dy ** 2 <= corner ** 2) & band
    b.paint(block, body, body.density_ref if body_density is None else body_density)
    for sx in (-0.45 * r, 0.45 * r):
        d2 = (b.x - sx) ** 2 + b.y ** 2
        b.paint((d2 <= (0.3 * r) ** 2) & block, insert,
                insert.density_ref if insert_density is None else insert_density)
        b.paint((d2 <= (0.2 * r) ** 2) & block, None, 0.0)
    return b.build()


def two_material(dims, voxel_size, radius, matrix, insert, insert_radius=None, height=None):
    """Cylinder of ``matrix`` with one central-offset and two off-axis inserts."""
    insert_radius = 0.2 * radius if insert_radius is None else insert_radius
    _check(dims, voxel_size, radius=radius, insert_radius=insert_radius, height=height)
    b = _Builder(dims, voxel_size)
    band = b.zband(height)
    b.paint((b.x ** 2 + b.y ** 2 <= radius ** 2) & band, matrix, matrix.density_ref)
    for cx, cy in ((0.5 * radius, 0.0), (-0.3 * radius, 0.4 * radius)):
        b.paint(((b.x - cx) ** 2 + (b.y - cy) ** 2 <= insert_radius ** 2) & band, insert, insert.density_ref)
    return b.build()


GENERATORS = {
    "cylinder": cylinder,
    "rods": rods,
    "cube": cube,
    "cylinder-head-like": cylinder_head_like,
    "two-material": two_material,
}
