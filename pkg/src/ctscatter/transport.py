"""Monte Carlo photon transport with point-detector scatter scoring.

For every interaction of a photon history, ``splitting`` pseudo-particles are
sent towards uniformly chosen detector pixels. Each scores the expected
flux at the pixel centre

    x = g(E') * p(lambda) * W_ps / (2 pi d^2) * exp(-mu(E') L)

where ``p(lambda)/(2 pi)`` is the scatter probability per steradian towards
the pixel, ``W_ps = W / splitting * n_pixels`` compensates the uniform pixel
choice and ``g`` is the detector signal per photon. The real photon then
continues with a sampled direction. Primary images are computed
deterministically from the exact line integrals.

Units: the source emits ``spectrum.weights[n]`` photons per steradian in bin
``n``; pixel values are signal per unit area normal to the incident ray
(cm^-2, times keV when the detector weighting is ``"energy"``). Primary and
scatter images share these units.
"""

from __future__ import annotations

import logging
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np

from . import rng as _rng
from .errors import SimulationError, ValidationError
from .geometry import material_paths_k, optical_depth_k, walk_k
from .sampling import (
    COMPTON,
    PHOTOELECTRIC,
    mass_mu_k,
    p_lambda_compton_k,
    p_lambda_rayleigh_k,
    rotate_direction,
    sample_compton_k,
    sample_rayleigh_k,
    select_interaction_k,
)

log = logging.getLogger(__name__)

PROJECTION_MAGIC = b"XPRJ1"

# ledger slots
L_INITIAL, L_ABSORBED, L_ESCAPED, L_CAPPED, L_BAD, L_INTERACTIONS = range(6)


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo settings for one projection.

    ``roulette_threshold`` is relative to the history's initial weight.
    ``roulette_survival = 1`` disables Russian roulette. ``n_chunks`` fixes
    the decomposition of histories into work items (and the batch count for
    the variance estimate); it is independent of the worker count.
    """

    photons_total: int = 100_000
    splitting: int = 10
    roulette_survival: float = 0.5
    roulette_threshold: float = 1e-3
    step_voxels: int = 1
    max_interactions: int = 50
    seed: int = 0
    n_chunks: int = 16
    detector_weighting: str = "energy"

    def __post_init__(self):
        if int(self.photons_total) < 1:
            raise ValidationError("photons_total must be >= 1")
        if int(self.splitting) < 1:
            raise ValidationError("splitting must be >= 1")
        if not 0.0 < self.roulette_survival <= 1.0:
            raise ValidationError("roulette_survival must lie in (0, 1]")
        if not self.roulette_threshold > 0:
            raise ValidationError("roulette threshold w_min must be > 0")
        if int(self.step_voxels) != self.step_voxels or self.step_voxels < 1:
            raise ValidationError("step_voxels must be an integer >= 1")
        if self.max_interactions < 1:
            raise ValidationError("max_interactions must be >= 1")
        if self.n_chunks < 2:
            raise ValidationError("n_chunks must be >= 2")
        if self.detector_weighting not in ("energy", "counting"):
            raise ValidationError("detector_weighting must be 'energy' or 'counting'")

    def replace(self, **kw):
        vals = {k: getattr(self, k) for k in self.__dataclass_fields__}
        vals.update(kw)
        return SimConfig(**vals)


@dataclass
class PhotonState:
    position: np.ndarray
    direction: np.ndarray
    energy: float
    weight: float
    generation: int = 0


@dataclass
class DetectorImage:
    """Detector image of shape (nv, nu) with optional per-pixel variance."""

    values: np.ndarray
    variance: np.ndarray | None = None
    ledger: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("detector image must be 2-D (nv, nu)")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("detector image has non-finite values")

    @property
    def dims(self):
        nv, nu = self.values.shape
        return nu, nv

    @property
    def total(self):
        return float(self.values.sum())

    @property
    def total_variance(self):
        """Variance of ``total`` from the batch estimate (None if unknown)."""
        return None if self.variance is None else float(self._total_var)


@dataclass
class ProjectionStack:
    """Per-angle detector images, shape (n_angles, nv, nu)."""

    values: np.ndarray
    angles: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64).ravel()
        if self.values.ndim != 3 or self.values.shape[0] != len(self.angles):
            raise ValidationError("stack must be (n_angles, nv, nu) with one angle per image")

    @property
    def n_angles(self):
        return self.values.shape[0]

    @property
    def dims(self):
        return self.values.shape[2], self.values.shape[1]

    def image(self, i):
        return DetectorImage(self.values[i])

    def save(self, path):
        nu, nv = self.dims
        with open(path, "wb") as fh:
            fh.write(PROJECTION_MAGIC)
            fh.write(struct.pack("<3I", nu, nv, self.n_angles))
            fh.write(self.angles.astype("<f8").tobytes())
            fh.write(self.values.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        hdr = read_projection_header(path)
        nu, nv, na = hdr["nu"], hdr["nv"], hdr["n_angles"]
        raw = Path(path).read_bytes()[hdr["offset"]:]
        if len(raw) != 4 * nu * nv * na:
            raise ValidationError(f"{path}: truncated projection data")
        vals = np.frombuffer(raw, dtype="<f4").reshape(na, nv, nu).astype(np.float64)
        return cls(vals, hdr["angles"])


def read_projection_header(path):
    with open(path, "rb") as fh:
        if fh.read(5) != PROJECTION_MAGIC:
            raise ValidationError(f"{path}: not an XPRJ1 projection file")
        nu, nv, na = struct.unpack("<3I", fh.read(12))
        angles = np.frombuffer(fh.read(8 * na), dtype="<f8").copy()
        return {"nu": nu, "nv": nv, "n_angles": na, "angles": angles, "offset": 17 + 8 * na}


# ---------------------------------------------------------------------------
# compiled kernels


@nb.njit(cache=True, nogil=True)
def _signal(sig_e, sig_v, energy):
    n = sig_e.shape[0]
    if energy < sig_e[0] or energy > sig_e[n - 1]:
        return 0.0
    if n == 1:
        return sig_v[0]
    return np.interp(energy, sig_e, sig_v)


@nb.njit(cache=True, nogil=True)
def _fill_mu(pk, energy, out):
    for m in range(out.shape[0]):
        if pk.mu_n[m] > 0:
            out[m] = mass_mu_k(pk, m, energy)
        else:
            out[m] = 0.0


@nb.njit(cache=True, nogil=True)
def _run_histories(g0, gs, gn, mat, rho, pk, src, cen, e_u, e_v, e_s, pu, pv, nu, nv,
                   bin_energy, bin_w0, bin_start, n_hist, chunk, n_chunks,
                   seed, angle_idx, splitting, w_min_rel, p_survive, step_voxels, kmax,
                   sig_e, sig_v, e_floor, analog, image, ledger):
    n_mat = pk.z_eff.shape[0]
    mu_here = np.empty(n_mat)
    mu_out = np.empty(n_mat)
    half_u = 0.5 * nu * pu
    half_v = 0.5 * nv * pv
    sdd = -((cen[0] - src[0]) * e_s[0] + (cen[1] - src[1]) * e_s[1] + (cen[2] - src[2]) * e_s[2])
    cos_cone = sdd / math.sqrt(sdd * sdd + half_u * half_u + half_v * half_v)
    n_pix = nu * nv
    two_pi = 2.0 * math.pi
    roulette = p_survive < 1.0

    for h in range(chunk, n_hist, n_chunks):
        b = np.searchsorted(bin_start, h, side="right") - 1
        j = h - bin_start[b]
        state = _rng.new_state(seed, angle_idx, b, j)
        energy = bin_energy[b]
        w = bin_w0[b]
        w0 = w
        ledger[L_INITIAL] += w

        # uniform direction inside the pyramid subtending the detector
        while True:
            ct = 1.0 - _rng.uniform(state) * (1.0 - cos_cone)
            phi = two_pi * _rng.uniform(state)
            st = math.sqrt(max(0.0, 1.0 - ct * ct))
            a = sdd * st / ct * math.cos(phi)
            bb = sdd * st / ct * math.sin(phi)
            if abs(a) <= half_u and abs(bb) <= half_v:
                break
        dx = -e_s[0] * ct + st * (math.cos(phi) * e_u[0] + math.sin(phi) * e_v[0])
        dy = -e_s[1] * ct + st * (math.cos(phi) * e_u[1] + math.sin(phi) * e_v[1])
        dz = -e_s[2] * ct + st * (math.cos(phi) * e_u[2] + math.sin(phi) * e_v[2])
        px, py, pz = src[0], src[1], src[2]

        gen = 0
        fate = L_CAPPED
        for _k in range(kmax):
            _fill_mu(pk, energy, mu_here)
            target = -math.log(_rng.uniform(state))
            _, t_hit, m = walk_k(px, py, pz, dx, dy, dz, np.inf, g0, gs, gn, mat, rho, mu_here, target)
            if t_hit < 0.0:
                fate = L_ESCAPED
                if analog and gen > 0:
                    cosi = -(dx * e_s[0] + dy * e_s[1] + dz * e_s[2])
                    if cosi > 0.0:
                        t = ((px - cen[0]) * e_s[0] + (py - cen[1]) * e_s[1] + (pz - cen[2]) * e_s[2]) / cosi
                        hx = px + t * dx - cen[0]
                        hy = py + t * dy - cen[1]
                        hz = pz + t * dz - cen[2]
                        fu = (hx * e_u[0] + hy * e_u[1] + hz * e_u[2]) / pu + 0.5 * nu
                        fv = (hx * e_v[0] + hy * e_v[1] + hz * e_v[2]) / pv + 0.5 * nv
                        if 0.0 <= fu < nu and 0.0 <= fv < nv:
                            sig = _signal(sig_e, sig_v, energy)
                            image[int(fv), int(fu)] += w * sig / (pu * pv * cosi)
                break
            px += t_hit * dx
            py += t_hit * dy
            pz += t_hit * dz
            ledger[L_INTERACTIONS] += 1.0
            kind = select_interaction_k(pk, m, energy, _rng.uniform(state))
            if kind < 0:
                ledger[L_BAD] += 1.0
                fate = L_ABSORBED
                break
            if kind == PHOTOELECTRIC:
                fate = L_ABSORBED
                break

            if not analog:
                alpha = energy / 510.99895
                for _s in range(splitting):
                    iu = int(_rng.uniform(state) * nu)
                    iv = int(_rng.uniform(state) * nv)
                    fu = (iu - 0.5 * (nu - 1)) * pu
                    fv = (iv - 0.5 * (nv - 1)) * pv
                    qx = cen[0] + fu * e_u[0] + fv * e_v[0] - px
                    qy = cen[1] + fu * e_u[1] + fv * e_v[1] - py
                    qz = cen[2] + fu * e_u[2] + fv * e_v[2] - pz
                    d2 = qx * qx + qy * qy + qz * qz
                    d = math.sqrt(d2)
                    ox = qx / d
                    oy = qy / d
                    oz = qz / d
                    cos_t = dx * ox + dy * oy + dz * oz
                    if cos_t > 1.0:
                        cos_t = 1.0
                    elif cos_t < -1.0:
                        cos_t = -1.0
                    if kind == COMPTON:
                        e_sc = energy / (1.0 + alpha * (1.0 - cos_t))
                        p = p_lambda_compton_k(pk, m, energy, cos_t)
                    else:
                        e_sc = energy
                        p = p_lambda_rayleigh_k(pk, m, energy, cos_t)
                    w_ps = w / splitting * n_pix
                    if roulette and (w / splitting) * p < w_min_rel * w0:
                        if _rng.uniform(state) < p_survive:
                            w_ps /= p_survive
                        else:
                            continue
                    if p <= 0.0 or e_sc < e_floor:
                        continue
                    sig = _signal(sig_e, sig_v, e_sc)
                    if sig <= 0.0:
                        continue
                    if kind == COMPTON:
                        _fill_mu(pk, e_sc, mu_out)
                        tau = optical_depth_k(px, py, pz, ox, oy, oz, d, g0, gs, gn, mat, rho, mu_out, step_voxels)
                    else:
                        tau = optical_depth_k(px, py, pz, ox, oy, oz, d, g0, gs, gn, mat, rho, mu_here, step_voxels)
                    x = sig * p * w_ps / (two_pi * d2) * math.exp(-tau)
                    if not math.isfinite(x):
                        ledger[L_BAD] += 1.0
                        continue
                    image[iv, iu] += x

            # real continuation
            if kind == COMPTON:
                cos_t, energy = sample_compton_k(pk, m, energy, state)
            else:
                cos_t = sample_rayleigh_k(pk, m, energy, state)
            phi = two_pi * _rng.uniform(state)
            dx, dy, dz = rotate_direction(dx, dy, dz, cos_t, phi)
            gen += 1
            if energy < e_floor:
                fate = L_ABSORBED
                break
        ledger[fate] += w


@nb.njit(cache=True, nogil=True)
def _primary_image(g0, gs, gn, mat, rho, src, centers, bin_weight, bin_signal, mu_table, out):
    nv, nu = out.shape
    n_bins, n_mat = mu_table.shape
    paths = np.empty(n_mat)
    for iv in range(nv):
        for iu in range(nu):
            qx = centers[iv, iu, 0] - src[0]
            qy = centers[iv, iu, 1] - src[1]
            qz = centers[iv, iu, 2] - src[2]
            d2 = qx * qx + qy * qy + qz * qz
            d = math.sqrt(d2)
            material_paths_k(src[0], src[1], src[2], qx / d, qy / d, qz / d, d, g0, gs, gn, mat, rho, paths)
            acc = 0.0
            for n in range(n_bins):
                tau = 0.0
                for m in range(n_mat):
                    tau += mu_table[n, m] * paths[m]
                acc += bin_weight[n] * bin_signal[n] * math.exp(-tau)
            out[iv, iu] = acc / d2


# ---------------------------------------------------------------------------
# drivers


def allocate_histories(spectrum, photons_total):
    """Photons per energy bin: proportional to weight, largest remainder,
    at least one photon for every positive bin when the budget allows."""
    w = spectrum.weights / spectrum.weights.sum()
    raw = w * photons_total
    counts = np.floor(raw).astype(np.int64)
    rem = photons_total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    positive = spectrum.weights > 0
    if photons_total >= positive.sum():
        counts[positive & (counts == 0)] = 1
    counts[~positive] = 0
    return counts


def rectangle_solid_angle(sdd, width, height):
    """Solid angle of a centred width x height rectangle at distance sdd."""
    a, b = 0.5 * width, 0.5 * height
    return 4.0 * math.asin(a * b / math.sqrt((sdd * sdd + a * a) * (sdd * sdd + b * b)))


def _check_inputs(ph, spec, resp, mode):
    for e in spec.energies:
        ph.mass_mu_table(e)  # raises EnergyRangeError on uncovered energies
    sig_e, sig_v = resp.signal_table(mode)
    return np.ascontiguousarray(sig_e), np.ascontiguousarray(sig_v)


def _energy_floor(ph):
    lo = [m.energy_range[0] for m in ph.material_table.values()]
    return max(lo) if lo else 0.0


class _ScatterJob:
    """Everything the history kernel needs for one angle."""

    def __init__(self, ph, g, angle_idx, spec, resp, cfg, analog):
        self.sig_e, self.sig_v = _check_inputs(ph, spec, resp, cfg.detector_weighting)
        self.counts = allocate_histories(spec, int(cfg.photons_total))
        omega = rectangle_solid_angle(g.sdd, *g.detector_size)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.w0 = np.where(self.counts > 0, spec.weights * omega / np.maximum(self.counts, 1), 0.0)
        self.bin_start = np.concatenate([[0], np.cumsum(self.counts)[:-1]]).astype(np.int64)
        self.n_hist = int(self.counts.sum())
        self.frame = g.frame(angle_idx)
        self.ph, self.g, self.angle_idx, self.spec, self.cfg, self.analog = ph, g, angle_idx, spec, cfg, analog
        self.e_floor = _energy_floor(ph)

    def run_chunk(self, chunk):
        ph, g, cfg = self.ph, self.g, self.cfg
        g0, gs, gn, mat, rho = ph.grid_args()
        src, cen, e_u, e_v, e_s = self.frame
        image = np.zeros((g.nv, g.nu))
        ledger = np.zeros(6)
        t = time.perf_counter()
        _run_histories(g0, gs, gn, mat, rho, ph.packed, src, cen, e_u, e_v, e_s,
                       g.pixel_pitch[0], g.pixel_pitch[1], g.nu, g.nv,
                       np.ascontiguousarray(self.spec.energies), self.w0, self.bin_start, self.n_hist,
                       chunk, cfg.n_chunks, np.uint64(cfg.seed & 0xFFFFFFFFFFFFFFFF), self.angle_idx,
                       int(cfg.splitting), float(cfg.roulette_threshold), float(cfg.roulette_survival),
                       int(cfg.step_voxels), int(cfg.max_interactions), self.sig_e, self.sig_v,
                       self.e_floor, bool(self.analog), image, ledger)
        return image, ledger, time.perf_counter() - t

    def reduce(self, parts):
        images = np.stack([p[0] for p in parts])
        ledger = np.zeros(6)
        for p in parts:
            ledger += p[1]
        if ledger[L_BAD] > 0:
            raise SimulationError(
                f"angle {self.angle_idx}: {int(ledger[L_BAD])} non-finite or undefined contributions "
                "(check material tables)"
            )
        total = np.zeros_like(images[0])
        for im in images:  # fixed order
            total += im
        c = len(images)
        var = c * images.var(axis=0, ddof=1)
        out = DetectorImage(total, var, ledger)
        sums = images.reshape(c, -1).sum(axis=1)
        out._total_var = c * sums.var(ddof=1)
        return out


def _run(job, workers):
    chunks = range(job.cfg.n_chunks)
    if workers <= 1:
        parts = [job.run_chunk(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job.run_chunk, chunks))
    return job.reduce(parts), sum(p[2] for p in parts)


def simulate_scatter(ph, g, angle_idx, spec, resp, cfg, workers=1):
    """Scatter image for one projection (point-detector estimator)."""
    return _run(_ScatterJob(ph, g, angle_idx, spec, resp, cfg, analog=False), workers)[0]


def simulate_scatter_analog(ph, g, angle_idx, spec, resp, cfg, workers=1):
    """Reference estimator: photons are tracked until they cross the detector
    plane, where scattered photons score ``W g(E) / (pixel area * cos)``.
    No splitting, no roulette, no point-detector scoring."""
    cfg = cfg.replace(splitting=1, roulette_survival=1.0)
    return _run(_ScatterJob(ph, g, angle_idx, spec, resp, cfg, analog=True), workers)[0]


def simulate_primary(ph, g, angle_idx, spec, resp, cfg=None):
    """Deterministic primary image: sum_n S_n g(E_n) / d^2 * exp(-mu(E_n) L)."""
    mode = cfg.detector_weighting if cfg is not None else "energy"
    sig_e, sig_v = _check_inputs(ph, spec, resp, mode)
    mu_table = np.stack([ph.mass_mu_table(e) for e in spec.energies])
    signal = np.array([_signal(sig_e, sig_v, e) for e in spec.energies])
    g0, gs, gn, mat, rho = ph.grid_args()
    out = np.zeros((g.nv, g.nu))
    _primary_image(g0, gs, gn, mat, rho, g.frame(angle_idx)[0], g.pixel_centers(angle_idx),
                   np.ascontiguousarray(spec.weights), signal, mu_table, out)
    return DetectorImage(out)


def flat_field(g, spec, resp, cfg=None, angle_idx=0):
    """Primary image with no object in the beam."""
    from .geometry import VoxelPhantom

    return simulate_primary(VoxelPhantom.vacuum((1, 1, 1), 1.0), g, angle_idx, spec, resp, cfg)


@dataclass
class ScanResult:
    primary: ProjectionStack | None
    scatter: ProjectionStack | None
    angle_indices: np.ndarray
    mc_seconds: dict  # angle index -> summed MC kernel time for the scatter image
    primary_seconds: dict
    wall_seconds: float
    scatter_variance: np.ndarray | None = None


def run_scan(ph, g, spec, resp, cfg, angle_indices=None, workers=1, what="both"):
    """Simulate primary and/or scatter images for a subset of angles.

    Work items are (angle, chunk) pairs distributed over ``workers`` threads;
    every history's random stream is keyed by (angle, bin, photon index), so
    the output bits do not depend on ``workers``.
    """
    if what not in ("primary", "scatter", "both"):
        raise ValidationError("what must be primary, scatter or both")
    idx = np.arange(g.n_angles) if angle_indices is None else np.asarray(angle_indices, dtype=int)
    if idx.size == 0:
        raise ValidationError("angle subset is empty")
    if np.any(idx < 0) or np.any(idx >= g.n_angles):
        raise ValidationError("angle index out of range")
    t_wall = time.perf_counter()
    angles = g.angles[idx]
    prim = scat = var = None
    mc_time, prim_time = {}, {}

    if what in ("scatter", "both"):
        jobs = {}
        for i in idx:
            try:
                jobs[int(i)] = _ScatterJob(ph, g, int(i), spec, resp, cfg, analog=False)
            except Exception as exc:
                raise SimulationError(f"angle {int(i)}: {exc}") from exc
        items = [(int(i), c) for i in idx for c in range(cfg.n_chunks)]

        def work(item):
            i, c = item
            try:
                return jobs[i].run_chunk(c)
            except Exception as exc:
                raise SimulationError(f"angle {i}: {exc}") from exc

        if workers <= 1:
            parts = [work(it) for it in items]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(work, items))
        scat = np.zeros((len(idx), g.nv, g.nu))
        var = np.zeros_like(scat)
        for k, i in enumerate(idx):
            sub = parts[k * cfg.n_chunks:(k + 1) * cfg.n_chunks]
            try:
                img = jobs[int(i)].reduce(sub)
            except SimulationError as exc:
                raise SimulationError(f"angle {int(i)}: {exc}") from exc
            scat[k] = img.values
            var[k] = img.variance
            mc_time[int(i)] = sum(p[2] for p in sub)

    if what in ("primary", "both"):
        prim = np.zeros((len(idx), g.nv, g.nu))

        def prim_work(k):
            t = time.perf_counter()
            try:
                prim[k] = simulate_primary(ph, g, int(idx[k]), spec, resp, cfg).values
            except Exception as exc:
                raise SimulationError(f"angle {int(idx[k])}: {exc}") from exc
            return time.perf_counter() - t

        if workers <= 1:
            times = [prim_work(k) for k in range(len(idx))]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                times = list(pool.map(prim_work, range(len(idx))))
        prim_time = {int(i): t for i, t in zip(idx, times)}

    return ScanResult(
        primary=None if prim is None else ProjectionStack(prim, angles),
        scatter=None if scat is None else ProjectionStack(scat, angles),
        angle_indices=idx,
        mc_seconds=mc_time,
        primary_seconds=prim_time,
        wall_seconds=time.perf_counter() - t_wall,
        scatter_variance=var,
    )
