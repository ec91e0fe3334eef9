"""Iterative Monte Carlo scatter correction.

Loop per iteration: reconstruct the current projections, segment, convert to
a density phantom, simulate scatter (every k-th angle, reduced detector grid)
and primary images, smooth the scatter, interpolate the missing angles,
up-sample to the detector grid and correct the ORIGINAL line integrals

    c = a - ln(Ip / (Ip + Is)).
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CtScatterError, SimulationError, ValidationError
from .metrics import ncc
from .postprocess import SgFilterSpec, interpolate_angles, sg_smooth_stack, upsample_stack
from .recon import fbp_reconstruct, intensity_to_attenuation, segment, to_density_phantom
from .transport import ProjectionStack, SimConfig, run_scan

log = logging.getLogger(__name__)


@dataclass
class CorrectionConfig:
    recon_dims: tuple
    recon_voxel_size: float | tuple
    class_map: dict  # class id -> (Material or None, density g/cm3)
    n_classes: int = 0  # 0: len(class_map)
    n_iterations: int = 3
    simulate_every_kth_angle: int = 1
    mc_resolution: tuple | None = None  # (nu, nv) simulation grid; None = detector grid
    phantom_dims: tuple | None = None  # MC phantom grid; must divide recon_dims
    sim: SimConfig = field(default_factory=SimConfig)
    sg: SgFilterSpec | None = None  # None: window scaled to the simulation grid
    smooth: bool = True
    primary_full_resolution: bool = True
    density_mode: str = "class"
    otsu_bins: int = 1024
    otsu_margin: float = 0.05
    filter_window: str = "hann"
    ncc_stop: float | None = None  # stop early when successive volumes reach this NCC
    workers: int = 1

    def __post_init__(self):
        if self.n_classes == 0:
            self.n_classes = len(self.class_map)
        if self.n_iterations < 1:
            raise ValidationError("n_iterations must be >= 1")
        if self.simulate_every_kth_angle < 1:
            raise ValidationError("simulate_every_kth_angle must be >= 1")
        if not 2 <= self.n_classes <= 4:
            raise ValidationError("n_classes must be 2, 3 or 4")
        missing = [k for k in range(self.n_classes) if k not in self.class_map]
        if missing:
            raise ValidationError(f"class_map lacks entries for classes {missing}")
        self.recon_dims = tuple(int(n) for n in self.recon_dims)
        if len(self.recon_dims) != 3 or min(self.recon_dims) < 1:
            raise ValidationError("recon_dims must be three positive integers")
        if self.phantom_dims is not None:
            self.phantom_dims = tuple(int(n) for n in self.phantom_dims)
            if any(r % p for r, p in zip(self.recon_dims, self.phantom_dims)):
                raise ValidationError("phantom_dims must divide recon_dims")
        if self.mc_resolution is not None:
            self.mc_resolution = tuple(int(n) for n in self.mc_resolution)
            if min(self.mc_resolution) < 2:
                raise ValidationError("mc_resolution must be at least 2 x 2")
        if self.density_mode not in ("class", "scaled"):
            raise ValidationError("density_mode must be 'class' or 'scaled'")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")

    def check_geometry(self, g):
        if self.mc_resolution is not None and (self.mc_resolution[0] > g.nu or self.mc_resolution[1] > g.nv):
            raise ValidationError("mc_resolution exceeds the detector grid")


@dataclass
class IterationReport:
    iteration: int
    times: dict
    scatter_fraction_mean: float
    scatter_fraction_max: float
    ncc_previous: float
    thresholds: list
    clamped_pixels: int
    n_simulated: int
    mc_seconds_per_projection: float

    @property
    def mc_seconds(self):
        return self.times.get("mc_scatter", 0.0) + self.times.get("mc_primary", 0.0)

    @property
    def total_seconds(self):
        return float(sum(self.times.values()))

    def to_line(self):
        parts = [f"iteration={self.iteration}"]
        parts += [f"t_{k}={v:.6g}" for k, v in self.times.items()]
        parts += [
            f"scatter_fraction_mean={self.scatter_fraction_mean:.6g}",
            f"scatter_fraction_max={self.scatter_fraction_max:.6g}",
            f"ncc_previous={self.ncc_previous:.9g}",
            "thresholds=" + ";".join(f"{t:.6g}" for t in self.thresholds),
            f"clamped_pixels={self.clamped_pixels}",
            f"simulated_projections={self.n_simulated}",
            f"mc_seconds_per_projection={self.mc_seconds_per_projection:.6g}",
        ]
        return " ".join(parts)


def write_reports(reports, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_line() + "\n")


TABLE_ROWS = (
    "Projections for FBP",
    "FBP time",
    "Photons",
    "Splitting",
    "Step size",
    "Projections simulated",
    "MC time /projection",
    "MC time /iteration",
    "Correction /iteration",
    "Correction / {n} iterations",
)


def table_rows(n_angles, sim, reports):
    """Table-style summary column for one run (times in seconds)."""
    n = len(reports)
    fbp = float(np.mean([r.times.get("fbp", 0.0) for r in reports]))
    return {
        "Projections for FBP": n_angles,
        "FBP time": f"{fbp:.3f} s",
        "Photons": f"{sim.photons_total:.3g}",
        "Splitting": sim.splitting,
        "Step size": sim.step_voxels,
        "Projections simulated": reports[0].n_simulated,
        "MC time /projection": f"{np.mean([r.mc_seconds_per_projection for r in reports]):.4f} s",
        "MC time /iteration": f"{np.mean([r.mc_seconds for r in reports]):.3f} s",
        "Correction /iteration": f"{np.mean([r.total_seconds for r in reports]):.3f} s",
        f"Correction / {n} iterations": f"{sum(r.total_seconds for r in reports):.3f} s",
    }


def write_table(cases, path):
    """CSV with one row per table parameter and one column per case.

    ``cases`` is a list of (name, column dict from :func:`table_rows`).
    """
    keys = []
    for _, col in cases:
        for k in col:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([""] + [name for name, _ in cases])
        for k in keys:
            w.writerow([k] + [col.get(k, "") for _, col in cases])


def correct_projections(a, ip, is_, warn=True):
    """c = a - ln(Ip / (Ip + Is)); negative Is is clamped to 0.

    Returns (corrected stack, number of clamped pixels).
    """
    av, pv, sv = (np.asarray(getattr(x, "values", x), dtype=float) for x in (a, ip, is_))
    if not av.shape == pv.shape == sv.shape:
        raise ValidationError(f"stack shapes differ: a{av.shape} Ip{pv.shape} Is{sv.shape}")
    bad = int(np.sum(~(pv > 0)))
    if bad:
        raise ValidationError(f"{bad} primary pixels are <= 0")
    neg = sv < 0
    n_neg = int(neg.sum())
    if n_neg:
        if warn:
            log.warning("clamped %d negative scatter pixels to 0", n_neg)
        sv = np.where(neg, 0.0, sv)
    c = av + np.log1p(sv / pv)
    if isinstance(a, ProjectionStack):
        return ProjectionStack(c, a.angles), n_neg
    return c, n_neg


def simulated_angle_indices(n_angles, k, periodic):
    idx = list(range(0, n_angles, k))
    if not periodic and idx[-1] != n_angles - 1:
        idx.append(n_angles - 1)
    return np.array(idx)


def _is_full_scan(angles):
    if len(angles) < 2:
        return False
    step = float(np.median(np.diff(angles)))
    return angles[-1] - angles[0] + step >= 2 * math.pi * (1 - 1e-6)


def estimate_scatter(ph, g, spec, resp, cfg, workers=1):
    """Simulated (Ip, Is) on the detector grid of ``g`` with the
    acceleration steps of ``cfg``; returns (Ip, Is, info)."""
    t = {}
    periodic = _is_full_scan(g.angles)
    g_mc = g if cfg.mc_resolution is None else g.with_pixels(*cfg.mc_resolution)
    idx = simulated_angle_indices(g.n_angles, cfg.simulate_every_kth_angle, periodic)

    t0 = time.perf_counter()
    rs = run_scan(ph, g_mc, spec, resp, cfg.sim, angle_indices=idx, workers=workers, what="scatter")
    t["mc_scatter"] = time.perf_counter() - t0
    mc_per_proj = rs.wall_seconds / len(idx)

    t0 = time.perf_counter()
    g_p = g if cfg.primary_full_resolution else g_mc
    rp = run_scan(ph, g_p, spec, resp, cfg.sim, workers=workers, what="primary")
    t["mc_primary"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    scat = rs.scatter
    if cfg.smooth:
        sg = cfg.sg or SgFilterSpec.scaled(g_mc.det_pixels)
        scat = sg_smooth_stack(scat, sg)
    t["smooth"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if len(idx) != g.n_angles:
        scat = interpolate_angles(scat, g.angles, period=2 * math.pi if periodic else None)
    t["interpolate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    prim = rp.primary
    if g_mc is not g:
        scat = upsample_stack(scat, g.det_pixels)
        if not cfg.primary_full_resolution:
            low = prim.values
            prim = upsample_stack(prim, g.det_pixels)
            floor = low.min(axis=(1, 2))[:, None, None]
            prim = ProjectionStack(np.maximum(prim.values, floor), prim.angles)
    t["upsample"] = time.perf_counter() - t0
    return prim, scat, {"times": t, "n_simulated": len(idx), "mc_per_projection": mc_per_proj}


def run_iterative_correction(raw, flatfield, g, spec, resp, cfg, callback=None):
    """Iterative correction of a measured intensity stack.

    Returns (corrected volume, corrected line-integral stack, reports).
    ``callback(iteration, volume, stack)`` is called after each pass.
    """
    cfg.check_geometry(g)
    if raw.values.shape != (g.n_angles, g.nv, g.nu):
        raise ValidationError("raw stack does not match the scan geometry")
    a = intensity_to_attenuation(raw, flatfield)

    def fbp(stack):
        return fbp_reconstruct(stack, g, cfg.recon_dims, cfg.recon_voxel_size, cfg.filter_window, cfg.workers)

    t0 = time.perf_counter()
    vol = fbp(a)
    t_fbp0 = time.perf_counter() - t0
    c = a
    reports = []
    for it in range(1, cfg.n_iterations + 1):
        stage = "segment"
        try:
            times = {"fbp": t_fbp0} if it == 1 else {}
            t0 = time.perf_counter()
            seg = segment(vol, cfg.n_classes, cfg.class_map, cfg.otsu_bins, cfg.otsu_margin)
            times["segment"] = time.perf_counter() - t0
            stage = "phantom"
            t0 = time.perf_counter()
            ph = to_density_phantom(vol, seg, cfg.phantom_dims, cfg.density_mode)
            times["phantom"] = time.perf_counter() - t0
            stage = "simulate"
            ip, is_, info = estimate_scatter(ph, g, spec, resp, cfg, cfg.workers)
            times.update(info["times"])
            stage = "correct"
            t0 = time.perf_counter()
            c, n_clamped = correct_projections(a, ip, is_)
            times["correct"] = time.perf_counter() - t0
            stage = "fbp"
            t0 = time.perf_counter()
            new_vol = fbp(c)
            times["fbp"] = times.get("fbp", 0.0) + time.perf_counter() - t0
        except CtScatterError as exc:
            kind = ValidationError if isinstance(exc, ValidationError) else SimulationError
            raise kind(f"iteration {it}, stage {stage}: {exc}") from exc
        sv = np.clip(is_.values, 0, None)
        frac = sv / (ip.values + sv)
        rep = IterationReport(
            iteration=it,
            times=times,
            scatter_fraction_mean=float(frac.mean()),
            scatter_fraction_max=float(frac.max()),
            ncc_previous=ncc(new_vol.values, vol.values),
            thresholds=list(seg.thresholds),
            clamped_pixels=n_clamped,
            n_simulated=info["n_simulated"],
            mc_seconds_per_projection=info["mc_per_projection"],
        )
        log.info("%s", rep.to_line())
        reports.append(rep)
        vol = new_vol
        if callback is not None:
            callback(it, vol, c)
        if cfg.ncc_stop is not None and rep.ncc_previous >= cfg.ncc_stop:
            break
    return vol, c, reports
