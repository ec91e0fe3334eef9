"""Run configuration: one INI file (``configparser`` syntax) with sections

    [paths]       materials, spectrum, detector, phantom, raw, flat, output
    [geometry]    sdd, sod, det_pixels, pixel_pitch, n_angles, arc_deg
    [simulation]  photons, splitting, roulette_survival, roulette_threshold,
                  step_voxels, max_interactions, seed, chunks, detector_weighting
    [correction]  iterations, every_kth_angle, mc_resolution, recon_dims,
                  recon_voxel_size, phantom_dims, classes, sg_window, sg_order,
                  smooth, primary_full_resolution, density_mode, otsu_bins,
                  otsu_margin, filter, ncc_stop
    [run]         threads

Lengths are in cm, energies in keV, angles in degrees. ``spectrum`` and
``detector`` accept a file path or the name of a bundled table. ``classes``
lists the segmentation classes from lowest to highest attenuation, e.g.
``air, al:2.699, fe`` (``air``/``vacuum`` map to empty space; a missing
density means the material's reference density). Relative paths resolve
against the config file's directory.

Validation is total: all problems are collected and reported together.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path

from .correction import CorrectionConfig
from .errors import CtScatterError, ValidationError
from .geometry import ScanGeometry
from .physics_data import (
    MaterialLibrary,
    bundled_path,
    load_detector_response,
    load_spectrum,
)
from .postprocess import SgFilterSpec
from .transport import SimConfig

SECTIONS = {
    "paths": {"materials", "spectrum", "detector", "phantom", "raw", "flat", "output"},
    "geometry": {"sdd", "sod", "det_pixels", "pixel_pitch", "n_angles", "arc_deg"},
    "simulation": {"photons", "splitting", "roulette_survival", "roulette_threshold", "step_voxels",
                   "max_interactions", "seed", "chunks", "detector_weighting"},
    "correction": {"iterations", "every_kth_angle", "mc_resolution", "recon_dims", "recon_voxel_size",
                   "phantom_dims", "classes", "sg_window", "sg_order", "smooth", "primary_full_resolution",
                   "density_mode", "otsu_bins", "otsu_margin", "filter", "ncc_stop"},
    "run": {"threads"},
}

VACUUM_NAMES = {"air", "vacuum", "none"}


@dataclass
class RunConfig:
    source: str
    library: MaterialLibrary
    spectrum: object
    response: object
    geometry: ScanGeometry
    sim: SimConfig
    correction: CorrectionConfig | None
    threads: int
    phantom_path: Path | None
    raw_path: Path | None
    flat_path: Path | None
    output: Path


class _Collector:
    def __init__(self, parser, source):
        self.p = parser
        self.source = source
        self.errors = []

    def err(self, section, key, msg):
        self.errors.append(f"[{section}] {key}: {msg}")

    def raw(self, section, key, default=None):
        if self.p.has_option(section, key):
            val = self.p.get(section, key).strip()
            return val if val != "" else default
        return default

    def get(self, section, key, conv, default=None, required=False, check=None, what=""):
        val = self.raw(section, key)
        if val is None:
            if required:
                self.err(section, key, "missing required key")
            return default
        try:
            out = conv(val)
        except (ValueError, TypeError) as exc:
            self.err(section, key, f"cannot parse {val!r} ({exc})")
            return default
        if check is not None and not check(out):
            self.err(section, key, f"{val!r} is invalid: {what}")
            return default
        return out


def _ints(text):
    return tuple(int(x) for x in text.replace("x", ",").split(",") if x.strip())


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _bool(text):
    t = text.lower()
    if t in ("1", "yes", "true", "on"):
        return True
    if t in ("0", "no", "false", "off"):
        return False
    raise ValueError("expected yes/no")


def parse_classes(text, library):
    """``"air, al:2.699, fe"`` -> {0: (None, 0.0), 1: (Al, 2.699), 2: (Fe, 7.874)}."""
    out = {}
    for k, item in enumerate(x.strip() for x in text.split(",")):
        if not item:
            raise ValueError("empty class entry")
        name, _, dens = item.partition(":")
        name = name.strip()
        if name.lower() in VACUUM_NAMES:
            out[k] = (None, 0.0)
            continue
        mat = library[name]
        rho = float(dens) if dens.strip() else mat.density_ref
        if not rho > 0:
            raise ValueError(f"class {name!r} needs a positive density")
        out[k] = (mat, rho)
    return out


def _resolve(base, value, kind=None):
    """Path relative to the config file; bare names fall back to bundled tables."""
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if p.exists() or kind is None:
        return p
    name = value if value.endswith(".csv") else value + ".csv"
    return bundled_path(kind, name)


def load_config(path, overrides=None):
    """Parse and validate ``path``; ``overrides`` maps "section.key" to a string."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        if not parser.has_section(sec):
            parser.add_section(sec)
        parser.set(sec, key, str(value))
    return build_config(parser, path.parent, str(path))


def build_config(parser, base, source="<config>"):
    c = _Collector(parser, source)
    for sec in parser.sections():
        if sec not in SECTIONS:
            c.err(sec, "*", "unknown section")
            continue
        for key in parser.options(sec):
            if key not in SECTIONS[sec]:
                c.err(sec, key, "unknown key")

    # paths and tables
    lib = None
    mdir = c.raw("paths", "materials")
    try:
        lib = MaterialLibrary.from_directory(_resolve(base, mdir)) if mdir else MaterialLibrary.bundled()
        if mdir and not _resolve(base, mdir).is_dir():
            c.err("paths", "materials", f"directory {mdir!r} not found")
    except CtScatterError as exc:
        c.err("paths", "materials", str(exc))

    def table(key, kind, loader, default):
        val = c.raw("paths", key, default)
        try:
            return loader(_resolve(base, val, kind))
        except (CtScatterError, OSError) as exc:
            c.err("paths", key, str(exc))
            return None

    spectrum = table("spectrum", "spectra", load_spectrum, "w120kv_al2mm")
    response = table("detector", "detectors", load_detector_response, "gos_0208mm")

    def existing(key):
        val = c.raw("paths", key)
        if val is None:
            return None
        p = _resolve(base, val)
        if not p.exists():
            c.err("paths", key, f"file {val!r} not found")
        return p

    phantom = existing("phantom")
    raw = existing("raw")
    flat = existing("flat")
    output = _resolve(base, c.raw("paths", "output", "out"))

    # geometry
    pos = lambda x: x > 0  # noqa: E731
    sdd = c.get("geometry", "sdd", float, required=True, check=pos, what="must be > 0")
    sod = c.get("geometry", "sod", float, required=True, check=pos, what="must be > 0")
    dp = c.get("geometry", "det_pixels", _ints, required=True,
               check=lambda t: len(t) == 2 and min(t) >= 1, what="need 'nu, nv' >= 1")
    pitch = c.get("geometry", "pixel_pitch", _floats, required=True,
                  check=lambda t: len(t) in (1, 2) and min(t) > 0, what="need one or two positive values")
    na = c.get("geometry", "n_angles", int, required=True, check=lambda n: n >= 1, what="must be >= 1")
    arc = c.get("geometry", "arc_deg", float, 360.0, check=lambda a: 0 < a <= 360, what="must be in (0, 360]")
    geom = None
    if None not in (sdd, sod, dp, pitch, na, arc):
        try:
            geom = ScanGeometry.uniform(sdd, sod, dp, pitch if len(pitch) == 2 else pitch[0], na, math.radians(arc))
        except CtScatterError as exc:
            c.err("geometry", "*", str(exc))

    # simulation
    sim_kw = dict(
        photons_total=c.get("simulation", "photons", lambda s: int(float(s)), 100_000),
        splitting=c.get("simulation", "splitting", int, 10),
        roulette_survival=c.get("simulation", "roulette_survival", float, 0.5),
        roulette_threshold=c.get("simulation", "roulette_threshold", float, 1e-3),
        step_voxels=c.get("simulation", "step_voxels", int, 1),
        max_interactions=c.get("simulation", "max_interactions", int, 50),
        seed=c.get("simulation", "seed", int, 0, check=lambda s: 0 <= s < 2 ** 64, what="must fit in 64 bits"),
        n_chunks=c.get("simulation", "chunks", int, 16),
        detector_weighting=c.get("simulation", "detector_weighting", str, "energy"),
    )
    sim = None
    try:
        sim = SimConfig(**sim_kw)
    except CtScatterError as exc:
        c.err("simulation", "*", str(exc))

    # correction
    corr = None
    if parser.has_section("correction"):
        classes_txt = c.raw("correction", "classes")
        class_map = None
        if classes_txt is None:
            c.err("correction", "classes", "missing required key (class_map)")
        elif lib is not None:
            try:
                class_map = parse_classes(classes_txt, lib)
            except (CtScatterError, ValueError) as exc:
                c.err("correction", "classes", str(exc))
        dims = c.get("correction", "recon_dims", _ints, required=True,
                     check=lambda t: len(t) == 3 and min(t) >= 1, what="need 'nx, ny, nz'")
        rvs = c.get("correction", "recon_voxel_size", float, required=True, check=pos, what="must be > 0")
        sgw = c.get("correction", "sg_window", int)
        sgo = c.get("correction", "sg_order", int, 3)
        sg = None
        if sgw is not None:
            try:
                sg = SgFilterSpec(sgw, sgo)
            except CtScatterError as exc:
                c.err("correction", "sg_window", str(exc))
        kw = dict(
            n_iterations=c.get("correction", "iterations", int, 3),
            simulate_every_kth_angle=c.get("correction", "every_kth_angle", int, 1),
            mc_resolution=c.get("correction", "mc_resolution", _ints, None,
                                check=lambda t: len(t) == 2, what="need 'nu, nv'"),
            phantom_dims=c.get("correction", "phantom_dims", _ints, None,
                               check=lambda t: len(t) == 3, what="need 'nx, ny, nz'"),
            smooth=c.get("correction", "smooth", _bool, True),
            primary_full_resolution=c.get("correction", "primary_full_resolution", _bool, True),
            density_mode=c.get("correction", "density_mode", str, "class"),
            otsu_bins=c.get("correction", "otsu_bins", int, 1024, check=lambda n: n >= 8, what="must be >= 8"),
            otsu_margin=c.get("correction", "otsu_margin", float, 0.05,
                              check=lambda m: 0 <= m < 0.5, what="must be in [0, 0.5)"),
            filter_window=c.get("correction", "filter", str, "hann",
                                check=lambda s: s in ("hann", "ramp"), what="hann or ramp"),
            ncc_stop=c.get("correction", "ncc_stop", float, None),
        )
        if class_map is not None and dims is not None and rvs is not None and sim is not None:
            try:
                corr = CorrectionConfig(dims, rvs, class_map, sim=sim, sg=sg, **kw)
                if geom is not None:
                    corr.check_geometry(geom)
            except CtScatterError as exc:
                c.err("correction", "*", str(exc))

    threads = c.get("run", "threads", int, 1, check=lambda n: n >= 1, what="must be >= 1")
    if corr is not None:
        corr.workers = threads
    if c.errors:
        raise ValidationError(f"{source}: {len(c.errors)} configuration error(s):\n  " + "\n  ".join(c.errors))
    return RunConfig(source, lib, spectrum, response, geom, sim, corr, threads, phantom, raw, flat, output)
