"""Command-line interface: ``ctscatter <command> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import phantoms
from .config import load_config
from .correction import run_iterative_correction, table_rows, write_reports, write_table
from .errors import CtScatterError, ValidationError
from .geometry import load_phantom, read_phantom_header, save_phantom
from .metrics import RoiSpec, cnr, mse, ncc, profile_line
from .physics_data import (
    MaterialLibrary,
    load_detector_response,
    load_material,
    load_spectrum,
)
from .recon import Volume, export_slice, fbp_reconstruct, intensity_to_attenuation, read_volume_header
from .transport import ProjectionStack, flat_field, read_projection_header, run_scan

log = logging.getLogger("ctscatter")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValidationError):
    pass


def parse_angles(text, n_angles):
    """'all', '0,5,9' or slice syntax 'start:stop[:step]' -> sorted unique indices."""
    text = (text or "").strip()
    if not text:
        raise UsageError("--angles is empty")
    if text == "all":
        return np.arange(n_angles)
    idx = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            bits = [int(b) if b.strip() else None for b in part.split(":")]
            idx.extend(range(n_angles)[slice(*bits)])
        else:
            idx.append(int(part))
    if not idx:
        raise UsageError(f"--angles {text!r} selects no projections")
    bad = [i for i in idx if not 0 <= i < n_angles]
    if bad:
        raise UsageError(f"angle indices {bad} outside 0..{n_angles - 1}")
    return np.array(sorted(set(idx)))


def _overrides(args):
    out = {}
    for item in getattr(args, "set", None) or []:
        key, eq, val = item.partition("=")
        if not eq or "." not in key:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = val.strip()
    if getattr(args, "seed", None) is not None:
        out["simulation.seed"] = str(args.seed)
    if getattr(args, "threads", None) is not None:
        out["run.threads"] = str(args.threads)
    if getattr(args, "output", None) is not None:
        out["paths.output"] = str(Path(args.output).resolve())
    return out


def _ints(text):
    return tuple(int(x) for x in text.split(","))


def cmd_simulate(args):
    cfg = load_config(args.config, _overrides(args))
    if cfg.phantom_path is None:
        raise ValidationError("[paths] phantom is required for simulate")
    idx = parse_angles(args.angles, cfg.geometry.n_angles)
    ph = load_phantom(cfg.phantom_path, cfg.library)
    print(f"seed={cfg.sim.seed} threads={cfg.threads}")
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    res = run_scan(ph, cfg.geometry, cfg.spectrum, cfg.response, cfg.sim, idx, cfg.threads, args.what)
    written = []
    if res.primary is not None:
        res.primary.save(out / "primary.xprj")
        written.append("primary.xprj")
    if res.scatter is not None:
        res.scatter.save(out / "scatter.xprj")
        written.append("scatter.xprj")
    if res.primary is not None and res.scatter is not None:
        ProjectionStack(res.primary.values + res.scatter.values, res.primary.angles).save(out / "total.xprj")
        written.append("total.xprj")
    ff = flat_field(cfg.geometry, cfg.spectrum, cfg.response, cfg.sim)
    ProjectionStack(ff.values[None], [0.0]).save(out / "flat.xprj")
    written.append("flat.xprj")
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle_index", "angle_deg", "mc_seconds", "primary_seconds"])
        for i in res.angle_indices:
            w.writerow([int(i), f"{np.degrees(cfg.geometry.angles[i]):.6f}",
                        f"{res.mc_seconds.get(int(i), 0.0):.6f}", f"{res.primary_seconds.get(int(i), 0.0):.6f}"])
    n = len(res.angle_indices)
    mc = sum(res.mc_seconds.values())
    print(f"simulated {n} projections in {res.wall_seconds:.2f} s wall "
          f"(MC {mc / n if res.mc_seconds else 0.0:.3f} s/projection); wrote {', '.join(written)}, timing.csv to {out}")
    return EXIT_OK


def _load_stack(path):
    return ProjectionStack.load(path)


def _flat_from(path):
    st = ProjectionStack.load(path)
    return st.values[0]


def cmd_reconstruct(args):
    cfg = load_config(args.config, _overrides(args))
    stack = _load_stack(args.input)
    if args.flat:
        stack = intensity_to_attenuation(stack, _flat_from(args.flat))
    elif not args.line_integrals:
        ff = flat_field(cfg.geometry, cfg.spectrum, cfg.response, cfg.sim)
        stack = intensity_to_attenuation(stack, ff)
    dims = _ints(args.dims) if args.dims else (cfg.correction.recon_dims if cfg.correction else None)
    vs = args.voxel_size or (cfg.correction.recon_voxel_size if cfg.correction else None)
    if dims is None:
        raise ValidationError("--dims is required without a [correction] section")
    vol = fbp_reconstruct(stack, cfg.geometry, dims, vs, args.filter, cfg.threads)
    vol.save(args.volume)
    print(f"wrote {args.volume} dims={vol.dims} voxel_size={vol.voxel_size[0]:.6g} cm")
    if args.slice:
        k = vol.dims[args.axis] // 2 if args.index is None else args.index
        export_slice(np.take(vol.values, k, axis=args.axis), args.slice)
        print(f"wrote slice axis={args.axis} index={k} to {args.slice}")
    return EXIT_OK


def cmd_correct(args):
    cfg = load_config(args.config, _overrides(args))
    if cfg.correction is None:
        raise ValidationError("[correction] section is required for correct")
    if cfg.raw_path is None:
        raise ValidationError("[paths] raw (measured intensity stack) is required for correct")
    print(f"seed={cfg.sim.seed} threads={cfg.threads}")
    raw = ProjectionStack.load(cfg.raw_path)
    if raw.n_angles != cfg.geometry.n_angles or not np.allclose(raw.angles, cfg.geometry.angles, atol=1e-9):
        raise ValidationError("raw stack angles do not match [geometry]")
    flat = _flat_from(cfg.flat_path) if cfg.flat_path else flat_field(cfg.geometry, cfg.spectrum, cfg.response, cfg.sim).values
    ref = Volume.load(args.reference) if args.reference else None
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)

    def report(it, vol, c):
        if ref is not None:
            print(f"iteration {it}: ncc_vs_reference={ncc(vol.values, ref.values):.6f} "
                  f"mse_vs_reference={mse(vol.values, ref.values):.6g}")

    vol, c, reports = run_iterative_correction(raw, flat, cfg.geometry, cfg.spectrum, cfg.response,
                                               cfg.correction, callback=report)
    vol.save(out / "corrected.xvol")
    c.save(out / "corrected.xprj")
    write_reports(reports, out / "reports.txt")
    write_table([("run", table_rows(cfg.geometry.n_angles, cfg.sim, reports))], out / "summary.csv")
    for r in reports:
        print(r.to_line())
    print(f"wrote corrected.xvol, corrected.xprj, reports.txt, summary.csv to {out}")
    return EXIT_OK


def cmd_phantom(args):
    lib = MaterialLibrary.from_directory(args.materials) if args.materials else MaterialLibrary.bundled()
    dims = _ints(args.dims)
    if len(dims) != 3:
        raise ValidationError("--dims needs nx,ny,nz")
    vs = args.voxel_size
    kind = args.kind
    if kind == "cylinder":
        ph = phantoms.cylinder(dims, vs, args.radius, lib[args.material or "water"], height=args.height)
    elif kind == "cube":
        ph = phantoms.cube(dims, vs, args.side if args.side is not None else args.radius, lib[args.material or "water"])
    elif kind == "rods":
        ph = phantoms.rods(dims, vs, args.radius, lib[args.material or "cement"], lib[args.insert or "fe"],
                           n_rods=args.n_rods, rod_radius=args.rod_radius, ring_radius=args.ring_radius,
                           height=args.height)
    elif kind == "cylinder-head-like":
        ph = phantoms.cylinder_head_like(dims, vs, args.radius, lib[args.material or "al"],
                                         lib[args.insert or "fe"], height=args.height)
    else:
        ph = phantoms.two_material(dims, vs, args.radius, lib[args.material or "al"], lib[args.insert or "fe"],
                                   insert_radius=args.rod_radius, height=args.height)
    save_phantom(ph, args.output)
    counts = {ph.material_names.get(i, str(i)): int(np.sum(ph.material_id == i)) for i in ph.material_table}
    print(f"wrote {args.output} kind={kind} dims={ph.dims} voxels per material: {counts}")
    return EXIT_OK


def _load_array(path, image=0):
    p = Path(path)
    with open(p, "rb") as fh:
        magic = fh.read(5)
    if magic == b"XVOL1":
        return Volume.load(p).values.astype(float)
    if magic == b"XPRJ1":
        return ProjectionStack.load(p).values[image]
    if p.suffix.lower() == ".csv":
        return np.loadtxt(p, delimiter=",", ndmin=2)
    raise ValidationError(f"{path}: expected an XVOL1/XPRJ1 file or a CSV image")


def _rect(text):
    r = _ints(text)
    if len(r) != 4:
        raise ValidationError(f"rectangle {text!r} needs row,col,height,width")
    return r


def cmd_metrics(args):
    a = _load_array(args.a, args.image)
    b = _load_array(args.b, args.image)
    rows = [("MSE", mse(a, b)), ("NCC", ncc(a, b))]
    sa, sb = a, b
    if a.ndim == 3:
        k = a.shape[args.axis] // 2 if args.index is None else args.index
        sa, sb = np.take(a, k, axis=args.axis), np.take(b, k, axis=args.axis)
    if args.roi:
        if not args.background:
            raise ValidationError("--roi needs --background")
        roi = RoiSpec(_rect(args.roi), _rect(args.background))
        rows += [("CNR_a", cnr(sa, roi)), ("CNR_b", cnr(sb, roi))]
    out = open(args.csv, "w", newline="") if args.csv else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, f"{v:.12g}"])
    finally:
        if args.csv:
            out.close()
    if args.profile_rows:
        r0, r1 = _ints(args.profile_rows)
        pa, pb = profile_line(sa, (r0, r1)), profile_line(sb, (r0, r1))
        with open(args.profile_csv or "profile.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["column", "a", "b"])
            for i, (x, y) in enumerate(zip(pa, pb)):
                w.writerow([i, f"{x:.9g}", f"{y:.9g}"])
    return EXIT_OK


def cmd_inspect(args):
    p = Path(args.file)
    if not p.exists():
        raise ValidationError(f"{p}: no such file")
    with open(p, "rb") as fh:
        magic = fh.read(5)
    if magic == b"XVOX1":
        h = read_phantom_header(p)
        print(f"XVOX1 phantom dims={h['dims']} voxel_size={h['voxel_size']} origin={h['origin']}")
        for i, n in sorted(h["materials"].items()):
            print(f"  material {i}: {n}")
    elif magic == b"XPRJ1":
        h = read_projection_header(p)
        a = np.degrees(h["angles"])
        span = f"{a[0]:.3f}..{a[-1]:.3f} deg" if len(a) else "none"
        print(f"XPRJ1 stack nu={h['nu']} nv={h['nv']} n_angles={h['n_angles']} angles {span}")
    elif magic == b"XVOL1":
        h = read_volume_header(p)
        print(f"XVOL1 volume dims={h['dims']} voxel_size={h['voxel_size']}")
    elif p.suffix == ".mat":
        m = load_material(p)
        lo, hi = m.energy_range
        print(f"material {m.name!r} z_eff={m.z_eff:g} density={m.density_ref:g} g/cm3 energy {lo:g}..{hi:g} keV")
    elif p.suffix == ".csv":
        head = p.read_text(encoding="utf-8").lstrip().split("\n", 1)[0]
        if "dqe" in head:
            r = load_detector_response(p)
            print(f"detector response {len(r.energies)} knots {r.energies[0]:g}..{r.energies[-1]:g} keV")
        else:
            s = load_spectrum(p)
            print(f"spectrum {s.n_bins} bins {s.energies[0]:g}..{s.energies[-1]:g} keV "
                  f"mean {np.average(s.energies, weights=s.weights):.2f} keV")
    else:
        raise ValidationError(f"{p}: unrecognised file type")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="ctscatter", description="Monte Carlo scatter simulation and correction for cone-beam CT")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seeded=True):
        p.add_argument("config", help="run configuration (INI)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        p.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
        p.add_argument("--output", help="output directory (overrides [paths] output)")
        if seeded:
            p.add_argument("--seed", type=int, help="random seed (overrides [simulation] seed)")

    p = sub.add_parser("simulate", help="simulate primary and/or scatter projections")
    common(p)
    p.add_argument("--angles", default="all", help="'all', '0,4,8' or 'start:stop:step'")
    p.add_argument("--what", choices=("primary", "scatter", "both"), default="both")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="FDK reconstruction of a projection stack")
    common(p, seeded=False)
    p.add_argument("--input", required=True, help="XPRJ1 stack (intensities unless --line-integrals)")
    p.add_argument("--flat", help="XPRJ1 flat field (default: simulated)")
    p.add_argument("--line-integrals", action="store_true", help="input already holds ln(I0/I)")
    p.add_argument("--dims", help="nx,ny,nz")
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--filter", choices=("hann", "ramp"), default="hann")
    p.add_argument("--volume", required=True, help="output XVOL1 file")
    p.add_argument("--slice", help="also export a slice (.pgm or .csv)")
    p.add_argument("--axis", type=int, default=2)
    p.add_argument("--index", type=int)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("correct", help="iterative scatter correction of [paths] raw")
    common(p)
    p.add_argument("--reference", help="XVOL1 reference volume for per-iteration NCC/MSE")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("phantom", help="write a synthetic XVOX1 phantom")
    p.add_argument("kind", choices=sorted(phantoms.GENERATORS))
    p.add_argument("--dims", default="64,64,64")
    p.add_argument("--voxel-size", type=float, default=0.15, help="cm")
    p.add_argument("--radius", type=float, default=3.5, help="cm (cube: side if --side absent)")
    p.add_argument("--side", type=float)
    p.add_argument("--height", type=float)
    p.add_argument("--material", help="body/matrix material")
    p.add_argument("--insert", help="insert/rod material")
    p.add_argument("--n-rods", type=int, default=8)
    p.add_argument("--rod-radius", type=float)
    p.add_argument("--ring-radius", type=float)
    p.add_argument("--materials", help="directory of .mat files (default: bundled)")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("metrics", help="MSE / NCC / CNR between two volumes or images")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--image", type=int, default=0, help="projection index for XPRJ1 inputs")
    p.add_argument("--axis", type=int, default=2, help="slice axis for CNR/profiles on volumes")
    p.add_argument("--index", type=int, help="slice index (default: central)")
    p.add_argument("--roi", help="row,col,height,width")
    p.add_argument("--background", help="row,col,height,width")
    p.add_argument("--profile-rows", help="r0,r1: write the column profile averaged over rows r0..r1-1")
    p.add_argument("--profile-csv")
    p.add_argument("--csv", help="write metrics here instead of stdout")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("inspect", help="print the header of a data file")
    p.add_argument("file")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ctscatter {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValidationError, OSError) as exc:
        print(f"ctscatter {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CtScatterError, RuntimeError, ArithmeticError, MemoryError) as exc:
        print(f"ctscatter {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
