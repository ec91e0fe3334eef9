"""Regenerate the bundled material, spectrum and detector-response tables.

Requires ``xraylib`` (not a runtime dependency). S(q), F(q) and photoelectric
cross sections come from xraylib's Hubbell-based tabulations; the integrated
incoherent and coherent cross sections are integrated here from the bundled
S/F tables so that the differential and integrated forms are consistent to
quadrature precision. Mass attenuation is the sum of the three partials.

    python tools/make_tables.py [--check]
"""

import argparse
import math
import sys
from pathlib import Path

import numpy as np
import xraylib as xrl

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from ctscatter import physics_data as pd  # noqa: E402
from ctscatter.constants import AVOGADRO, HC_KEV_ANGSTROM, MEC2_KEV, R0_SQ_BARN  # noqa: E402

DATA = ROOT / "src" / "ctscatter" / "data"

CEMENT_MASS_FRACTIONS = {  # Portland concrete
    1: 0.022100, 6: 0.002484, 8: 0.574930, 11: 0.015208, 12: 0.001266,
    13: 0.019953, 14: 0.304627, 19: 0.010045, 20: 0.042951, 26: 0.006435,
}
CEMENT_UNIT_MASS = 20.0  # g/mol per formula unit


def _cement_counts():
    return {z: w * CEMENT_UNIT_MASS / xrl.AtomicWeight(z) for z, w in CEMENT_MASS_FRACTIONS.items()}


MATERIALS = {
    "al": ("Aluminum", {13: 1.0}, 2.699, "Al"),
    "fe": ("Iron", {26: 1.0}, 7.874, "Fe"),
    "water": ("Water", {1: 2.0, 8: 1.0}, 1.0, "H2O"),
    "gos": ("Gadolinium oxysulfide", {64: 2.0, 8: 2.0, 16: 1.0}, 7.34, "Gd2O2S"),
    "cement": ("Cement surrogate", _cement_counts(), 2.3, "Portland concrete, 20 g/mol formula unit"),
}

SHELLS = [xrl.K_SHELL, xrl.L1_SHELL, xrl.L2_SHELL, xrl.L3_SHELL,
          xrl.M1_SHELL, xrl.M2_SHELL, xrl.M3_SHELL, xrl.M4_SHELL, xrl.M5_SHELL]
Q_GRID = np.concatenate([[0.0], np.logspace(-3, 2, 81)])
BASE_ENERGIES = np.logspace(0, 3, 61)
EDGE_EPS = 1e-5


def energy_grid(counts):
    edges = []
    for z in counts:
        for shell in SHELLS:
            try:
                e = xrl.EdgeEnergy(z, shell)
            except ValueError:
                continue
            if 1.0 * (1 + 2 * EDGE_EPS) < e < 1000.0 * (1 - 2 * EDGE_EPS):
                edges.append(e)
    grid = [e for e in BASE_ENERGIES if all(abs(e / ed - 1) > 2e-3 for ed in edges)]
    for ed in edges:
        grid += [ed * (1 - EDGE_EPS), ed * (1 + EDGE_EPS)]
    return np.array(sorted(set(grid)))


def photo_barn(counts, e):
    total = 0.0
    for z, n in counts.items():
        try:
            total += n * xrl.CSb_Photo(z, e)
        except ValueError:
            pass
    return total


def form_factors(counts):
    s = np.zeros_like(Q_GRID)
    f = np.zeros_like(Q_GRID)
    for z, n in counts.items():
        s[1:] += n * np.array([xrl.SF_Compt(z, q) for q in Q_GRID[1:]])
        f += n * np.array([xrl.FF_Rayl(z, q) for q in Q_GRID])
    f[0] = sum(n * z for z, n in counts.items())
    s = np.minimum(s, f[0])
    s = np.maximum.accumulate(s)
    f = np.minimum.accumulate(np.maximum(f, 0.0))
    return s, f


_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


def integrated(mat, e):
    """(sigma_incoh, sigma_coh) in barns, Gauss-Legendre per q-knot segment in cos(theta)."""
    qmax = e / HC_KEV_ANGSTROM
    cuts = [1.0]
    for q in Q_GRID[1:]:
        if q < qmax:
            cuts.append(1.0 - 2.0 * (q / qmax) ** 2)
    cuts.append(-1.0)
    a = e / MEC2_KEV
    inc = coh = 0.0
    for hi, lo in zip(cuts[:-1], cuts[1:]):
        mu = 0.5 * (hi - lo) * _GL_X + 0.5 * (hi + lo)
        w = 0.5 * (hi - lo) * _GL_W
        q = np.sqrt(np.clip((1 - mu) / 2, 0, None)) * qmax
        r = 1.0 / (1.0 + a * (1 - mu))
        s = np.array([pd.form_factor_S(mat, x) for x in q])
        f = np.array([pd.form_factor_F(mat, x) for x in q])
        inc += np.sum(w * 0.5 * r * r * (r + 1 / r - (1 - mu * mu)) * s)
        coh += np.sum(w * 0.5 * (1 + mu * mu) * f * f)
    return 2 * math.pi * R0_SQ_BARN * inc, 2 * math.pi * R0_SQ_BARN * coh


def build(key):
    name, counts, rho, note = MATERIALS[key]
    z_eff = float(sum(n * z for z, n in counts.items()))
    molar = sum(n * xrl.AtomicWeight(z) for z, n in counts.items())
    energies = energy_grid(counts)
    s, f = form_factors(counts)
    stub = pd.Table(energies, np.ones_like(energies))
    proto = pd.Material(name, z_eff, rho, stub, stub, stub, stub, pd.Table(Q_GRID, s), pd.Table(Q_GRID, f))
    pe = np.array([photo_barn(counts, e) for e in energies])
    inc, coh = np.array([integrated(proto, e) for e in energies]).T
    mu = (pe + inc + coh) * 1e-24 * AVOGADRO / molar
    mat = pd.Material(name, z_eff, rho, pd.Table(energies, mu), pd.Table(energies, inc),
                      pd.Table(energies, coh), pd.Table(energies, pe), proto.S, proto.F).validate()
    header = (
        f"# {name} ({note}); cross sections per formula unit, molar mass {molar:.6g} g/mol\n"
        "# S(q), F(q), photoelectric: xraylib (Hubbell et al. tabulations), summed over atoms\n"
        "# incoherent/coherent: integrated from the S/F tables below; mu = sum of partials\n"
        "# q = sin(theta/2) / lambda  [1/Angstrom]\n"
    )
    (DATA / "materials" / f"{key}.mat").write_text(header + pd.dump_material(mat), encoding="utf-8")
    return mat, counts


def kramers_spectrum(kvp, al_mm, step=2.0):
    """Kramers' thick-target spectrum through 0.5 mm Be and ``al_mm`` Al."""
    e = np.arange(step, kvp, step) + 0.0
    w = (kvp - e) / e
    be = 1.848 * 0.05 * np.array([xrl.CS_Total(4, x) for x in e])
    al = 2.699 * al_mm / 10 * np.array([xrl.CS_Total(13, x) for x in e])
    w *= np.exp(-be - al)
    keep = w > 1e-6 * w.max()
    return pd.Spectrum(e[keep], w[keep] / w[keep].sum())


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--check", action="store_true", help="print comparison against xraylib totals")
    args = ap.parse_args()
    for key in MATERIALS:
        mat, counts = build(key)
        if args.check:
            molar = sum(n * xrl.AtomicWeight(z) for z, n in counts.items())
            for e in (20.0, 60.0, 100.0, 200.0, 500.0):
                ref = sum(n * xrl.AtomicWeight(z) * xrl.CS_Total(z, e) for z, n in counts.items()) / molar
                inc_ref = sum(n * xrl.CSb_Compt(z, e) for z, n in counts.items())
                print(f"{key:7s} {e:6.0f} keV  mu={pd.mass_mu_at(mat, e):.5g} xrl={ref:.5g}  "
                      f"inc={pd.cross_section(mat, 'incoherent', e):.5g} xrl={inc_ref:.5g}")
    pd.save_spectrum(kramers_spectrum(200.0, 1.0), DATA / "spectra" / "w200kv_al1mm.csv")
    pd.save_spectrum(kramers_spectrum(120.0, 2.0), DATA / "spectra" / "w120kv_al2mm.csv")
    pd.save_spectrum(pd.Spectrum.monochromatic(100.0), DATA / "spectra" / "mono100kev.csv")
    gos = pd.load_material(DATA / "materials" / "gos.mat")
    resp = pd.analytic_detector_response(gos, 0.0208)
    pd.save_detector_response(resp, DATA / "detectors" / "gos_0208mm.csv")


if __name__ == "__main__":
    main()
