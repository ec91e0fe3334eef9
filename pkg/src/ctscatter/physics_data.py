"""Material cross-section tables, form factors, spectra and detector response.

Material tables are read from plain-text files with a small header and six
two-column sections. Attenuation and integrated cross sections are
interpolated log-log; the incoherent scattering function S(q) and the atomic
form factor F(q) are interpolated linearly in q. No table is ever
extrapolated in energy.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numba as nb
import numpy as np

from .constants import MAX_ENERGY_KEV, MIN_ENERGY_KEV
from .errors import DomainError, EnergyRangeError, TableParseError, ValidationError

SECTIONS = ("mu", "incoherent", "coherent", "photoelectric", "S", "F")
_HEADER_KEYS = ("name", "z_eff", "density")


# ---------------------------------------------------------------------------
# interpolation kernels (shared by the Python API and the transport kernels)


@nb.njit(cache=True, nogil=True)
def loglog_interp(xs, ys, n, x):
    """Log-log interpolation on the first ``n`` knots; exact at knots.

    Segments with a non-positive end point fall back to linear interpolation.
    The caller guarantees ``xs[0] <= x <= xs[n-1]``.
    """
    i = np.searchsorted(xs[:n], x, side="right") - 1
    if i < 0:
        i = 0
    if i >= n - 1:
        return ys[n - 1]
    x0 = xs[i]
    if x == x0:
        return ys[i]
    x1 = xs[i + 1]
    y0 = ys[i]
    y1 = ys[i + 1]
    if y0 <= 0.0 or y1 <= 0.0:
        return y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    t = math.log(x / x0) / math.log(x1 / x0)
    return math.exp(math.log(y0) + t * math.log(y1 / y0))


@nb.njit(cache=True, nogil=True)
def linear_interp(xs, ys, n, x, beyond):
    """Linear interpolation on ``n`` knots; ``beyond`` is returned past the last knot."""
    if x > xs[n - 1]:
        return beyond
    i = np.searchsorted(xs[:n], x, side="right") - 1
    if i < 0:
        return ys[0]
    if i >= n - 1:
        return ys[n - 1]
    x0 = xs[i]
    if x == x0:
        return ys[i]
    return ys[i] + (ys[i + 1] - ys[i]) * (x - x0) / (xs[i + 1] - x0)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Table:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return len(self.x)

    def __eq__(self, other):
        if not isinstance(other, Table):
            return NotImplemented
        return np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Material:
    """Tabulated photon interaction data for one material.

    Integrated cross sections are in barns per formula unit; ``z_eff`` is the
    number of electrons per formula unit, i.e. the large-q limit of S and the
    q=0 value of F. ``mu`` holds mass attenuation coefficients in cm^2/g.
    """

    name: str
    z_eff: float
    density_ref: float
    mu: Table
    incoherent: Table
    coherent: Table
    photoelectric: Table
    S: Table
    F: Table

    @property
    def energy_range(self):
        return float(self.mu.x[0]), float(self.mu.x[-1])

    def validate(self):
        """Raise ValidationError naming the first violated invariant."""
        if not self.z_eff > 0:
            raise ValidationError(f"{self.name}: z_eff must be positive")
        if not self.density_ref > 0:
            raise ValidationError(f"{self.name}: density must be positive")
        for key in SECTIONS:
            tab = getattr(self, _attr(key))
            if len(tab) < 2:
                raise ValidationError(f"{self.name}: section [{key}] needs at least 2 rows")
            if not (np.all(np.isfinite(tab.x)) and np.all(np.isfinite(tab.y))):
                raise ValidationError(f"{self.name}: section [{key}] has non-finite values")
            if np.any(np.diff(tab.x) <= 0):
                raise ValidationError(f"{self.name}: section [{key}] has non-monotone abscissa")
            if np.any(tab.y < 0):
                raise ValidationError(f"{self.name}: section [{key}] has negative values")
        if np.any(self.mu.y <= 0):
            raise ValidationError(f"{self.name}: [mu] must be strictly positive")
        lo, hi = self.energy_range
        for key in ("incoherent", "coherent", "photoelectric"):
            tab = getattr(self, key)
            if tab.x[0] > lo or tab.x[-1] < hi:
                raise ValidationError(f"{self.name}: [{key}] does not cover the [mu] energy range")
        z = self.z_eff
        tol = 1e-6 * z
        if self.S.x[0] != 0.0 or abs(self.S.y[0]) > tol:
            raise ValidationError(f"{self.name}: [S] must start at q=0 with S=0")
        if np.any(np.diff(self.S.y) < 0):
            raise ValidationError(f"{self.name}: [S] must be non-decreasing in q")
        if np.any(self.S.y > z + tol) or self.S.y[-1] < 0.9 * z:
            raise ValidationError(f"{self.name}: [S] must approach z_eff from below")
        if self.F.x[0] != 0.0 or abs(self.F.y[0] - z) > tol:
            raise ValidationError(f"{self.name}: [F] must start at q=0 with F=z_eff")
        if np.any(np.diff(self.F.y) > 0):
            raise ValidationError(f"{self.name}: [F] must be non-increasing in q")
        return self


def _attr(section):
    return {"mu": "mu", "S": "S", "F": "F"}.get(section, section)


@dataclass(frozen=True, eq=False)
class Spectrum:
    energies: np.ndarray  # keV, bin centres
    weights: np.ndarray  # relative fluence per bin

    def __post_init__(self):
        e = np.ascontiguousarray(self.energies, dtype=np.float64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "weights", w)
        if e.ndim != 1 or e.shape != w.shape or len(e) == 0:
            raise ValidationError("spectrum needs matching, non-empty energy and weight columns")
        if np.any(np.diff(e) <= 0):
            raise ValidationError("spectrum energies must be strictly increasing")
        if np.any(w < 0) or not np.any(w > 0):
            raise ValidationError("spectrum weights must be >= 0 with at least one positive")
        if e[0] < MIN_ENERGY_KEV or e[-1] > MAX_ENERGY_KEV:
            raise ValidationError("spectrum energies must lie within [1 keV, 1 MeV]")

    @property
    def n_bins(self):
        return len(self.energies)

    @property
    def e_max(self):
        return float(self.energies[-1])

    @classmethod
    def monochromatic(cls, energy_kev, weight=1.0):
        return cls(np.array([energy_kev]), np.array([weight]))


@dataclass(frozen=True, eq=False)
class DetectorResponse:
    """Absorption probability and mean deposited energy per incident photon."""

    energies: np.ndarray
    dqe: np.ndarray
    deposit: np.ndarray

    def __post_init__(self):
        e = np.ascontiguousarray(self.energies, dtype=np.float64)
        q = np.ascontiguousarray(self.dqe, dtype=np.float64)
        d = np.ascontiguousarray(self.deposit, dtype=np.float64)
        for name, v in (("energies", e), ("dqe", q), ("deposit", d)):
            object.__setattr__(self, name, v)
        if len(e) == 0:
            raise ValidationError("detector response energy grid is empty")
        if e.shape != q.shape or e.shape != d.shape:
            raise ValidationError("detector response columns differ in length")
        if np.any(np.diff(e) <= 0):
            raise ValidationError("detector response energies must be strictly increasing")
        if np.any(q < 0) or np.any(q > 1):
            raise ValidationError("dqe must lie in [0, 1]")
        if np.any(d < 0) or np.any(d > e * (1 + 1e-12)):
            raise ValidationError("deposited energy must satisfy 0 <= deposit(E) <= E")

    def _check(self, energy):
        if energy < self.energies[0] or energy > self.energies[-1]:
            raise EnergyRangeError(
                f"{energy} keV outside detector response range "
                f"[{self.energies[0]}, {self.energies[-1]}]"
            )

    def dqe_at(self, energy):
        self._check(energy)
        return float(np.interp(energy, self.energies, self.dqe))

    def deposit_at(self, energy):
        self._check(energy)
        return float(np.interp(energy, self.energies, self.deposit))

    def signal_table(self, mode="energy"):
        """Per-photon detector signal used in place of eta(E) by the estimators.

        ``"energy"`` scores the mean deposited energy (keV per incident
        photon); ``"counting"`` scores the absorption probability.
        """
        if mode == "energy":
            return self.energies, self.deposit
        if mode == "counting":
            return self.energies, self.dqe
        raise ValidationError(f"unknown detector weighting {mode!r}")

    @classmethod
    def ideal(cls, e_min=MIN_ENERGY_KEV, e_max=MAX_ENERGY_KEV):
        """A perfectly absorbing detector (dqe 1, full deposit)."""
        e = np.array([e_min, e_max], dtype=float)
        return cls(e, np.ones(2), e.copy())


# ---------------------------------------------------------------------------
# material files


def _parse_float(tok, source, lineno):
    try:
        return float(tok)
    except ValueError:
        raise TableParseError(source, lineno, f"cannot parse number {tok!r}") from None


def parse_material(text, source="<string>", validate=True):
    header = {}
    rows = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise TableParseError(source, lineno, f"malformed section header {line!r}")
            current = line[1:-1].strip()
            if current not in SECTIONS:
                raise TableParseError(source, lineno, f"unknown section [{current}]")
            if current in rows:
                raise TableParseError(source, lineno, f"duplicate section [{current}]")
            rows[current] = []
            continue
        if current is None:
            if "=" not in line:
                raise TableParseError(source, lineno, "expected key=value header line")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in _HEADER_KEYS:
                raise TableParseError(source, lineno, f"unknown header key {key!r}")
            header[key] = val
            continue
        parts = line.split()
        if len(parts) != 2:
            raise TableParseError(source, lineno, f"expected 2 columns, got {len(parts)}")
        rows[current].append((_parse_float(parts[0], source, lineno), _parse_float(parts[1], source, lineno)))

    nlines = len(text.splitlines())
    for key in _HEADER_KEYS:
        if key not in header:
            raise TableParseError(source, nlines, f"missing header key {key}=")
    for sec in SECTIONS:
        if sec not in rows:
            raise TableParseError(source, nlines, f"missing section [{sec}]")

    tables = {}
    for sec in SECTIONS:
        arr = np.array(rows[sec], dtype=np.float64).reshape(-1, 2)
        tables[_attr(sec)] = Table(arr[:, 0], arr[:, 1])
    mat = Material(
        name=header["name"],
        z_eff=_parse_float(header["z_eff"], source, 0),
        density_ref=_parse_float(header["density"], source, 0),
        **tables,
    )
    if validate:
        try:
            mat.validate()
        except ValidationError as exc:
            raise ValidationError(f"{source}: {exc}") from None
    return mat


def load_material(path):
    path = Path(path)
    return parse_material(path.read_text(encoding="utf-8"), source=path)


def dump_material(mat):
    out = io.StringIO()
    out.write(f"name={mat.name}\nz_eff={mat.z_eff!r}\ndensity={mat.density_ref!r}\n")
    for sec in SECTIONS:
        tab = getattr(mat, _attr(sec))
        out.write(f"[{sec}]\n")
        for x, y in zip(tab.x, tab.y):
            out.write(f"{float(x)!r} {float(y)!r}\n")
    return out.getvalue()


def save_material(mat, path):
    Path(path).write_text(dump_material(mat), encoding="utf-8")


def bundled_material_names():
    root = resources.files("ctscatter") / "data" / "materials"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".mat"))


def bundled_material(name):
    """Load one of the bundled tables (al, fe, water, gos, cement)."""
    res = resources.files("ctscatter") / "data" / "materials" / f"{name}.mat"
    if not res.is_file():
        raise ValidationError(f"no bundled material {name!r}; have {bundled_material_names()}")
    return parse_material(res.read_text(encoding="utf-8"), source=f"<bundled:{name}>")


# ---------------------------------------------------------------------------
# lookups


def _check_energy(mat, energy, tab=None):
    tab = tab if tab is not None else mat.mu
    if not (tab.x[0] <= energy <= tab.x[-1]):
        raise EnergyRangeError(
            f"{mat.name}: {energy} keV outside table range [{tab.x[0]}, {tab.x[-1]}]"
        )


def mass_mu_at(mat, energy):
    _check_energy(mat, energy)
    return loglog_interp(mat.mu.x, mat.mu.y, len(mat.mu), float(energy))


def mu_at(mat, energy, density):
    """Linear attenuation coefficient [1/cm] at ``energy`` keV and ``density`` g/cm^3."""
    if density < 0:
        raise DomainError("density must be non-negative")
    return mass_mu_at(mat, energy) * density


def cross_section(mat, kind, energy):
    """Integrated cross section [barn / formula unit]; kind is incoherent, coherent or photoelectric."""
    tab = getattr(mat, kind)
    _check_energy(mat, energy, tab)
    return loglog_interp(tab.x, tab.y, len(tab), float(energy))


def form_factor_S(mat, q):
    if q < 0:
        raise DomainError("momentum transfer q must be >= 0")
    return linear_interp(mat.S.x, mat.S.y, len(mat.S), float(q), float(mat.z_eff))


def form_factor_F(mat, q):
    if q < 0:
        raise DomainError("momentum transfer q must be >= 0")
    return linear_interp(mat.F.x, mat.F.y, len(mat.F), float(q), float(mat.F.y[-1]))


# ---------------------------------------------------------------------------
# spectra and detector response files


def _read_csv_rows(text, ncols, source):
    rows = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        if len(row) != ncols:
            raise TableParseError(source, lineno, f"expected {ncols} columns, got {len(row)}")
        try:
            rows.append([float(c) for c in row])
        except ValueError:
            if not rows:  # header row
                continue
            raise TableParseError(source, lineno, f"non-numeric row {row!r}") from None
    if not rows:
        raise TableParseError(source, 0, "no data rows")
    return np.array(rows, dtype=np.float64)


def load_spectrum(path):
    path = Path(path)
    arr = _read_csv_rows(path.read_text(encoding="utf-8"), 2, path)
    return Spectrum(arr[:, 0], arr[:, 1])


def save_spectrum(spec, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["energy_kev", "weight"])
        for e, wt in zip(spec.energies, spec.weights):
            w.writerow([repr(float(e)), repr(float(wt))])


def load_detector_response(path):
    path = Path(path)
    arr = _read_csv_rows(path.read_text(encoding="utf-8"), 3, path)
    return DetectorResponse(arr[:, 0], arr[:, 1], arr[:, 2])


def save_detector_response(resp, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["energy_kev", "dqe", "deposit_kev"])
        for row in zip(resp.energies, resp.dqe, resp.deposit):
            w.writerow([repr(float(v)) for v in row])


def bundled_path(kind, name):
    """Filesystem path of a bundled data file (kind: materials, spectra, detectors)."""
    res = resources.files("ctscatter") / "data" / kind / name
    if not res.is_file():
        raise ValidationError(f"no bundled {kind} file {name!r}")
    return Path(str(res))


def analytic_detector_response(scintillator, thickness, energies=None, density=None):
    """Single-layer absorption model: dqe = 1 - exp(-mu t), deposit = E * dqe.

    ``energies`` defaults to the scintillator's attenuation knots.
    """
    if not thickness > 0:
        raise DomainError("scintillator thickness must be positive")
    if energies is None:
        energies = scintillator.mu.x
    energies = np.asarray(energies, dtype=np.float64)
    if energies.size == 0:
        raise ValidationError("detector response energy grid is empty")
    rho = scintillator.density_ref if density is None else density
    dqe = np.array([-math.expm1(-mu_at(scintillator, e, rho) * thickness) for e in energies])
    return DetectorResponse(energies, dqe, energies * dqe)


# ---------------------------------------------------------------------------
# packed form for the compiled kernels


class PackedMaterials(NamedTuple):
    """Material tables padded into 2-D arrays indexed by material id.

    Row 0 is vacuum (zero-length tables). ``ray_cum`` holds the cumulative
    integral of F(q)^2 d(q^2) at the F knots, used to invert the coherent
    angular distribution.
    """

    z_eff: np.ndarray
    e_lo: np.ndarray
    e_hi: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    mu_n: np.ndarray
    inc_x: np.ndarray
    inc_y: np.ndarray
    inc_n: np.ndarray
    coh_x: np.ndarray
    coh_y: np.ndarray
    coh_n: np.ndarray
    pe_x: np.ndarray
    pe_y: np.ndarray
    pe_n: np.ndarray
    s_x: np.ndarray
    s_y: np.ndarray
    s_n: np.ndarray
    f_x: np.ndarray
    f_y: np.ndarray
    f_n: np.ndarray
    ray_cum: np.ndarray


def rayleigh_cumulative(fx, fy):
    """Exact integral of F(q)^2 d(q^2) for piecewise-linear F, at each knot."""
    cum = np.zeros(len(fx))
    for i in range(len(fx) - 1):
        q0, q1 = fx[i], fx[i + 1]
        b = (fy[i + 1] - fy[i]) / (q1 - q0)
        a = fy[i] - b * q0
        cum[i + 1] = cum[i] + _g_antideriv(a, b, q1) - _g_antideriv(a, b, q0)
    return cum


def _g_antideriv(a, b, q):
    # d/dq = 2 q (a + b q)^2
    return a * a * q * q + (4.0 / 3.0) * a * b * q ** 3 + 0.5 * b * b * q ** 4


def pack_materials(table):
    """Pack ``{material_id: Material}`` (ids >= 1) for the compiled kernels."""
    n_mat = max(table, default=0) + 1
    mats = [table.get(i) for i in range(n_mat)]

    def pad(attr):
        width = max([len(getattr(m, attr)) for m in mats if m is not None], default=1)
        xs = np.zeros((n_mat, width))
        ys = np.zeros((n_mat, width))
        ns = np.zeros(n_mat, dtype=np.int64)
        for i, m in enumerate(mats):
            if m is None:
                continue
            tab = getattr(m, attr)
            ns[i] = len(tab)
            xs[i, : len(tab)] = tab.x
            ys[i, : len(tab)] = tab.y
        return xs, ys, ns

    packed = {}
    for key, attr in (("mu", "mu"), ("inc", "incoherent"), ("coh", "coherent"),
                      ("pe", "photoelectric"), ("s", "S"), ("f", "F")):
        packed[f"{key}_x"], packed[f"{key}_y"], packed[f"{key}_n"] = pad(attr)
    ray_cum = np.zeros_like(packed["f_x"])
    z = np.zeros(n_mat)
    e_lo = np.full(n_mat, -np.inf)
    e_hi = np.full(n_mat, np.inf)
    for i, m in enumerate(mats):
        if m is None:
            continue
        z[i] = m.z_eff
        e_lo[i], e_hi[i] = m.energy_range
        ray_cum[i, : len(m.F)] = rayleigh_cumulative(m.F.x, m.F.y)
    return PackedMaterials(z_eff=z, e_lo=e_lo, e_hi=e_hi, ray_cum=ray_cum, **packed)


@dataclass
class MaterialLibrary:
    """Name-indexed collection of loaded materials."""

    materials: dict = field(default_factory=dict)

    @classmethod
    def from_directory(cls, path):
        lib = cls()
        for p in sorted(Path(path).glob("*.mat")):
            lib.materials[p.stem] = load_material(p)
        return lib

    @classmethod
    def bundled(cls):
        return cls({name: bundled_material(name) for name in bundled_material_names()})

    def __getitem__(self, name):
        """Look up by file stem (``al``) or by the material's own name (``Aluminum``)."""
        if name in self.materials:
            return self.materials[name]
        for m in self.materials.values():
            if m.name.lower() == str(name).lower():
                return m
        raise ValidationError(f"unknown material {name!r}; have {sorted(self.materials)}")

    def __contains__(self, name):
        try:
            self[name]
        except ValidationError:
            return False
        return True
