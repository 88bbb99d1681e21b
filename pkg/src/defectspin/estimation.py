"""Inverse problem: from fitted line positions to defect parameters.

Covers hyperfine extraction from zero-field line pairs, grouping lines by
their probe coupling, orientation residual maps, nuclear-species
assignment, defect-database matching and nuclear polarization estimates.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import least_squares

from .spin_model import (
    GAMMA_E_DEFAULT,
    PROBE_AXIS_111,
    TESLA_PER_GAUSS,
    HyperfineTensor,
    geomagnetic_uncertainty,
    nuclear_frequencies,
    secular_components_grid,
)

DATA_ENV = "DEFECTSPIN_DATA"
MEASUREMENT_SCHEMA = "defectspin.measurement/1"
DFT_ACCURACY = 0.20
SPECIES_TOLERANCE = 0.10


class EstimationError(ValueError):
    """Raised when measurements cannot be turned into an estimate."""


class AmbiguousGroupingError(EstimationError):
    """More than two lines share one coupling strength."""

    def __init__(self, candidates: Sequence["ZFLine"]):
        freqs = ", ".join(f"{c.frequency:g} MHz (d={c.d:g} kHz)" for c in candidates)
        super().__init__(f"ambiguous coupling match between {len(candidates)} lines: {freqs}")
        self.candidates = list(candidates)


# ------------------------------------------------------------------- data
def data_path(name: str) -> Path:
    """Locate a bundled data file, honouring the ``DEFECTSPIN_DATA`` directory."""
    override = os.environ.get(DATA_ENV)
    if override:
        candidate = Path(override) / name
        if candidate.exists():
            return candidate
    return Path(str(resources.files("defectspin.data").joinpath(name)))


def _read_csv_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    return list(csv.DictReader(lines))


@dataclass(frozen=True)
class Isotope:
    name: str
    gamma: float  # MHz/T, signed
    spin: str = "1/2"


def load_isotopes(path: str | Path | None = None) -> list[Isotope]:
    path = Path(path) if path is not None else data_path("isotopes.csv")
    out = []
    for i, row in enumerate(_read_csv_rows(path), start=1):
        try:
            out.append(Isotope(row["isotope"], float(row["gamma"]), row.get("spin") or "1/2"))
        except (KeyError, ValueError) as exc:
            raise EstimationError(f"{path}: isotope row {i}: {exc}") from None
    return out


@dataclass(frozen=True)
class DefectRecord:
    """One calculated defect: three principal values (MHz) and directions (deg)."""

    label: str
    structure: str
    n_vacancy: int
    defect: str
    a: tuple[float, float, float]
    dirs: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]
    functional: str

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.a):
            raise ValueError(f"{self.label}: principal values must be finite")
        for theta, phi in self.dirs:
            if not (0 <= theta <= 180 and -180 <= phi <= 180):
                raise ValueError(f"{self.label}: direction ({theta}, {phi}) out of range")

    @property
    def a_perp_mean(self) -> float:
        return (self.a[0] + self.a[1]) / 2

    @property
    def a_par(self) -> float:
        return self.a[2]


def load_defect_db(path: str | Path | None = None) -> list[DefectRecord]:
    """Read the defect table (columns as in the bundled ``table_s1.csv``)."""
    path = Path(path) if path is not None else data_path("table_s1.csv")
    records = []
    for i, row in enumerate(_read_csv_rows(path), start=1):
        try:
            records.append(DefectRecord(
                label=row["label"],
                structure=row["type"],
                n_vacancy=int(row["n_vacancy"]),
                defect=row["defect"],
                a=tuple(float(row[f"a{k}"]) for k in (1, 2, 3)),
                dirs=tuple((float(row[f"theta{k}"]), float(row[f"phi{k}"])) for k in (1, 2, 3)),
                functional=row["functional"],
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise EstimationError(f"{path}: defect row {i}: {exc}") from None
    return records


# ------------------------------------------------------------ measurements
@dataclass(frozen=True)
class Value:
    value: float
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.value) or not (self.sigma >= 0):
            raise ValueError("value must be finite and sigma non-negative")


@dataclass(frozen=True)
class ZFLine:
    """Zero-field resonance with its probe coupling ``d`` (kHz)."""

    frequency: float
    d: float
    d_sigma: float = 0.0
    sigma: float = 0.0


@dataclass(frozen=True)
class MeasurementSet:
    """Measured splitting and nuclear frequencies (MHz) at field ``b0`` (G)."""

    splitting: Value
    omega_n_minus: Value
    omega_n_plus: Value
    b0: float
    zf_lines: tuple[ZFLine, ...] = ()
    label: str = ""

    def __post_init__(self) -> None:
        if not self.splitting.value > 0:
            raise ValueError("splitting must be positive")
        if not (self.omega_n_minus.value > 0 and self.omega_n_plus.value > 0):
            raise ValueError("nuclear frequencies must be positive")
        if not self.b0 > 0:
            raise ValueError("b0 must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "MeasurementSet":
        schema = data.get("schema", MEASUREMENT_SCHEMA)
        if schema != MEASUREMENT_SCHEMA:
            raise ValueError(f"unsupported measurement schema {schema!r}")

        def val(key):
            if key not in data:
                raise ValueError(f"measurement field {key!r} is missing")
            v = data[key]
            return Value(float(v["value"]), float(v.get("sigma", 0.0))) if isinstance(v, dict) \
                else Value(float(v))

        lines = []
        for i, ln in enumerate(data.get("zf_lines", [])):
            try:
                lines.append(ZFLine(float(ln["frequency"]), float(ln["d"]),
                                    float(ln.get("d_sigma", 0.0)), float(ln.get("sigma", 0.0))))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"zf_lines[{i}]: {exc}") from None
        return cls(val("splitting"), val("omega_n_minus"), val("omega_n_plus"),
                   float(data["b0"]), tuple(lines), str(data.get("label", "")))

    @classmethod
    def from_json(cls, path: str | Path) -> "MeasurementSet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        def val(v: Value) -> dict:
            return {"value": v.value, "sigma": v.sigma}
        return {
            "schema": MEASUREMENT_SCHEMA,
            "label": self.label,
            "b0": self.b0,
            "splitting": val(self.splitting),
            "omega_n_minus": val(self.omega_n_minus),
            "omega_n_plus": val(self.omega_n_plus),
            "zf_lines": [{"frequency": z.frequency, "sigma": z.sigma, "d": z.d,
                          "d_sigma": z.d_sigma} for z in self.zf_lines],
        }


# ------------------------------------------------------- hyperfine values
@dataclass(frozen=True)
class HyperfineEstimate:
    a_par: float
    a_perp: float
    sigma_par: float
    sigma_perp: float

    @property
    def tensor(self) -> HyperfineTensor:
        return HyperfineTensor.from_uniaxial(self.a_par, self.a_perp)


def extract_hyperfine_from_zf(omega_minus: float | ZFLine, omega_plus: float | ZFLine | None,
                              b_e: float = 0.5, linewidth: float = 0.2,
                              gamma_e: float = GAMMA_E_DEFAULT) -> HyperfineEstimate:
    """Uniaxial components from the two observable zero-field lines.

    ``A_par = w+ + w-`` and ``A_perp = w+ - w-``. Each line carries the
    stray-field bound ``gamma_e b_e / 2`` and its linewidth (or its own
    ``sigma`` when given as a :class:`ZFLine`) in quadrature.
    """
    if omega_plus is None:
        raise EstimationError("an unpaired line cannot fix both hyperfine components")
    lo = omega_minus.frequency if isinstance(omega_minus, ZFLine) else float(omega_minus)
    hi = omega_plus.frequency if isinstance(omega_plus, ZFLine) else float(omega_plus)
    a_par, a_perp = hi + lo, hi - lo
    if a_perp < 0:
        raise EstimationError(
            f"negative A_perp ({a_perp:g} MHz): lines {lo:g} and {hi:g} MHz look mis-grouped")

    def line_sigma(line) -> float:
        width = line.sigma if isinstance(line, ZFLine) and line.sigma > 0 else linewidth
        return geomagnetic_uncertainty(b_e, gamma_e, width)

    s = math.hypot(line_sigma(omega_minus), line_sigma(omega_plus))
    return HyperfineEstimate(a_par, a_perp, s, s)


@dataclass(frozen=True)
class LineGrouping:
    pairs: list[tuple[ZFLine, ZFLine]]
    unpaired: list[ZFLine]


def group_lines_by_coupling(lines: Sequence[ZFLine], n_sigma: float = 2.0) -> LineGrouping:
    """Pair zero-field lines whose couplings agree within ``n_sigma`` combined sigma.

    Lines are linked when ``|d_i - d_j| <= n_sigma * sqrt(s_i^2 + s_j^2)``.
    A linked group of two is a pair (ascending frequency), a lone line is
    reported unpaired, and a group of three or more is ambiguous.
    """
    lines = list(lines)
    if not lines:
        raise EstimationError("no lines to group")
    n = len(lines)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            a, b = lines[i], lines[j]
            if abs(a.d - b.d) <= n_sigma * math.hypot(a.d_sigma, b.d_sigma):
                parent[find(i)] = find(j)
    groups: dict[int, list[ZFLine]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(lines[i])
    pairs, unpaired = [], []
    for members in groups.values():
        members.sort(key=lambda z: z.frequency)
        if len(members) > 2:
            raise AmbiguousGroupingError(members)
        if len(members) == 2:
            pairs.append((members[0], members[1]))
        else:
            unpaired.append(members[0])
    pairs.sort(key=lambda p: p[0].frequency)
    unpaired.sort(key=lambda z: z.frequency)
    return LineGrouping(pairs, unpaired)


# ----------------------------------------------------------- residual map
@dataclass
class AngleMap:
    theta: np.ndarray  # degrees, 1-D
    phi: np.ndarray    # degrees, 1-D
    values: np.ndarray  # shape (len(theta), len(phi))

    @property
    def min(self) -> float:
        return float(self.values.min())

    @property
    def max(self) -> float:
        return float(self.values.max())

    def to_rows(self) -> Iterable[tuple[float, float, float]]:
        for i, t in enumerate(self.theta):
            for j, p in enumerate(self.phi):
                yield float(t), float(p), float(self.values[i, j])


@dataclass
class ResidualMap(AngleMap):
    eps_min: float = math.nan
    theta_min: float = math.nan
    phi_min: float = math.nan
    absolute_residual: float = math.nan
    argmin_set: list[tuple[float, float]] = field(default_factory=list)
    weighted: bool = False


def angle_grid(step: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Polar angles ``[0, 180]`` and azimuths ``(-180, 180]`` at ``step`` degrees."""
    if not 0 < step <= 90:
        raise ValueError("grid step must be in (0, 90] degrees")
    n_theta = int(round(180 / step))
    n_phi = int(round(360 / step))
    theta = np.linspace(0.0, 180.0, n_theta + 1)
    phi = np.linspace(-180.0, 180.0, n_phi + 1)[1:]
    return theta, phi


def _forward(a_par, a_perp, gamma_n, b0, theta, phi, probe_axis):
    zx, zy, zz = secular_components_grid(a_par, a_perp, theta, phi, probe_axis)
    a = np.sqrt(zx ** 2 + zy ** 2 + zz ** 2)
    w_minus, w_plus = nuclear_frequencies(a, zz, gamma_n, b0)
    return a, w_minus, w_plus


def _terms(meas: MeasurementSet, weighted: bool):
    meas_vals = [meas.splitting, meas.omega_n_minus, meas.omega_n_plus]
    if weighted:
        scale = [v.sigma for v in meas_vals]
        if not all(s > 0 for s in scale):
            raise EstimationError("weighted residuals need positive uncertainties")
    else:
        scale = [v.value for v in meas_vals]
    return [v.value for v in meas_vals], scale


def residual_map(meas: MeasurementSet, a_par: float, a_perp: float, gamma_n: float,
                 grid_deg: float = 1.0, probe_axis: tuple[float, float] = PROBE_AXIS_111,
                 weighted: bool = False, refine: bool = True,
                 argmin_tol: float = 0.01) -> ResidualMap:
    """Relative misfit between measurements and the forward model over orientations.

    ``eps = sqrt(sum_k ((m_k - f_k(theta, phi)) / m_k)^2)`` over the splitting
    and both nuclear frequencies. ``weighted=True`` divides by the measurement
    uncertainties instead (not the relative form).

    The grid minimum (lowest eps, then theta, then phi) is polished by a
    bounded least-squares solve on the three residuals. ``argmin_set`` lists
    grid points with ``eps <= eps_min * (1 + argmin_tol)`` (or within
    ``argmin_tol`` of zero for a vanishing minimum), which exposes the
    degenerate contours. ``absolute_residual`` is ``eps * A_m / sqrt(3)``,
    the per-measurement residual for equal shares.
    """
    theta, phi = angle_grid(grid_deg)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    meas_vals, scale = _terms(meas, weighted)
    model = _forward(a_par, a_perp, gamma_n, meas.b0, tt, pp, probe_axis)
    eps = np.sqrt(sum(((m - f) / s) ** 2 for m, f, s in zip(meas_vals, model, scale)))

    flat = np.lexsort((pp.ravel(), tt.ravel(), eps.ravel()))
    i0 = flat[0]
    best = (float(eps.ravel()[i0]), float(tt.ravel()[i0]), float(pp.ravel()[i0]))
    if refine:
        for k in flat[:8]:
            cand = _polish(meas_vals, scale, a_par, a_perp, gamma_n, meas.b0, probe_axis,
                           float(tt.ravel()[k]), float(pp.ravel()[k]), grid_deg)
            if cand[0] < best[0] - 1e-15:
                best = cand
    eps_min, theta_min, phi_min = best
    cut = eps_min * (1 + argmin_tol) if eps_min > 1e-6 else argmin_tol * 1e-2
    mask = eps <= max(cut, eps.min())
    argmin = sorted(zip(tt[mask].tolist(), pp[mask].tolist()))
    absolute = eps_min * meas.splitting.value / math.sqrt(3) if not weighted else math.nan
    return ResidualMap(theta, phi, eps, eps_min, theta_min, phi_min, absolute, argmin, weighted)


def _polish(meas_vals, scale, a_par, a_perp, gamma_n, b0, probe_axis, t0, p0, step):
    def resid(q):
        f = _forward(a_par, a_perp, gamma_n, b0, q[0], q[1], probe_axis)
        return np.array([(m - fk) / s for m, fk, s in zip(meas_vals, f, scale)], dtype=float)

    lo = [max(0.0, t0 - 2 * step), p0 - 2 * step]
    hi = [min(180.0, t0 + 2 * step), p0 + 2 * step]
    x0 = np.clip([t0, p0], lo, hi)
    if lo[0] == hi[0]:
        hi[0] += 1e-9
    sol = least_squares(resid, x0, bounds=(lo, hi), xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        method="trf")
    theta, phi = float(sol.x[0]), float(sol.x[1])
    phi = math.remainder(phi, 360.0)
    if phi == -180.0:
        phi = 180.0
    return float(np.linalg.norm(sol.fun)), theta, phi


def azz_ratio_map(a_par: float, a_perp: float, grid_deg: float = 1.0,
                  probe_axis: tuple[float, float] = PROBE_AXIS_111) -> AngleMap:
    """``|A_zz| / A`` over all defect orientations (uniaxial tensor)."""
    theta, phi = angle_grid(grid_deg)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    zx, zy, zz = secular_components_grid(a_par, a_perp, tt, pp, probe_axis)
    a = np.sqrt(zx ** 2 + zy ** 2 + zz ** 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(a > 0, np.abs(zz) / a, 1.0)
    return AngleMap(theta, phi, ratio)


# ----------------------------------------------------------------- species
@dataclass(frozen=True)
class SpeciesMatch:
    isotope: Isotope
    deviation: float  # relative to |gamma_est|
    within_tolerance: bool


@dataclass(frozen=True)
class SpeciesReport:
    gamma_est: float
    gamma_sigma: float
    candidates: list[SpeciesMatch]

    @property
    def best(self) -> SpeciesMatch | None:
        if self.gamma_est == 0 or not self.candidates:
            return None
        return self.candidates[0]

    @property
    def ambiguous(self) -> list[str]:
        """Names of all candidates within tolerance when there is more than one."""
        close = [c.isotope.name for c in self.candidates if c.within_tolerance]
        return close if len(close) > 1 else []


def identify_species(delta_omega: float, b0: float, table: Sequence[Isotope] | None = None,
                     sigma: float = 0.0, tolerance: float = SPECIES_TOLERANCE) -> SpeciesReport:
    """Rank isotopes by ``|gamma| = |delta_omega| / (2 B0)``.

    ``delta_omega`` is ``omega_n+ - omega_n-`` in MHz and ``b0`` is in gauss.
    A candidate is within tolerance when its magnitude lies within
    ``max(tolerance * |gamma_est|, 2 sigma_gamma)`` of the estimate. A zero
    splitting gives ``gamma_est = 0`` and no best match.
    """
    if not b0 > 0:
        raise EstimationError("b0 must be positive")
    table = list(load_isotopes() if table is None else table)
    if not table:
        raise EstimationError("isotope table is empty")
    b_tesla = b0 * TESLA_PER_GAUSS
    gamma_est = abs(delta_omega) / (2 * b_tesla)
    gamma_sigma = sigma / (2 * b_tesla)
    if gamma_est == 0:
        ranked = sorted(table, key=lambda iso: (abs(iso.gamma), iso.name))
        return SpeciesReport(0.0, gamma_sigma,
                             [SpeciesMatch(iso, math.inf, False) for iso in ranked])
    band = max(tolerance * gamma_est, 2 * gamma_sigma)
    matches = []
    for iso in table:
        diff = abs(abs(iso.gamma) - gamma_est)
        matches.append(SpeciesMatch(iso, diff / gamma_est, diff <= band))
    matches.sort(key=lambda m: (m.deviation, m.isotope.name))
    return SpeciesReport(gamma_est, gamma_sigma, matches)


# -------------------------------------------------------------- databases
@dataclass(frozen=True)
class DefectMatch:
    record: DefectRecord
    d_a: float
    within_accuracy: bool


def match_defect(a_par: float, a_perp: float, db: Sequence[DefectRecord] | None = None,
                 accuracy: float = DFT_ACCURACY) -> list[DefectMatch]:
    """Rank database entries by ``d_A`` in the (mean A_perp, A_par) plane.

    Signed principal values are used as listed. ``within_accuracy`` is true
    when both components agree with the calculated ones to ``accuracy``
    (relative to the calculated values). Ties are broken by label.
    """
    db = list(load_defect_db() if db is None else db)
    out = []
    for rec in db:
        dp = rec.a_perp_mean - a_perp
        dz = rec.a_par - a_par
        ok = (abs(dp) <= accuracy * abs(rec.a_perp_mean)) and (abs(dz) <= accuracy * abs(rec.a_par))
        out.append(DefectMatch(rec, math.hypot(dp, dz), ok))
    out.sort(key=lambda m: (m.d_a, m.record.label))
    return out


# ------------------------------------------------------------ polarization
def polarization_from_peaks(a_down: float, gamma_down: float, a_up: float, gamma_up: float,
                            sigmas: Sequence[float] = (0.0, 0.0, 0.0, 0.0)) -> tuple[float, float]:
    """Nuclear polarization from the two Lorentzian areas.

    ``p = (a_d g_d - a_u g_u) / (a_d g_d + a_u g_u)`` with first-order error
    propagation from ``sigmas = (s_a_down, s_gamma_down, s_a_up, s_gamma_up)``.
    """
    if min(a_down, gamma_down, a_up, gamma_up) < 0:
        raise EstimationError("peak amplitudes and widths must be non-negative")
    s_down, s_up = a_down * gamma_down, a_up * gamma_up
    total = s_down + s_up
    if not total > 0:
        raise EstimationError("peak areas sum to zero")
    p = (s_down - s_up) / total
    dp_dsd = 2 * s_up / total ** 2
    dp_dsu = -2 * s_down / total ** 2
    grads = np.array([dp_dsd * gamma_down, dp_dsd * a_down, dp_dsu * gamma_up, dp_dsu * a_up])
    sigma = float(np.sqrt(np.sum((grads * np.asarray(sigmas, dtype=float)) ** 2)))
    return p, sigma


def polarization_from_fits(down, up) -> tuple[float, float]:
    """Polarization from two single-Lorentzian :class:`FitResult` objects.

    Dips are handled through ``|a|``.
    """
    return polarization_from_peaks(abs(down["a"]), down["gamma"], abs(up["a"]), up["gamma"],
                                   (down.error("a"), down.error("gamma"),
                                    up.error("a"), up.error("gamma")))


__all__ = [
    "EstimationError", "AmbiguousGroupingError", "Isotope", "DefectRecord", "Value", "ZFLine",
    "MeasurementSet", "HyperfineEstimate", "LineGrouping", "AngleMap", "ResidualMap",
    "SpeciesMatch", "SpeciesReport", "DefectMatch", "data_path", "load_isotopes",
    "load_defect_db", "extract_hyperfine_from_zf", "group_lines_by_coupling", "angle_grid",
    "residual_map", "azz_ratio_map", "identify_species", "match_defect",
    "polarization_from_peaks", "polarization_from_fits",
]
