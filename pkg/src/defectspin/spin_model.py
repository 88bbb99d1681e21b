"""Spin Hamiltonian building blocks for an S=1/2, I=1/2 defect.

Conventions
-----------
* Angles are degrees at the API surface and radians internally.
* Hyperfine and transition frequencies are ``H / (2 pi)`` in MHz.
* ``gamma_e`` is in MHz/G, nuclear ``gamma_n`` in MHz/T (signed) and
  magnetic fields in gauss.
* The defect orientation uses the rotation ``R(alpha, beta)`` with a zero
  third Euler angle: ``alpha`` is the azimuth and ``beta`` the polar angle.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

GAMMA_E_DEFAULT = 2.8025  # MHz/G, free electron
UNIAXIAL_TOLERANCE = 1.0  # MHz
PROBE_AXIS_111 = (54.7, 45.0)  # (theta, phi) of a [111] probe
TESLA_PER_GAUSS = 1e-4
SECULAR_MARGIN = 10.0


class SecularValidityWarning(UserWarning):
    """Emitted when the electron Zeeman term does not dominate the hyperfine."""


def _wrap_phi(phi: float) -> float:
    """Map an azimuth onto (-180, 180]."""
    wrapped = math.fmod(phi, 360.0)
    if wrapped <= -180.0:
        wrapped += 360.0
    elif wrapped > 180.0:
        wrapped -= 360.0
    return wrapped


@dataclass(frozen=True)
class HyperfineTensor:
    """Hyperfine tensor given by its principal values and orientation.

    Parameters
    ----------
    a_xx, a_yy, a_par : float
        Principal components in MHz; ``a_par`` is the component along the
        defect's own z axis.
    theta_x, phi_x : float or None
        Polar angle from [001] and azimuth from [100] toward [010], in
        degrees. ``None`` marks an orientation that has not been set, which
        is what the zero-field extraction produces.
    tolerance : float
        Largest ``|a_xx - a_yy|`` still treated as uniaxial (MHz).
    """

    a_xx: float
    a_yy: float
    a_par: float
    theta_x: float | None = None
    phi_x: float | None = None
    tolerance: float = UNIAXIAL_TOLERANCE

    def __post_init__(self) -> None:
        for name in ("a_xx", "a_yy", "a_par"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if (self.theta_x is None) != (self.phi_x is None):
            raise ValueError("theta_x and phi_x must be set together")
        if self.theta_x is not None:
            if not (math.isfinite(self.theta_x) and math.isfinite(self.phi_x)):
                raise ValueError("orientation angles must be finite")
            if not 0.0 <= self.theta_x <= 180.0:
                raise ValueError(f"theta_x={self.theta_x} outside [0, 180]")
            object.__setattr__(self, "phi_x", _wrap_phi(float(self.phi_x)))

    @classmethod
    def from_uniaxial(cls, a_par: float, a_perp: float,
                      theta_x: float | None = None,
                      phi_x: float | None = None, **kwargs) -> "HyperfineTensor":
        return cls(a_perp, a_perp, a_par, theta_x, phi_x, **kwargs)

    def uniaxial(self) -> bool:
        return abs(self.a_xx - self.a_yy) <= self.tolerance

    @property
    def a_perp(self) -> float:
        """Transverse component; the mean of ``a_xx`` and ``a_yy``."""
        return 0.5 * (self.a_xx + self.a_yy)

    @property
    def oriented(self) -> bool:
        return self.theta_x is not None

    def principal_matrix(self) -> np.ndarray:
        return np.diag([self.a_xx, self.a_yy, self.a_par]).astype(float)

    def with_orientation(self, theta_x: float, phi_x: float) -> "HyperfineTensor":
        return HyperfineTensor(self.a_xx, self.a_yy, self.a_par, theta_x, phi_x,
                               self.tolerance)


@dataclass(frozen=True)
class SpinSystem:
    """Probe spin coupled to one electron-nuclear defect.

    ``d_zz`` (and the optional transverse ``d_zx``, ``d_zy``) are in kHz and
    enter the dipolar Hamiltonian as ``2 S_z^probe (d . S^X)``. With this
    normalization a resonant zero-field DEER trace has its fundamental
    oscillation at ``d_zz / 2``.
    """

    hyperfine: HyperfineTensor
    gamma_n: float = 0.0
    d_zz: float = 0.0
    gamma_e: float = GAMMA_E_DEFAULT
    probe_axis: tuple[float, float] = PROBE_AXIS_111
    d_zx: float = 0.0
    d_zy: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.gamma_e) and self.gamma_e > 0):
            raise ValueError("gamma_e must be positive and finite")
        for name in ("gamma_n", "d_zz", "d_zx", "d_zy"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        theta, phi = self.probe_axis
        if not (math.isfinite(theta) and math.isfinite(phi)):
            raise ValueError("probe axis angles must be finite")
        object.__setattr__(self, "probe_axis", (float(theta), float(phi)))

    @property
    def dipolar_mhz(self) -> np.ndarray:
        """Dipolar vector (d_zx, d_zy, d_zz) converted to MHz."""
        return np.array([self.d_zx, self.d_zy, self.d_zz]) * 1e-3

    def nuclear_zeeman(self, b0: float) -> float:
        """Nuclear Larmor frequency ``gamma_n * B0`` (MHz, ``b0`` in gauss); it enters H as ``-gamma_n B0 I_z``."""
        return self.gamma_n * b0 * TESLA_PER_GAUSS


@dataclass(frozen=True)
class SecularComponents:
    a_zx: float
    a_zy: float
    a_zz: float

    @property
    def splitting(self) -> float:
        return math.sqrt(self.a_zx ** 2 + self.a_zy ** 2 + self.a_zz ** 2)

    @property
    def azz_ratio(self) -> float:
        return self.a_zz / self.splitting


@dataclass(frozen=True)
class LevelSpectrum:
    """High-field levels and transitions.

    ``eps`` holds epsilon_1..epsilon_4 (MHz). Levels 1 and 2 belong to the
    electron-up manifold, 3 and 4 to electron-down. ``electron_transitions``
    is ``(omega_e-, omega_e+) = (eps1 - eps4, eps2 - eps3)``.
    ``nuclear_transitions`` is ``(omega_n-, omega_n+)`` from the first-order
    expansion; ``labels_swapped`` records the negative-gamma relabelling.
    """

    eps: tuple[float, float, float, float]
    electron_transitions: tuple[float, float]
    nuclear_transitions: tuple[float, float]
    splitting: float
    labels_swapped: bool = False

    @property
    def exact_nuclear_transitions(self) -> tuple[float, float]:
        e1, e2, e3, e4 = self.eps
        return (e2 - e1, e4 - e3)


@dataclass(frozen=True)
class ZFTransition:
    label: str
    frequency: float
    observable: bool


def rotation_matrix(alpha: float, beta: float) -> np.ndarray:
    """Rotation ``R(alpha, beta)`` with the third Euler angle fixed to zero.

    Parameters
    ----------
    alpha : float
        Azimuthal angle in degrees.
    beta : float
        Polar angle in degrees.
    """
    a, b = math.radians(alpha), math.radians(beta)
    ca, sa, cb, sb = math.cos(a), math.sin(a), math.cos(b), math.sin(b)
    return np.array([
        [cb * ca, cb * sa, -sb],
        [-sa, ca, 0.0],
        [sb * ca, sb * sa, cb],
    ])


def rotated_tensor(h: HyperfineTensor,
                   probe_axis: tuple[float, float] = PROBE_AXIS_111) -> np.ndarray:
    """Hyperfine tensor expressed in the probe (field) frame.

    Implements ``A' = R_NV R_X^T A_princ R_X R_NV^T``.
    """
    _require_orientation(h)
    theta_nv, phi_nv = probe_axis
    r_x = rotation_matrix(h.phi_x, h.theta_x)
    r_nv = rotation_matrix(phi_nv, theta_nv)
    return r_nv @ r_x.T @ h.principal_matrix() @ r_x @ r_nv.T


def _require_orientation(h: HyperfineTensor) -> None:
    if not h.oriented:
        raise ValueError("hyperfine orientation (theta_x, phi_x) is not set")


def _closed_form(a_par, a_perp, theta_x, phi_x, theta_nv, phi_nv):
    """Closed-form secular components; broadcasts over array inputs (radians)."""
    delta = a_par - a_perp
    dphi = phi_nv - phi_x
    s2tx, c2tx = np.sin(2 * theta_x), np.cos(2 * theta_x)
    stx, ctx = np.sin(theta_x), np.cos(theta_x)
    stn, ctn = np.sin(theta_nv), np.cos(theta_nv)
    a_zx = -delta / 8 * (
        -4 * s2tx * np.cos(2 * theta_nv) * np.cos(dphi)
        + np.sin(2 * theta_nv) * (c2tx * (np.cos(2 * dphi) + 3) + 2 * np.sin(dphi) ** 2)
    )
    a_zy = -delta * stx * np.sin(dphi) * (stn * stx * np.cos(dphi) + ctn * ctx)
    a_zz = (
        ctn ** 2 * (a_par * ctx ** 2 + a_perp * stx ** 2)
        + 0.25 * stn ** 2 * (a_par + 3 * a_perp - delta * (c2tx - 2 * np.cos(2 * dphi) * stx ** 2))
        + delta * ctn * np.cos(dphi) * stn * s2tx
    )
    return a_zx, a_zy, a_zz


def secular_components_grid(a_par: float, a_perp: float, theta_x, phi_x,
                            probe_axis: tuple[float, float] = PROBE_AXIS_111):
    """Vectorized closed-form components over arrays of angles in degrees."""
    theta_nv, phi_nv = probe_axis
    return _closed_form(a_par, a_perp, np.radians(theta_x), np.radians(phi_x),
                        math.radians(theta_nv), math.radians(phi_nv))


def secular_components(sys: SpinSystem) -> SecularComponents:
    """Secular hyperfine components ``(A_zx, A_zy, A_zz)`` in the field frame.

    Uniaxial tensors use the closed-form trigonometric expressions; all
    others go through the full matrix conjugation.
    """
    h = sys.hyperfine
    _require_orientation(h)
    if h.uniaxial():
        zx, zy, zz = secular_components_grid(h.a_par, h.a_perp, h.theta_x, h.phi_x,
                                             sys.probe_axis)
        return SecularComponents(float(zx), float(zy), float(zz))
    return secular_components_matrix(sys)


def secular_components_matrix(sys: SpinSystem) -> SecularComponents:
    """Secular components from the explicit tensor conjugation."""
    a = rotated_tensor(sys.hyperfine, sys.probe_axis)
    return SecularComponents(float(a[2, 0]), float(a[2, 1]), float(a[2, 2]))


def secular_hamiltonian(sc: SecularComponents, gamma_e: float, gamma_n: float,
                        b0: float) -> np.ndarray:
    """4x4 secular Hamiltonian (MHz) in the electron (x) nucleus product basis.

    ``gamma_e B0 S_z + S_z (A_zx I_x + A_zy I_y + A_zz I_z) - gamma_n B0 I_z``.

    The nuclear Zeeman term carries the usual minus sign (a positive
    ``gamma_n`` lowers the energy of nuclear spin up). With it the closed-form
    ``eps`` of :func:`level_spectrum` are the exact eigenvalues.
    """
    sx = np.array([[0, 1], [1, 0]], dtype=complex) / 2
    sy = np.array([[0, -1j], [1j, 0]], dtype=complex) / 2
    sz = np.array([[1, 0], [0, -1]], dtype=complex) / 2
    eye = np.eye(2)
    nuc = sc.a_zx * sx + sc.a_zy * sy + sc.a_zz * sz
    return (gamma_e * b0 * np.kron(sz, eye) + np.kron(sz, nuc)
            - gamma_n * b0 * TESLA_PER_GAUSS * np.kron(eye, sz))


def level_spectrum(sys: SpinSystem, b0: float) -> LevelSpectrum:
    """Closed-form eigen-energies and transition frequencies at field ``b0`` (G)."""
    if not math.isfinite(b0) or b0 < 0:
        raise ValueError("b0 must be a non-negative finite field")
    sc = secular_components(sys)
    a = sc.splitting
    if a == 0 and b0 == 0:
        raise ValueError("degenerate spectrum: zero splitting at zero field")
    h = sys.hyperfine
    electron_zeeman = sys.gamma_e * b0
    if electron_zeeman < SECULAR_MARGIN * max(abs(h.a_par), abs(h.a_xx), abs(h.a_yy)):
        warnings.warn(
            f"gamma_e*B0 = {electron_zeeman:.3g} MHz is below {SECULAR_MARGIN:g}x the "
            "hyperfine scale; secular approximation is questionable",
            SecularValidityWarning, stacklevel=2)
    gb = sys.nuclear_zeeman(b0)
    transverse = sc.a_zx ** 2 + sc.a_zy ** 2
    r_minus = math.sqrt(transverse + (sc.a_zz - 2 * gb) ** 2)
    r_plus = math.sqrt(transverse + (sc.a_zz + 2 * gb) ** 2)
    eps = (0.5 * electron_zeeman - 0.25 * r_minus,
           0.5 * electron_zeeman + 0.25 * r_minus,
           -0.5 * electron_zeeman - 0.25 * r_plus,
           -0.5 * electron_zeeman + 0.25 * r_plus)
    shift = sc.a_zz / a * gb if a > 0 else 0.0
    n_minus, n_plus = a / 2 - shift, a / 2 + shift
    swapped = sys.gamma_n < 0
    if swapped:
        n_minus, n_plus = n_plus, n_minus
    return LevelSpectrum(
        eps=eps,
        electron_transitions=(eps[0] - eps[3], eps[1] - eps[2]),
        nuclear_transitions=(n_minus, n_plus),
        splitting=a,
        labels_swapped=swapped,
    )


def nuclear_frequencies(a: np.ndarray, a_zz: np.ndarray, gamma_n: float,
                        b0: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized first-order ``(omega_n-, omega_n+)`` with the sign relabelling."""
    with np.errstate(invalid="ignore", divide="ignore"):
        shift = np.where(a > 0, a_zz / a, 0.0) * gamma_n * b0 * TESLA_PER_GAUSS
    lo, hi = a / 2 - shift, a / 2 + shift
    return (hi, lo) if gamma_n < 0 else (lo, hi)


def zf_transitions(h: HyperfineTensor, full: bool = False) -> list[ZFTransition]:
    """Zero-field transition catalog.

    Uniaxial tensors give the three lines ``omega_-``, ``omega_+`` and the
    unobservable ``omega_perp``. Non-uniaxial tensors (or ``full=True``) give
    the six-line catalog in which lines 1, 2, 4 and 5 are observable.
    """
    if h.uniaxial() and not full:
        a_par, a_perp = h.a_par, h.a_perp
        return [
            ZFTransition("omega_minus", abs(a_par - a_perp) / 2, True),
            ZFTransition("omega_plus", abs(a_par + a_perp) / 2, True),
            ZFTransition("omega_perp", abs(a_perp), False),
        ]
    xx, yy, zz = h.a_xx, h.a_yy, h.a_par
    return [
        ZFTransition("omega_1", abs(zz - yy) / 2, True),
        ZFTransition("omega_2", abs(zz + xx) / 2, True),
        ZFTransition("omega_3", abs(xx + yy) / 2, False),
        ZFTransition("omega_4", abs(zz - xx) / 2, True),
        ZFTransition("omega_5", abs(zz + yy) / 2, True),
        ZFTransition("omega_6", abs(xx - yy) / 2, False),
    ]


def geomagnetic_uncertainty(b_e: float, gamma_e: float = GAMMA_E_DEFAULT,
                            linewidth_hwhm: float = 0.0) -> float:
    """Per-resonance uncertainty from an unknown stray field plus linewidth (MHz)."""
    if b_e < 0:
        raise ValueError("b_e must be non-negative")
    return math.hypot(gamma_e * b_e / 2, linewidth_hwhm)


def zero_field_hamiltonian(h: HyperfineTensor) -> np.ndarray:
    """4x4 principal-frame hyperfine Hamiltonian ``S . A . I`` (MHz)."""
    s = _spin_half()
    a = h.principal_matrix()
    return sum(a[i, i] * np.kron(s[i], s[i]) for i in range(3))


def _spin_half() -> list[np.ndarray]:
    return [
        np.array([[0, 1], [1, 0]], dtype=complex) / 2,
        np.array([[0, -1j], [1j, 0]], dtype=complex) / 2,
        np.array([[1, 0], [0, -1]], dtype=complex) / 2,
    ]


__all__ = [
    "GAMMA_E_DEFAULT", "PROBE_AXIS_111", "UNIAXIAL_TOLERANCE", "TESLA_PER_GAUSS",
    "HyperfineTensor", "SpinSystem", "SecularComponents", "LevelSpectrum",
    "ZFTransition", "SecularValidityWarning", "rotation_matrix", "rotated_tensor",
    "secular_components", "secular_components_matrix", "secular_components_grid",
    "secular_hamiltonian", "level_spectrum", "nuclear_frequencies",
    "zf_transitions", "geomagnetic_uncertainty", "zero_field_hamiltonian",
]
