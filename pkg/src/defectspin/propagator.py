"""Density-matrix propagation for a probe spin coupled to an electron-nuclear defect.

The Hilbert space is ``probe(2) x defect electron(2) x defect nucleus(2)``.
All Hamiltonians are ``H / (2 pi)`` in MHz and times are in microseconds, so a
propagator is ``exp(-2j pi H t)``.

Free evolution is exact in the lab frame of the defect. The probe is kept in
its own rotating frame, where it has no internal Hamiltonian, and its pulses
are hard (instantaneous) rotations. Pulses on the defect are integrated in a
rotating frame built from the defect eigenbasis: each eigenlevel gets a
harmonic index ``n`` so that near-resonant drive terms become static, and the
counter-rotating remainder is dropped. The frame is anchored to absolute
sequence time, so consecutive pulses keep their relative carrier phase.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .spin_model import (
    SpinSystem,
    rotated_tensor,
    secular_components,
    secular_hamiltonian,
    zero_field_hamiltonian,
)

if TYPE_CHECKING:  # pragma: no cover
    from .analysis import SignalTrace
    from .sequences import PulseSequence

TARGETS = ("probe-electron", "defect-electron", "defect-nucleus")
DEGENERACY_TOL = 1e-6  # MHz
HERMITIAN_TOL = 1e-9


class PropagationError(RuntimeError):
    """Raised when a matrix exponential cannot be formed reliably."""


# ---------------------------------------------------------------- operators
_SX = np.array([[0, 1], [1, 0]], dtype=complex) / 2
_SY = np.array([[0, -1j], [1j, 0]], dtype=complex) / 2
_SZ = np.array([[1, 0], [0, -1]], dtype=complex) / 2
_I2 = np.eye(2, dtype=complex)


def embed(op: np.ndarray, slot: int) -> np.ndarray:
    """Place a single-spin operator into the 8-dimensional register."""
    parts = [_I2, _I2, _I2]
    parts[slot] = op
    return np.kron(np.kron(parts[0], parts[1]), parts[2])


PROBE = tuple(embed(s, 0) for s in (_SX, _SY, _SZ))
ELECTRON = tuple(embed(s, 1) for s in (_SX, _SY, _SZ))
NUCLEUS = tuple(embed(s, 2) for s in (_SX, _SY, _SZ))
IDENTITY8 = np.eye(8, dtype=complex)


def bell_unitary() -> np.ndarray:
    """``U_b = exp(-i (pi/2) 2 S_y I_x)`` acting on the defect, as an 8x8 matrix."""
    gen = 2 * np.kron(_SY, _SX)
    w, v = np.linalg.eigh(gen)
    ub = (v * np.exp(-1j * (math.pi / 2) * w)) @ v.conj().T
    return np.kron(_I2, ub)


# ------------------------------------------------------------------- types
@dataclass(frozen=True)
class Pulse:
    """A rectangular pulse.

    For defect targets the lab-frame drive is ``2 (omega . S) cos(2 pi f t + phase)``
    with ``f = carrier`` in MHz. Probe pulses are hard rotations generated by
    ``omega . S`` (rotated by ``phase`` about z) for ``duration`` microseconds.
    """

    target: str
    omega: tuple[float, float, float]
    carrier: float = 0.0
    phase: float = 0.0
    duration: float = 0.0

    def __post_init__(self) -> None:
        if self.target not in TARGETS:
            raise ValueError(f"unknown pulse target {self.target!r}")
        omega = tuple(float(w) for w in self.omega)
        if len(omega) != 3 or not all(math.isfinite(w) for w in omega):
            raise ValueError("omega must hold three finite components")
        if not any(omega):
            raise ValueError("pulse needs at least one nonzero Rabi component")
        if not (math.isfinite(self.duration) and self.duration >= 0):
            raise ValueError("pulse duration must be >= 0")
        object.__setattr__(self, "omega", omega)


@dataclass(frozen=True)
class Delay:
    duration: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.duration) and self.duration >= 0):
            raise ValueError("delay duration must be >= 0")


@dataclass(frozen=True)
class HHCP:
    """Ideal (optionally lossy) Hartmann-Hahn iSWAP between probe and defect electron.

    ``transition`` is ``"e-"`` or ``"e+"`` for the conditional gate on one
    hyperfine line, or ``"both"`` for the full exchange.
    """

    transition: str = "both"
    fidelity: float = 1.0

    def __post_init__(self) -> None:
        if self.transition not in ("e-", "e+", "both"):
            raise ValueError(f"unknown HHCP transition {self.transition!r}")
        _check_fidelity(self.fidelity)


@dataclass(frozen=True)
class Gate:
    """Ideal selective rotation between two defect levels, named by epsilon index."""

    levels: tuple[int, int]
    angle: float = math.pi
    phase: float = 0.0

    def __post_init__(self) -> None:
        levels = tuple(int(k) for k in self.levels)
        if len(levels) != 2 or levels[0] == levels[1] or not set(levels) <= {1, 2, 3, 4}:
            raise ValueError("gate levels must be two distinct indices in 1..4")
        object.__setattr__(self, "levels", levels)


@dataclass(frozen=True)
class Depolarize:
    """With probability ``1 - fidelity`` replace the defect by the maximally mixed state."""

    fidelity: float

    def __post_init__(self) -> None:
        _check_fidelity(self.fidelity)


@dataclass(frozen=True)
class ProbeReset:
    """Optical re-polarization of the probe (the defect is untouched)."""


@dataclass(frozen=True)
class Toggle:
    """Slot for the alternating-shot probe pi pulse of the reset toggle."""


@dataclass(frozen=True)
class Readout:
    """Projective measurement marker; ``observable`` selects what is reported."""

    observable: str = "probe"

    def __post_init__(self) -> None:
        if self.observable not in ("probe", "nuclear-polarization", "electron-polarization"):
            raise ValueError(f"unknown readout observable {self.observable!r}")


Block = Pulse | Delay | HHCP | Gate | Depolarize | ProbeReset | Toggle | Readout


def _check_fidelity(f: float) -> None:
    if not (0.0 <= f <= 1.0):
        raise ValueError("fidelity must lie in [0, 1]")


@dataclass(frozen=True)
class DecoherenceParams:
    """Phenomenological decay times in microseconds (``inf`` disables a channel)."""

    t1e: float = math.inf
    t2_star_bath: float = math.inf
    t2_bath: float = math.inf

    def __post_init__(self) -> None:
        for name in ("t1e", "t2_star_bath", "t2_bath"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be positive or infinite")

    def rate(self, kind: str) -> float:
        """Total contrast decay rate (1/us) for a Ramsey or echo measurement."""
        if kind == "ramsey":
            bath = self.t2_star_bath
        elif kind == "echo":
            bath = self.t2_bath
        else:
            raise ValueError(f"unknown decay kind {kind!r}")
        return 1.0 / bath + 3.0 / (2.0 * self.t1e)


class DensityState:
    """Validated 8x8 density matrix."""

    BASES = ("product", "bell-electron-nuclear")

    def __init__(self, rho: np.ndarray, basis: str = "product", check: bool = True):
        rho = np.asarray(rho, dtype=complex)
        if rho.shape != (8, 8):
            raise ValueError("density matrix must be 8x8")
        if basis not in self.BASES:
            raise ValueError(f"unknown basis {basis!r}")
        if check:
            if abs(np.trace(rho) - 1) > 1e-10:
                raise ValueError("density matrix trace differs from 1")
            if np.abs(rho - rho.conj().T).max() > 1e-10:
                raise ValueError("density matrix is not Hermitian")
            if np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min() < -1e-10:
                raise ValueError("density matrix has negative eigenvalues")
        self.rho = rho
        self.basis = basis

    @classmethod
    def initial(cls, eta: float = 1.0) -> "DensityState":
        """Probe polarized along +z with efficiency ``eta``; defect fully mixed."""
        if not 0.0 <= eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        return cls((IDENTITY8 + 2 * eta * PROBE[2]) / 8)

    def expectation(self, op: np.ndarray) -> float:
        return float(np.real(np.trace(op @ self.rho)))

    def to_basis(self, basis: str) -> "DensityState":
        if basis == self.basis:
            return self
        ub = bell_unitary()
        if basis == "bell-electron-nuclear":
            return DensityState(ub.conj().T @ self.rho @ ub, basis, check=False)
        return DensityState(ub @ self.rho @ ub.conj().T, basis, check=False)

    @property
    def probe_polarization(self) -> float:
        return 2 * self.expectation(PROBE[2])


# -------------------------------------------------------------- hamiltonians
def defect_hamiltonian(sys: SpinSystem, b0: float, secular: bool = True) -> np.ndarray:
    """4x4 defect Hamiltonian (MHz).

    At zero field it is written in the defect's principal frame. Otherwise it
    is written in the field frame (field along the probe axis). By default
    only the secular hyperfine row ``S_z (A_zx I_x + A_zy I_y + A_zz I_z)`` is
    kept, which is the model behind :func:`~defectspin.spin_model.level_spectrum`.
    Pass ``secular=False`` to keep the full rotated tensor, including the
    electron-flip terms that matter when ``gamma_e B0`` is not much larger
    than the hyperfine coupling.
    """
    if b0 < 0 or not math.isfinite(b0):
        raise ValueError("b0 must be a non-negative finite field")
    h = sys.hyperfine
    if b0 == 0:
        return zero_field_hamiltonian(h)
    if secular:
        return secular_hamiltonian(secular_components(sys), sys.gamma_e, sys.gamma_n, b0)
    a = rotated_tensor(h, sys.probe_axis)
    ops = (_SX, _SY, _SZ)
    ham = sys.gamma_e * b0 * np.kron(_SZ, _I2) - sys.nuclear_zeeman(b0) * np.kron(_I2, _SZ)
    for i in range(3):
        for j in range(3):
            if a[i, j] != 0:
                ham = ham + a[i, j] * np.kron(ops[i], ops[j])
    return ham


def dipolar_hamiltonian(sys: SpinSystem) -> np.ndarray:
    """``2 S_z^probe (d_zx S_x + d_zy S_y + d_zz S_z)`` of the defect electron (MHz)."""
    d = sys.dipolar_mhz
    return 2 * PROBE[2] @ (d[0] * ELECTRON[0] + d[1] * ELECTRON[1] + d[2] * ELECTRON[2])


def build_lab_hamiltonian(sys: SpinSystem, b0: float, frame: str = "lab",
                          carrier: float | None = None) -> np.ndarray:
    """Static 8x8 Hamiltonian in the requested frame.

    ``frame="bell"`` (zero field only) applies ``U_b^dag H U_b``.
    ``frame="rotating"`` returns the rotating-wave Hamiltonian for an
    electron drive at ``carrier`` with the drive switched off.
    """
    ham = np.kron(_I2, defect_hamiltonian(sys, b0)) + dipolar_hamiltonian(sys)
    if frame == "lab":
        if carrier is not None:
            raise ValueError("a carrier is only meaningful in the rotating frame")
        return ham
    if frame == "bell":
        if b0 != 0 or carrier is not None:
            raise ValueError("the Bell frame is defined at zero field without a carrier")
        ub = bell_unitary()
        return ub.conj().T @ ham @ ub
    if frame == "rotating":
        if carrier is None or not carrier > 0:
            raise ValueError("rotating frame needs a positive carrier")
        rf = RotatingFrame(defect_hamiltonian(sys, b0), ELECTRON[0] + ELECTRON[1] + ELECTRON[2],
                           carrier)
        return rf.to_lab_basis(rf.static(dipolar_hamiltonian(sys)))
    raise ValueError(f"unknown frame {frame!r}")


def propagator(h: np.ndarray, t: float) -> np.ndarray:
    """``exp(-2j pi H t)`` for Hermitian ``H`` via eigendecomposition."""
    h = np.asarray(h, dtype=complex)
    scale = max(1.0, float(np.abs(h).max()))
    if np.abs(h - h.conj().T).max() > HERMITIAN_TOL * scale:
        raise ValueError("Hamiltonian is not Hermitian")
    w, v = _eigh(h)
    return (v * np.exp(-2j * math.pi * w * t)) @ v.conj().T


def _eigh(h: np.ndarray):
    try:
        w, v = np.linalg.eigh(0.5 * (h + h.conj().T))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise PropagationError(f"eigendecomposition failed: {exc}") from exc
    if not np.all(np.isfinite(w)):
        raise PropagationError("non-finite eigenvalues")
    return w, v


def evolve(state: DensityState, h: np.ndarray, t: float) -> DensityState:
    """Unitary evolution ``rho -> U rho U^dag`` with ``U = exp(-2j pi H t)``."""
    u = propagator(h, t)
    return DensityState(u @ state.rho @ u.conj().T, state.basis, check=False)


# ------------------------------------------------------------ rotating frame
class RotatingFrame:
    """Rotating-wave description of a drive at ``carrier`` on the defect.

    Eigenlevels of the 4x4 defect Hamiltonian are grouped into degenerate
    clusters. Clusters connected by the drive with a frame detuning below half
    the carrier are assigned harmonic indices differing by one, processed from
    the most resonant pair outward; isolated clusters get index 0.
    """

    def __init__(self, h_defect: np.ndarray, drive: np.ndarray, carrier: float):
        if not carrier > 0:
            raise ValueError("carrier must be positive")
        energies, vecs = _eigh(h_defect)
        spread = float(energies.max() - energies.min())
        if carrier > 2 * spread + 10.0:
            raise ValueError(
                f"carrier {carrier:g} MHz lies far outside the simulated band "
                f"(level spread {spread:g} MHz)")
        self.carrier = float(carrier)
        self.energies = energies
        self.vecs = vecs
        self.basis8 = np.kron(_I2, vecs)
        drive_eig = self.basis8.conj().T @ drive @ self.basis8
        self.drive_eig = drive_eig
        self.n = self._assign_harmonics(drive_eig)
        self.n8 = np.tile(self.n, 2)
        self.e8 = np.tile(energies, 2)

    def _assign_harmonics(self, drive_eig: np.ndarray) -> np.ndarray:
        e = self.energies
        cluster = list(range(4))
        for i in range(4):
            for j in range(i):
                if abs(e[i] - e[j]) < DEGENERACY_TOL:
                    cluster[i] = cluster[j]
                    break
        edges = []
        for k in range(4):
            for l in range(4):
                if cluster[k] == cluster[l]:
                    continue
                det = e[k] - e[l] - self.carrier
                coupled = np.abs(drive_eig.reshape(2, 4, 2, 4)[:, k, :, l]).max() > 1e-12
                if abs(det) < self.carrier / 2 and coupled:
                    edges.append((abs(det), k, l))
        edges.sort()
        index: dict[int, int] = {}
        for _, k, l in edges:
            ck, cl = cluster[k], cluster[l]
            if ck in index and cl in index:
                continue  # inconsistent edges are left to the rotating-wave drop
            if cl in index:
                index[ck] = index[cl] + 1
            elif ck in index:
                index[cl] = index[ck] - 1
            else:
                index[cl], index[ck] = 0, 1
        return np.array([index.get(cluster[k], 0) for k in range(4)])

    def _keep(self, static_ok: bool) -> np.ndarray:
        dn = self.n8[:, None] - self.n8[None, :]
        frame = self.e8[:, None] - self.e8[None, :] - dn * self.carrier
        near = np.abs(frame) < self.carrier / 2
        return (dn == 0) & near if static_ok else (np.abs(dn) == 1) & near

    def static(self, extra: np.ndarray | None = None) -> np.ndarray:
        """Rotating-frame Hamiltonian (eigenbasis) without drive, plus secular ``extra``."""
        ham = np.diag(self.e8 - self.n8 * self.carrier).astype(complex)
        if extra is not None:
            extra_eig = self.basis8.conj().T @ extra @ self.basis8
            ham = ham + np.where(self._keep(True), extra_eig, 0)
        return ham

    def driven(self, phase: float, scale: float = 1.0,
               extra: np.ndarray | None = None) -> np.ndarray:
        """Rotating-frame Hamiltonian (eigenbasis) with the drive at ``phase``."""
        dn = self.n8[:, None] - self.n8[None, :]
        phases = np.exp(-1j * phase * dn)
        drive = np.where(self._keep(False), scale * self.drive_eig * phases, 0)
        return self.static(extra) + drive

    def frame_unitary(self, t: float) -> np.ndarray:
        """Eigenbasis frame rotation ``exp(-2j pi N carrier t)``."""
        return np.diag(np.exp(-2j * math.pi * self.n8 * self.carrier * t))

    def lab_propagator(self, h_rot: np.ndarray, t0: float, t1: float) -> np.ndarray:
        """Lab-frame propagator (product basis) from ``t0`` to ``t1``."""
        u = self.frame_unitary(t1) @ propagator(h_rot, t1 - t0) @ self.frame_unitary(t0).conj().T
        return self.basis8 @ u @ self.basis8.conj().T

    def to_lab_basis(self, m: np.ndarray) -> np.ndarray:
        return self.basis8 @ m @ self.basis8.conj().T

    def coupling(self, tol: float = 1e-3) -> float:
        """Spectral norm of the resonant drive block (MHz); Rabi rate is twice this."""
        dn = self.n8[:, None] - self.n8[None, :]
        frame = self.e8[:, None] - self.e8[None, :] - dn * self.carrier
        mask = (np.abs(dn) == 1) & (np.abs(frame) < tol * self.carrier + 1e-9)
        block = np.where(mask, self.drive_eig, 0)[:4, :4]
        return float(np.linalg.norm(block, 2))


def drive_operator(target: str, omega: Sequence[float]) -> np.ndarray:
    ops = ELECTRON if target == "defect-electron" else NUCLEUS
    return omega[0] * ops[0] + omega[1] * ops[1] + omega[2] * ops[2]


def pi_duration(sys: SpinSystem, b0: float, target: str, omega: Sequence[float],
                carrier: float) -> float:
    """Duration (us) of a resonant pi pulse for ``omega`` at ``carrier``."""
    rf = RotatingFrame(defect_hamiltonian(sys, b0), drive_operator(target, omega), carrier)
    c = rf.coupling()
    if c == 0:
        raise ValueError("the drive does not couple any level resonant with the carrier")
    return 1.0 / (4.0 * c)


def probe_rotation(pulse: Pulse) -> np.ndarray:
    """Hard rotation of the probe generated by ``omega . S`` rotated by ``phase``."""
    c, s = math.cos(pulse.phase), math.sin(pulse.phase)
    ox, oy, oz = pulse.omega
    gen = (ox * c - oy * s) * PROBE[0] + (ox * s + oy * c) * PROBE[1] + oz * PROBE[2]
    return propagator(gen, pulse.duration)


# ---------------------------------------------------------- level labelling
def level_basis(sys: SpinSystem, b0: float) -> np.ndarray:
    """Defect eigenvectors as columns ordered epsilon_1..epsilon_4.

    Levels 1, 2 form the electron-up manifold and 3, 4 the electron-down
    manifold, each in ascending energy.
    """
    if b0 <= 0:
        raise ValueError("level labels need a positive field")
    energies, vecs = _eigh(defect_hamiltonian(sys, b0))
    sz = np.kron(_SZ, _I2)
    proj = np.real(np.einsum("ik,ij,jk->k", vecs.conj(), sz, vecs))
    if not (np.all(proj[2:] > 0) and np.all(proj[:2] < 0)):
        raise ValueError("field too weak to separate electron manifolds")
    return vecs[:, [2, 3, 0, 1]]


ELECTRON_PAIRS = {"e-": (1, 4), "e+": (2, 3)}
BRANCH_DOWN = (1, 4)
BRANCH_UP = (2, 3)


def _level_projectors(basis: np.ndarray) -> list[np.ndarray]:
    return [np.kron(_I2, np.outer(basis[:, k], basis[:, k].conj())) for k in range(4)]


def _iswap_unitary(basis: np.ndarray, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    """iSWAP between probe and defect electron on the listed (up, down) level pairs."""
    up_probe = np.array([1, 0], dtype=complex)
    dn_probe = np.array([0, 1], dtype=complex)
    u = IDENTITY8.copy()
    for upper, lower in pairs:
        a = basis[:, upper - 1]
        b = basis[:, lower - 1]
        ket_0b = np.kron(up_probe, b)
        ket_1a = np.kron(dn_probe, a)
        ket_0a = np.kron(up_probe, a)
        ket_1b = np.kron(dn_probe, b)
        proj = (np.outer(ket_0b, ket_0b.conj()) + np.outer(ket_1a, ket_1a.conj())
                + np.outer(ket_0a, ket_0a.conj()) + np.outer(ket_1b, ket_1b.conj()))
        swap = (1j * np.outer(ket_1a, ket_0b.conj()) + 1j * np.outer(ket_0b, ket_1a.conj())
                + np.outer(ket_0a, ket_0a.conj()) + np.outer(ket_1b, ket_1b.conj()))
        u = (IDENTITY8 - proj + swap) @ u
    return u


def _pairs_for(transition: str) -> list[tuple[int, int]]:
    if transition == "both":
        return [ELECTRON_PAIRS["e-"], ELECTRON_PAIRS["e+"]]
    return [ELECTRON_PAIRS[transition]]


def _depolarize_subspace(rho: np.ndarray, proj: np.ndarray, fidelity: float) -> np.ndarray:
    """Mix the block ``P rho P`` toward ``Tr(P rho) P / rank`` with weight ``1 - F``."""
    if fidelity == 1.0:
        return rho
    q = IDENTITY8 - proj
    rank = float(np.real(np.trace(proj)))
    inside = proj @ rho @ proj
    mixed = q @ rho @ q + np.real(np.trace(inside)) * proj / rank
    return fidelity * rho + (1 - fidelity) * mixed


def hhcp_iswap(state: DensityState, sys: SpinSystem, b0: float,
               conditional: str = "single-hyperfine", transition: str = "e-",
               fidelity: float = 1.0, omega_probe: float = 1.0,
               omega_defect: float = 1.0, tolerance: float = 0.01) -> DensityState:
    """Hartmann-Hahn polarization exchange as an ideal or lossy iSWAP.

    ``conditional="single-hyperfine"`` exchanges only within the hyperfine
    line ``transition`` (``"e-"`` or ``"e+"``); ``"both"`` drives both lines.
    The lossy channel applies the ideal gate and then, with probability
    ``1 - fidelity``, fully mixes the participating probe/defect subspace.
    """
    _check_matching(omega_probe, omega_defect, tolerance)
    if conditional == "both":
        transition = "both"
    elif conditional != "single-hyperfine":
        raise ValueError(f"unknown conditional mode {conditional!r}")
    _check_fidelity(fidelity)
    basis = level_basis(sys, b0)
    rho = _apply_hhcp(state.rho, basis, transition, fidelity)
    return DensityState(rho, state.basis, check=False)


def _apply_hhcp(rho: np.ndarray, basis: np.ndarray, transition: str,
                fidelity: float) -> np.ndarray:
    u = _iswap_unitary(basis, _pairs_for(transition))
    rho = u @ rho @ u.conj().T
    levels = _level_projectors(basis)
    proj = sum(levels[k - 1] for pair in _pairs_for(transition) for k in pair)
    return _depolarize_subspace(rho, proj, fidelity)


def _check_matching(omega_probe: float, omega_defect: float, tolerance: float) -> None:
    if not (omega_probe > 0 and omega_defect > 0):
        raise ValueError("HHCP drive amplitudes must be positive")
    if abs(omega_probe - omega_defect) > tolerance * omega_probe:
        raise ValueError(
            f"Hartmann-Hahn mismatch: probe {omega_probe:g} MHz vs defect "
            f"{omega_defect:g} MHz exceeds {tolerance:.0%}")


def hhcp_propagate(state: DensityState, sys: SpinSystem, b0: float,
                   transition: str = "e-", omega_probe: float = 1.0,
                   omega_defect: float = 1.0, tolerance: float = 0.01,
                   duration: float | None = None) -> DensityState:
    """Explicit spin-lock simulation of one conditional HHCP step.

    Both spins are tipped into the transverse plane, locked with matched Rabi
    rates while the dipolar flip-flop exchanges polarization, and tipped back.
    The default lock time ``1 / d_eff`` completes the exchange.
    """
    _check_matching(omega_probe, omega_defect, tolerance)
    basis = level_basis(sys, b0)
    upper, lower = ELECTRON_PAIRS[transition]
    h_def = defect_hamiltonian(sys, b0)
    energies = np.real(np.diag(basis.conj().T @ h_def @ basis))
    carrier = float(energies[upper - 1] - energies[lower - 1])
    rf = RotatingFrame(h_def, ELECTRON[0], carrier)
    scale = omega_defect / (2 * rf.coupling())
    dip = dipolar_hamiltonian(sys)
    if duration is None:
        d_op = np.kron(_I2, basis).conj().T @ dip @ np.kron(_I2, basis)
        probe_up = slice(0, 4)
        d_up = np.real(np.diag(d_op[probe_up, probe_up]))
        d_eff = 2 * (d_up[upper - 1] - d_up[lower - 1])
        if d_eff == 0:
            raise ValueError("no dipolar coupling on the selected transition")
        duration = 1.0 / abs(d_eff)
    t_half = 1.0 / (4.0 * omega_defect)
    probe_lock = omega_probe * PROBE[0]
    probe_lock_eig = rf.basis8.conj().T @ probe_lock @ rf.basis8

    rho = state.rho
    tip = probe_rotation(Pulse("probe-electron", (omega_probe, 0, 0), phase=math.pi / 2,
                               duration=1 / (4 * omega_probe)))
    rho = tip @ rho @ tip.conj().T
    t = 0.0
    u = rf.lab_propagator(rf.driven(math.pi / 2, scale), t, t + t_half)
    rho = u @ rho @ u.conj().T
    t += t_half
    h_lock = rf.driven(0.0, scale, dip) + probe_lock_eig
    u = rf.lab_propagator(h_lock, t, t + duration)
    rho = u @ rho @ u.conj().T
    t += duration
    u = rf.lab_propagator(rf.driven(-math.pi / 2, scale), t, t + t_half)
    rho = u @ rho @ u.conj().T
    untip = probe_rotation(Pulse("probe-electron", (omega_probe, 0, 0), phase=-math.pi / 2,
                                 duration=1 / (4 * omega_probe)))
    rho = untip @ rho @ untip.conj().T
    return DensityState(rho, state.basis, check=False)


# --------------------------------------------------------------- the engine
def apply_relaxation_decay(trace: "SignalTrace", dec: DecoherenceParams, kind: str,
                           baseline: float | np.ndarray = 0.0) -> "SignalTrace":
    """Multiply the contrast about ``baseline`` by ``exp(-t (1/T2 + 3/(2 T1e)))``."""
    from .analysis import SignalTrace

    t = np.asarray(trace.x, dtype=float)
    if np.any(t < 0):
        raise ValueError("decay times must be non-negative")
    env = np.exp(-t * dec.rate(kind))
    y = baseline + (np.asarray(trace.y) - baseline) * env
    return SignalTrace(trace.x, y, trace.sigma, trace.x_kind, trace.units)


@dataclass
class _Context:
    sys: SpinSystem
    b0: float
    eta: float
    dipolar_during_pulses: bool
    h_lab: np.ndarray
    lab_eig: tuple[np.ndarray, np.ndarray]
    dip: np.ndarray
    frames: dict = field(default_factory=dict)
    basis: np.ndarray | None = None

    def frame(self, pulse: Pulse) -> RotatingFrame:
        key = (pulse.target, pulse.omega, pulse.carrier)
        rf = self.frames.get(key)
        if rf is None:
            rf = RotatingFrame(defect_hamiltonian(self.sys, self.b0),
                               drive_operator(pulse.target, pulse.omega), pulse.carrier)
            self.frames[key] = rf
        return rf

    def levels(self) -> np.ndarray:
        if self.basis is None:
            self.basis = level_basis(self.sys, self.b0)
        return self.basis

    def free(self, t: float) -> np.ndarray:
        w, v = self.lab_eig
        return (v * np.exp(-2j * math.pi * w * t)) @ v.conj().T


def _make_context(sys, b0, eta, dipolar_during_pulses) -> _Context:
    h_lab = build_lab_hamiltonian(sys, b0)
    return _Context(sys, b0, eta, dipolar_during_pulses, h_lab, _eigh(h_lab),
                    dipolar_hamiltonian(sys))


def _run_blocks(blocks: Sequence[Block], ctx: _Context, toggle_on: bool) -> tuple[np.ndarray, str]:
    rho = DensityState.initial(ctx.eta).rho
    t = 0.0
    observable = "probe"
    for block in blocks:
        if isinstance(block, Delay):
            if block.duration > 0:
                u = ctx.free(block.duration)
                rho = u @ rho @ u.conj().T
                t += block.duration
        elif isinstance(block, Pulse):
            if block.target == "probe-electron":
                u = probe_rotation(block)
            else:
                if block.duration == 0:
                    continue
                rf = ctx.frame(block)
                extra = ctx.dip if ctx.dipolar_during_pulses else None
                u = rf.lab_propagator(rf.driven(block.phase, 1.0, extra), t, t + block.duration)
                t += block.duration
            rho = u @ rho @ u.conj().T
        elif isinstance(block, HHCP):
            rho = _apply_hhcp(rho, ctx.levels(), block.transition, block.fidelity)
        elif isinstance(block, Gate):
            u = _gate_unitary(ctx.levels(), block)
            rho = u @ rho @ u.conj().T
        elif isinstance(block, Depolarize):
            rho = block.fidelity * rho + (1 - block.fidelity) * _mix_defect(rho)
        elif isinstance(block, ProbeReset):
            rho = _reset_probe(rho, ctx.eta)
        elif isinstance(block, Toggle):
            if toggle_on:
                u = probe_rotation(Pulse("probe-electron", (1.0, 0, 0), duration=0.5))
                rho = u @ rho @ u.conj().T
        elif isinstance(block, Readout):
            observable = block.observable
            break
        else:  # pragma: no cover - guarded by validation
            raise TypeError(f"unsupported block {block!r}")
    return rho, observable


def _gate_unitary(basis: np.ndarray, gate: Gate) -> np.ndarray:
    a = basis[:, gate.levels[0] - 1]
    b = basis[:, gate.levels[1] - 1]
    half = gate.angle / 2
    c, s = math.cos(half), math.sin(half)
    rot = (c * (np.outer(a, a.conj()) + np.outer(b, b.conj()))
           - 1j * s * (np.exp(-1j * gate.phase) * np.outer(a, b.conj())
                       + np.exp(1j * gate.phase) * np.outer(b, a.conj())))
    u4 = np.eye(4, dtype=complex) - np.outer(a, a.conj()) - np.outer(b, b.conj()) + rot
    return np.kron(_I2, u4)


def _mix_defect(rho: np.ndarray) -> np.ndarray:
    probe = np.einsum("ajbj->ab", rho.reshape(2, 4, 2, 4))
    return np.kron(probe, np.eye(4) / 4)


def _reset_probe(rho: np.ndarray, eta: float) -> np.ndarray:
    defect = np.einsum("iaib->ab", rho.reshape(2, 4, 2, 4))
    probe = np.diag([(1 + eta) / 2, (1 - eta) / 2]).astype(complex)
    return np.kron(probe, defect)


def _observable(rho: np.ndarray, observable: str, ctx: _Context) -> float:
    if observable == "probe":
        return float(np.real(np.trace(PROBE[2] @ rho)))
    if observable == "electron-polarization":
        return 2 * float(np.real(np.trace(ELECTRON[2] @ rho)))
    probs = [float(np.real(np.trace(p @ rho))) for p in _level_projectors(ctx.levels())]
    return probs[0] + probs[3] - probs[1] - probs[2]


def _bind(blocks: Sequence[Block], bindings, x: float, extra_phase: float = 0.0) -> list:
    out = list(blocks)
    for bind in bindings:
        blk = out[bind.block]
        value = getattr(blk, bind.field) + bind.scale * x
        if bind.field == "phase":
            value += extra_phase
        out[bind.block] = replace(blk, **{bind.field: value})
    return out


def simulate_point(seq: "PulseSequence", ctx: _Context, x: float, readout: str,
                   extra_phase: float = 0.0) -> float:
    blocks = _bind(seq.blocks, seq.sweep.bindings, x, extra_phase)
    shots = (False, True) if seq.reset_toggle else (False,)
    values = []
    for toggle_on in shots:
        rho, observable = _run_blocks(blocks, ctx, toggle_on)
        value = _observable(rho, observable, ctx)
        if observable == "probe" and readout == "differential":
            if ctx.eta == 0:
                raise ValueError("differential readout needs a polarized probe (eta > 0)")
            value = 2 * value / ctx.eta
        values.append(value)
    return float(np.mean(values))


def run_sequence(seq: "PulseSequence", sys: SpinSystem, b0: float,
                 dec: DecoherenceParams | None = None, sweep: Sequence[float] | None = None,
                 readout: str = "differential", eta: float = 1.0,
                 dipolar_during_pulses: bool = False, workers: int = 1) -> "SignalTrace":
    """Simulate ``seq`` at every sweep point and return the probe signal.

    Parameters
    ----------
    readout : {"differential", "expectation"}
        ``"expectation"`` reports ``<S_z^probe>``; ``"differential"`` reports the
        normalized differential signal ``2 <S_z^probe> / eta``, which lies in
        [0, 1] for echo-type sequences. Nuclear or electron polarization
        readouts are reported as they are.
    dipolar_during_pulses : bool
        Keep the probe-defect coupling while a defect pulse is on. Off by
        default, which treats the pulses as short against ``1/d``.
    workers : int
        Thread count for evaluating sweep points; results keep sweep order.
    """
    from .analysis import SignalTrace

    if readout not in ("differential", "expectation"):
        raise ValueError(f"unknown readout {readout!r}")
    seq.validate()
    grid = np.asarray(seq.sweep.grid if sweep is None else sweep, dtype=float)
    if grid.size == 0:
        raise ValueError("empty sweep")
    ctx = _make_context(sys, b0, eta, dipolar_during_pulses)
    for blk in seq.blocks:  # build frames (and band checks) before fanning out
        if isinstance(blk, Pulse) and blk.target != "probe-electron" and not _is_bound(seq, blk):
            ctx.frame(blk)

    def point(x, extra=0.0):
        return simulate_point(seq, ctx, float(x), readout, extra)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            y = np.array(list(pool.map(point, grid)))
    else:
        y = np.array([point(x) for x in grid])
    x_kind = "frequency" if seq.sweep.variable == "frequency" else "time"
    units = "MHz" if x_kind == "frequency" else "us"
    if seq.sweep.variable == "phase":
        x_kind, units = "time", "rad"
    trace = SignalTrace(grid, y, np.zeros_like(y), x_kind, units)
    if dec is not None and seq.decay in ("ramsey", "echo"):
        if any(b.field == "phase" for b in seq.sweep.bindings):
            flipped = np.array([point(x, math.pi) for x in grid])
            baseline = 0.5 * (y + flipped)
        else:
            baseline = float(np.mean(y))
        trace = apply_relaxation_decay(trace, dec, seq.decay, baseline)
    return trace


def _is_bound(seq: "PulseSequence", blk) -> bool:
    return any(seq.blocks[b.block] is blk for b in seq.sweep.bindings)


__all__ = [
    "TARGETS", "Pulse", "Delay", "HHCP", "Gate", "Depolarize", "ProbeReset", "Toggle",
    "Readout", "DecoherenceParams", "DensityState", "RotatingFrame", "PropagationError",
    "PROBE", "ELECTRON", "NUCLEUS", "embed", "bell_unitary", "defect_hamiltonian",
    "dipolar_hamiltonian", "build_lab_hamiltonian", "propagator", "evolve",
    "drive_operator", "pi_duration", "probe_rotation", "level_basis", "hhcp_iswap",
    "hhcp_propagate", "apply_relaxation_decay", "run_sequence", "BRANCH_DOWN", "BRANCH_UP",
]
