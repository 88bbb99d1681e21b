"""Catalog of pulse protocols as declarative, serializable sequences.

A :class:`PulseSequence` is a list of blocks plus one sweep. The sweep names
its variable and grid, and a list of bindings says which block fields follow
it: ``field = base + scale * x``. A DEER time sweep, for example, binds the
two half delays with ``scale=0.5``. A phase-modulated Ramsey binds the final
pi/2 phase with ``scale = 2 pi f_mod``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Sequence

import numpy as np

from .propagator import (
    HHCP,
    Delay,
    Depolarize,
    Gate,
    ProbeReset,
    Pulse,
    Readout,
    Toggle,
)

SCHEMA = "defectspin.sequence/1"
SWEEP_VARIABLES = ("tau", "frequency", "rf-duration", "phase")
NEETR_MODES = ("spectroscopy", "rabi", "ramsey", "echo")

_BLOCK_KINDS = {
    "pulse": Pulse,
    "delay": Delay,
    "hhcp": HHCP,
    "gate": Gate,
    "depolarize": Depolarize,
    "probe-reset": ProbeReset,
    "toggle": Toggle,
    "readout": Readout,
}
_KIND_OF = {cls: kind for kind, cls in _BLOCK_KINDS.items()}
_BINDABLE = {Pulse: ("carrier", "phase", "duration"), Delay: ("duration",)}

# Probe pulses: hard rotations with a 1 MHz Rabi rate.
PROBE_RABI = 1.0
_PROBE_X = (PROBE_RABI, 0.0, 0.0)


class SequenceError(ValueError):
    """A sequence document or object is malformed."""


@dataclass(frozen=True)
class Binding:
    block: int
    field: str
    scale: float = 1.0


@dataclass(frozen=True)
class Sweep:
    variable: str
    grid: tuple[float, ...]
    bindings: tuple[Binding, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
        object.__setattr__(self, "bindings", tuple(self.bindings))


@dataclass(frozen=True)
class PulseSequence:
    name: str
    blocks: tuple
    sweep: Sweep
    phase_mod: float | None = None  # kHz
    reset_toggle: bool = False
    decay: str | None = None  # "ramsey" or "echo" selects the contrast envelope

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))

    def validate(self) -> None:
        """Check the structural invariants the simulator relies on."""
        if not self.blocks or not isinstance(self.blocks[-1], Readout):
            raise SequenceError(f"{self.name}: sequence must end with a readout")
        if sum(isinstance(b, Readout) for b in self.blocks) != 1:
            raise SequenceError(f"{self.name}: exactly one readout is allowed")
        if self.sweep.variable not in SWEEP_VARIABLES:
            raise SequenceError(f"{self.name}: unknown sweep variable {self.sweep.variable!r}")
        for b in self.sweep.bindings:
            if not 0 <= b.block < len(self.blocks):
                raise SequenceError(f"{self.name}: binding refers to missing block {b.block}")
            allowed = _BINDABLE.get(type(self.blocks[b.block]), ())
            if b.field not in allowed:
                raise SequenceError(
                    f"{self.name}: block {b.block} field {b.field!r} cannot follow the sweep")
        if self.decay not in (None, "ramsey", "echo"):
            raise SequenceError(f"{self.name}: unknown decay kind {self.decay!r}")

    # ----------------------------------------------------------- serialization
    def to_dict(self) -> dict[str, Any]:
        blocks = []
        for blk in self.blocks:
            doc = {"kind": _KIND_OF[type(blk)]}
            for f in fields(blk):
                value = getattr(blk, f.name)
                doc[f.name] = list(value) if isinstance(value, tuple) else value
            blocks.append(doc)
        return {
            "schema": SCHEMA,
            "name": self.name,
            "blocks": blocks,
            "sweep": {
                "variable": self.sweep.variable,
                "grid": list(self.sweep.grid),
                "bindings": [asdict(b) for b in self.sweep.bindings],
            },
            "phase_mod": self.phase_mod,
            "reset_toggle": self.reset_toggle,
            "decay": self.decay,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "PulseSequence":
        if doc.get("schema") != SCHEMA:
            raise SequenceError(f"schema: expected {SCHEMA!r}, got {doc.get('schema')!r}")
        blocks = []
        for i, bdoc in enumerate(doc.get("blocks", [])):
            kind = bdoc.get("kind")
            if kind not in _BLOCK_KINDS:
                raise SequenceError(f"blocks[{i}].kind: unknown block kind {kind!r}")
            kwargs = {k: v for k, v in bdoc.items() if k != "kind"}
            for key in ("omega", "levels"):
                if key in kwargs:
                    kwargs[key] = tuple(kwargs[key])
            try:
                blocks.append(_BLOCK_KINDS[kind](**kwargs))
            except (TypeError, ValueError) as exc:
                raise SequenceError(f"blocks[{i}]: {exc}") from exc
        try:
            sdoc = doc["sweep"]
            sweep = Sweep(sdoc["variable"], sdoc["grid"],
                          tuple(Binding(**b) for b in sdoc.get("bindings", [])))
            seq = cls(doc["name"], blocks, sweep, doc.get("phase_mod"),
                      bool(doc.get("reset_toggle", False)), doc.get("decay"))
        except (KeyError, TypeError) as exc:
            raise SequenceError(f"sweep/name: {exc}") from exc
        seq.validate()
        return seq

    @classmethod
    def from_json(cls, text: str) -> "PulseSequence":
        return cls.from_dict(json.loads(text))

    def with_grid(self, grid: Sequence[float]) -> "PulseSequence":
        sweep = Sweep(self.sweep.variable, grid, self.sweep.bindings)
        return PulseSequence(self.name, self.blocks, sweep, self.phase_mod,
                             self.reset_toggle, self.decay)


# ------------------------------------------------------------------ helpers
def _probe(angle_fraction: float, phase: float) -> Pulse:
    """Hard probe rotation by ``angle_fraction * 2 pi``."""
    return Pulse("probe-electron", _PROBE_X, phase=phase, duration=angle_fraction / PROBE_RABI)


def _probe_half_pi(phase: float) -> Pulse:
    return _probe(0.25, phase)


def _probe_pi() -> Pulse:
    return _probe(0.5, 0.0)


def _grid(values, what: str) -> tuple[float, ...]:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.size == 0:
        raise SequenceError(f"empty {what} grid")
    if not np.all(np.isfinite(arr)):
        raise SequenceError(f"{what} grid contains non-finite values")
    return tuple(float(v) for v in arr)


def _echo(tau_half: float, defect_pulse: Pulse) -> list:
    """Probe echo whose pi pulse sits at the midpoint of the defect pi pulse."""
    half = Pulse(defect_pulse.target, defect_pulse.omega, defect_pulse.carrier,
                 defect_pulse.phase, defect_pulse.duration / 2)
    return [
        _probe_half_pi(math.pi / 2),
        Delay(tau_half),
        half,
        _probe_pi(),
        half,
        Delay(tau_half),
        _probe_half_pi(-math.pi / 2),
        Readout(),
    ]


# ---------------------------------------------------------------- factories
def make_deer(tau: float, freq_grid: Sequence[float], *, omega: float = 1.0,
              t_pi: float | None = None, name: str = "deer") -> PulseSequence:
    """Probe spin echo with a recoupling pi pulse on the defect at swept frequency.

    ``t_pi`` defaults to ``1 / (2 omega)``, the pi time of a bare spin-1/2
    transition. Use :func:`defectspin.propagator.pi_duration` to calibrate
    it on a specific system.
    """
    if not tau > 0:
        raise SequenceError("tau must be positive")
    grid = _grid(freq_grid, "frequency")
    t_pi = 1.0 / (2.0 * omega) if t_pi is None else t_pi
    blocks = _echo(tau / 2, Pulse("defect-electron", (omega, 0.0, 0.0), 0.0, 0.0, t_pi))
    bindings = (Binding(2, "carrier"), Binding(4, "carrier"))
    return PulseSequence(name, blocks, Sweep("frequency", grid, bindings))


def make_zf_deer(tau: float | None = None, freq_grid: Sequence[float] | None = None, *,
                 tau_grid: Sequence[float] | None = None, carrier: float | None = None,
                 omega: float = 1.0, t_pi: float | None = None) -> PulseSequence:
    """Zero-field DEER in frequency-sweep (``tau`` + ``freq_grid``) or time-sweep
    (``carrier`` + ``tau_grid``) mode."""
    if freq_grid is not None:
        if tau is None or tau_grid is not None:
            raise SequenceError("frequency-sweep mode needs tau and freq_grid only")
        return make_deer(tau, freq_grid, omega=omega, t_pi=t_pi, name="zf-deer")
    if tau_grid is None or carrier is None:
        raise SequenceError("time-sweep mode needs carrier and tau_grid")
    grid = _grid(tau_grid, "tau")
    if min(grid) < 0:
        raise SequenceError("tau values must be non-negative")
    t_pi = 1.0 / (2.0 * omega) if t_pi is None else t_pi
    blocks = _echo(0.0, Pulse("defect-electron", (omega, 0.0, 0.0), carrier, 0.0, t_pi))
    bindings = (Binding(1, "duration", 0.5), Binding(5, "duration", 0.5))
    return PulseSequence("zf-deer-time", blocks, Sweep("tau", grid, bindings))


def make_neetr(grid: Sequence[float], mode: str = "spectroscopy", *,
               rf_carrier: float | None = None, rf_omega: float = 0.05,
               rf_pi: float = 10.0, transition: str = "e-", hhcp_fidelity: float = 1.0,
               f_mod: float | None = None, reset_toggle: bool = True) -> PulseSequence:
    """Nuclear-electron-electron triple resonance.

    Order: conditional HHCP on ``transition``, optional reset pi pulse on the
    probe (alternate shots), RF block, conditional HHCP, readout.

    Parameters
    ----------
    grid : sequence of float
        RF frequencies (MHz) for ``spectroscopy``, RF durations (us) for
        ``rabi``, free-evolution times (us) for ``ramsey`` and ``echo``.
    rf_pi : float
        Nuclear pi-pulse duration (us); pi/2 pulses use half of it.
    f_mod : float, optional
        Phase-modulation frequency (kHz) of the final pi/2 in Ramsey/echo.
    """
    if mode not in NEETR_MODES:
        raise SequenceError(f"unknown NEETR mode {mode!r}")
    values = _grid(grid, "NEETR")
    if mode != "spectroscopy" and rf_carrier is None:
        raise SequenceError(f"{mode} mode needs rf_carrier")
    if mode == "spectroscopy" and rf_carrier is not None:
        raise SequenceError("spectroscopy mode sweeps the RF carrier; do not set rf_carrier")
    if mode in ("ramsey", "echo") and min(values) < 0:
        raise SequenceError("evolution times must be non-negative")
    if mode == "rabi" and min(values) < 0:
        raise SequenceError("RF durations must be non-negative")
    rf = (rf_omega, 0.0, 0.0)
    head = [HHCP(transition, hhcp_fidelity), Toggle()]
    tail = [HHCP(transition, hhcp_fidelity), Readout()]
    bindings: list[Binding] = []
    decay = None
    phase_mod = None
    if mode == "spectroscopy":
        body = [Pulse("defect-nucleus", rf, 0.0, 0.0, rf_pi)]
        bindings.append(Binding(2, "carrier"))
        variable = "frequency"
    elif mode == "rabi":
        body = [Pulse("defect-nucleus", rf, rf_carrier, 0.0, 0.0)]
        bindings.append(Binding(2, "duration"))
        variable = "rf-duration"
    else:
        half = Pulse("defect-nucleus", rf, rf_carrier, 0.0, rf_pi / 2)
        if mode == "ramsey":
            body = [half, Delay(0.0), half]
            bindings.append(Binding(3, "duration"))
        else:
            body = [half, Delay(0.0), Pulse("defect-nucleus", rf, rf_carrier, 0.0, rf_pi),
                    Delay(0.0), half]
            bindings += [Binding(3, "duration", 0.5), Binding(5, "duration", 0.5)]
        final = 2 + len(body) - 1
        if f_mod is not None:
            phase_mod = float(f_mod)
            bindings.append(Binding(final, "phase", 2 * math.pi * f_mod * 1e-3))
        variable = "tau"
        decay = mode
    blocks = head + body + tail
    return PulseSequence(f"neetr-{mode}", blocks, Sweep(variable, values, tuple(bindings)),
                         phase_mod, reset_toggle, decay)


def make_nuclear_init(repetitions: int = 1, *, hhcp_fidelity: float = 1.0,
                      swap_fidelity: float = 1.0,
                      wait_grid: Sequence[float] = (0.0,)) -> PulseSequence:
    """Full NV-to-electron iSWAP followed by a two-gate electron-nuclear SWAP.

    The SWAP is an electron pi pulse conditional on nuclear spin up (levels
    2-3) and a nuclear pi pulse conditional on electron down (levels 3-4),
    which moves the electron polarization into the ``down`` nuclear branch
    (levels 1 and 4). Each repetition re-polarizes the probe first. The
    readout reports the nuclear polarization after an optional wait.
    """
    if repetitions < 1:
        raise SequenceError("repetitions must be >= 1")
    blocks: list = []
    for rep in range(repetitions):
        if rep:
            blocks.append(ProbeReset())
        blocks += [HHCP("both", hhcp_fidelity), Gate((2, 3)), Gate((3, 4)),
                   Depolarize(swap_fidelity)]
    blocks += [Delay(0.0), Readout("nuclear-polarization")]
    grid = _grid(wait_grid, "wait")
    sweep = Sweep("tau", grid, (Binding(len(blocks) - 2, "duration"),))
    return PulseSequence(f"nuclear-init-x{repetitions}", blocks, sweep)


def make_hhcp_roundtrip(phase_grid: Sequence[float], *, hhcp_fidelity: float = 1.0) -> PulseSequence:
    """Two HHCP exchanges with the first readout pi/2 phase swept.

    Models the round-trip calibration: the probe's polarization goes to the
    defect and back; a phase-swept pi/2 pair on the probe turns the returned
    polarization into a cosine whose amplitude is the round-trip contrast.
    """
    grid = _grid(phase_grid, "phase")
    blocks = [HHCP("both", hhcp_fidelity), HHCP("both", hhcp_fidelity),
              _probe_half_pi(0.0), _probe_half_pi(0.0), Readout()]
    return PulseSequence("hhcp-roundtrip", blocks,
                         Sweep("phase", grid, (Binding(2, "phase"),)))


__all__ = [
    "SCHEMA", "SWEEP_VARIABLES", "NEETR_MODES", "SequenceError", "Binding", "Sweep",
    "PulseSequence", "make_deer", "make_zf_deer", "make_neetr", "make_nuclear_init",
    "make_hhcp_roundtrip",
]
