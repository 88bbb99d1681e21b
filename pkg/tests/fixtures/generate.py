"""Regenerate the frozen test fixtures.

Run from the repository root: ``python tests/fixtures/generate.py``. The
measurement sets for X1 and X2 are reconstructed values (see the decisions
ledger); the traces are produced by the CLI or by seeded synthetic noise.
"""

import json
import warnings
from pathlib import Path

import numpy as np

from defectspin import HyperfineTensor, SignalTrace, SpinSystem, level_spectrum
from defectspin.cli import main
from defectspin.spin_model import SecularValidityWarning, secular_components

HERE = Path(__file__).resolve().parent
CONFIGS = HERE.parent.parent / "configs"
B0 = 365.0


def measurement(label, splitting, n_minus, n_plus, lines, sigma_a=0.5, sigma_n=0.05):
    return {
        "schema": "defectspin.measurement/1",
        "label": label,
        "b0": B0,
        "splitting": {"value": splitting, "sigma": sigma_a},
        "omega_n_minus": {"value": n_minus, "sigma": sigma_n},
        "omega_n_plus": {"value": n_plus, "sigma": sigma_n},
        "zf_lines": [{"frequency": f, "sigma": 0.2, "d": d, "d_sigma": 3.0} for f, d in lines],
    }


def forward_fixture():
    """Measurement produced by the forward model at a known orientation."""
    sys = SpinSystem(HyperfineTensor.from_uniaxial(39.0, 25.0, 60.0, 30.0), gamma_n=42.577)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SecularValidityWarning)
        spec = level_spectrum(sys, B0)
    a = secular_components(sys).splitting
    doc = measurement("forward", a, *spec.nuclear_transitions, [(7.0, 70.0), (32.0, 70.0)],
                      sigma_a=0.0, sigma_n=0.0)
    doc["truth"] = {"theta_x": 60.0, "phi_x": 30.0}
    return doc


def t1e_trace(seed=5):
    t = np.linspace(0.0, 8000.0, 81)
    rng = np.random.default_rng(seed)
    y = 0.3 * np.exp(-t / 2000.0) + 0.5 + rng.normal(0.0, 0.003, t.size)
    return SignalTrace(t, y, np.full(t.size, 0.003))


def dump(doc, name):
    (HERE / name).write_text(json.dumps(doc, indent=2) + "\n")


if __name__ == "__main__":
    dump(measurement("X1", 26.4, 13.33, 16.44, [(7.0, 70.0), (32.0, 70.0)]), "x1.json")
    dump(measurement("X2", 8.6, 4.24, 4.56, [(5.0, 47.0), (11.0, 47.0)], sigma_a=0.4), "x2.json")
    dump(forward_fixture(), "forward.json")
    t1e_trace().to_csv(HERE / "t1e_trace.csv")
    for cfg in ("x1_coupling.json", "x1_neetr_echo.json"):
        assert main(["simulate", "--config", str(CONFIGS / cfg), "--out", str(HERE)]) == 0
    (HERE / "manifest.json").unlink()
