import json
import math

import numpy as np
import pytest
from scipy.signal import find_peaks

from defectspin.analysis import SignalTrace, fft_psd, fit_decaying_cosine, fit_lorentzian
from defectspin.estimation import identify_species
from defectspin.propagator import defect_hamiltonian, pi_duration, run_sequence
from defectspin.sequences import (
    SCHEMA,
    Binding,
    Delay,
    PulseSequence,
    Readout,
    SequenceError,
    Sweep,
    make_deer,
    make_hhcp_roundtrip,
    make_neetr,
    make_nuclear_init,
    make_zf_deer,
)
from defectspin.spin_model import HyperfineTensor, SpinSystem, level_spectrum

GAMMA_H = 42.577
B0 = 365.0


def system(a_par, a_perp, theta=None, phi=None, **kw):
    return SpinSystem(HyperfineTensor.from_uniaxial(a_par, a_perp, theta, phi), **kw)


def x1_field(gamma_n=GAMMA_H):
    return system(39.0, 25.0, 60.0, 30.0, gamma_n=gamma_n, d_zz=140.0)


def nuclear_lines(sys):
    """Exact nuclear transitions of the defect Hamiltonian, (up, down) manifold."""
    e = np.linalg.eigvalsh(defect_hamiltonian(sys, B0))
    return e[3] - e[2], e[1] - e[0]


# --------------------------------------------------------------------- DEER
def test_deer_dip_is_deepest_at_half_inverse_coupling():
    sys = system(39.0, 25.0, 60.0, 30.0, gamma_n=GAMMA_H, d_zz=140.0)
    e = np.linalg.eigvalsh(defect_hamiltonian(sys, B0))
    line = e[2] - e[0]
    depths = {}
    for tau in (1.0, 1 / (2 * 0.14), 6.0):
        depths[tau] = 1 - run_sequence(make_deer(tau, [line]), sys, B0).y[0]
    assert max(depths, key=depths.get) == pytest.approx(1 / 0.28)


def test_deer_rejects_bad_tau_and_empty_grid():
    with pytest.raises(SequenceError):
        make_deer(0.0, [1.0])
    with pytest.raises(SequenceError):
        make_deer(1.0, [])
    with pytest.raises(SequenceError):
        make_deer(1.0, [np.nan])


# ------------------------------------------------------------------ ZF-DEER
@pytest.mark.parametrize("a_par, a_perp, d_zz, expected", [
    (39.0, 25.0, 140.0, 70.0),
    (16.0, 6.0, 94.0, 47.0),
])
def test_zf_time_sweep_oscillates_at_coupling(a_par, a_perp, d_zz, expected):
    sys = system(a_par, a_perp, d_zz=d_zz)
    carrier = (a_par + a_perp) / 2
    seq = make_zf_deer(tau_grid=np.linspace(0, 30, 151), carrier=carrier, t_pi=0.5)
    fit = fit_decaying_cosine(run_sequence(seq, sys, 0.0), "free-T", "constant")
    # The signal is a squared cosine, whose second harmonic pulls a one-tone fit low.
    assert fit["f"] * 1e3 == pytest.approx(expected, rel=0.05)


def test_zf_deer_mode_errors():
    with pytest.raises(SequenceError):
        make_zf_deer(freq_grid=[1.0])
    with pytest.raises(SequenceError):
        make_zf_deer(tau_grid=[1.0])
    with pytest.raises(SequenceError):
        make_zf_deer(tau_grid=[-1.0], carrier=7.0)
    with pytest.raises(SequenceError):
        make_zf_deer(8.0, [1.0], tau_grid=[1.0])


def test_zf_frequency_sweep_resolves_eight_lines_of_a_four_defect_environment():
    # Two defects from the measured set plus two hypothetical ones filling the band.
    env = [((39.0, 25.0), 140.0), ((16.0, 6.0), 94.0), ((33.0, 7.0), 120.0),
           ((52.5, 4.5), 100.0)]
    grid = np.arange(2.0, 36.0, 0.05)
    y = np.ones_like(grid)
    for (a_par, a_perp), d in env:
        sys = system(a_par, a_perp, d_zz=d)
        e = np.linalg.eigvalsh(defect_hamiltonian(sys, 0.0))
        inside = grid <= 2 * (e.max() - e.min()) + 10  # flat baseline beyond the band
        y[inside] *= run_sequence(make_zf_deer(10.0, grid[inside], t_pi=0.5), sys, 0.0).y
    peaks, _ = find_peaks(1 - y, height=0.5)
    expected = [5.0, 7.0, 11.0, 13.0, 20.0, 24.0, 28.5, 32.0]
    np.testing.assert_allclose(grid[peaks], expected, atol=0.1)
    fit = fit_lorentzian(SignalTrace(grid, y, 0.0, "frequency"), 8)
    centers = sorted(fit[f"f{i}"] for i in range(1, 9))
    assert np.all(np.abs(np.array(centers) - expected) < fit["gamma"])


# -------------------------------------------------------------------- NEETR
def test_neetr_spectroscopy_lines_match_transitions_and_hydrogen():
    sys = x1_field()
    grid = np.arange(15.0, 23.5, 0.02)
    fit = fit_lorentzian(run_sequence(make_neetr(grid, "spectroscopy"), sys, B0), 2)
    up, down = nuclear_lines(sys)
    assert fit["f1"] == pytest.approx(up, abs=0.01)
    assert fit["f2"] == pytest.approx(down, abs=0.01)
    split = fit["f2"] - fit["f1"]
    assert split == pytest.approx(2 * GAMMA_H * B0 * 1e-4, rel=0.02)
    report = identify_species(split, B0, sigma=0.1)
    assert report.best.isotope.name == "1H"


def test_neetr_gamma_sign_flip_only_swaps_labels():
    grid = np.arange(15.0, 23.5, 0.02)
    traces = [run_sequence(make_neetr(grid, "spectroscopy"), x1_field(g), B0).y
              for g in (GAMMA_H, -GAMMA_H)]
    np.testing.assert_allclose(traces[0], traces[1], atol=1e-9)
    plus = level_spectrum(x1_field(GAMMA_H), B0)
    minus = level_spectrum(x1_field(-GAMMA_H), B0)
    assert sorted(plus.nuclear_transitions) == pytest.approx(sorted(minus.nuclear_transitions))


def test_neetr_rabi_period_is_twice_the_pi_time():
    sys = x1_field()
    carrier, _ = nuclear_lines(sys)
    t_pi = pi_duration(sys, B0, "defect-nucleus", (0.05, 0.0, 0.0), carrier)
    assert t_pi == pytest.approx(10.0, rel=0.01)
    y = run_sequence(make_neetr([0.0, t_pi, 2 * t_pi, 3 * t_pi], "rabi", rf_carrier=carrier),
                     sys, B0).y
    np.testing.assert_allclose(y, [0.5, 0.25, 0.5, 0.25], atol=1e-3)


def test_neetr_ramsey_follows_phase_modulation():
    sys = x1_field()
    carrier, _ = nuclear_lines(sys)
    t_pi = pi_duration(sys, B0, "defect-nucleus", (0.05, 0.0, 0.0), carrier)
    seq = make_neetr(np.linspace(0, 200, 101), "ramsey", rf_carrier=carrier, rf_pi=t_pi,
                     f_mod=20.0)
    assert seq.phase_mod == 20.0 and seq.decay == "ramsey"
    trace = run_sequence(seq, sys, B0)
    psd = fft_psd(trace)
    assert psd.x[np.argmax(psd.y)] == pytest.approx(0.020, abs=psd.x[1] - psd.x[0])
    assert fit_decaying_cosine(trace, "free-T", "constant")["f"] == pytest.approx(0.020, rel=1e-4)


def test_neetr_mode_errors():
    with pytest.raises(SequenceError):
        make_neetr([1.0], "hahn")
    with pytest.raises(SequenceError):
        make_neetr([1.0], "rabi")
    with pytest.raises(SequenceError):
        make_neetr([17.0], "spectroscopy", rf_carrier=17.0)
    with pytest.raises(SequenceError):
        make_neetr([-1.0], "echo", rf_carrier=17.0)
    with pytest.raises(SequenceError):
        make_neetr([-1.0], "rabi", rf_carrier=17.0)


def test_neetr_echo_binds_both_halves_and_final_phase():
    seq = make_neetr([0.0, 100.0], "echo", rf_carrier=17.6, f_mod=1.0)
    fields = [(b.block, b.field, b.scale) for b in seq.sweep.bindings]
    assert fields[:2] == [(3, "duration", 0.5), (5, "duration", 0.5)]
    block, field, scale = fields[2]
    assert field == "phase" and scale == pytest.approx(2 * math.pi * 1e-3)


# ------------------------------------------------------ nuclear initialization
@pytest.mark.parametrize("fid, swap, eta, expected", [
    (1.0, 1.0, 1.0, 1.0),
    (1.0, 1.0, 0.8, 0.8),
    (0.87, 1.0, 0.8, 0.696),
    (0.87, 0.85, 0.8, 0.5916),
])
def test_nuclear_init_polarization(fid, swap, eta, expected):
    seq = make_nuclear_init(hhcp_fidelity=fid, swap_fidelity=swap)
    y = run_sequence(seq, x1_field(), B0, eta=eta).y
    assert y[0] == pytest.approx(expected, abs=1e-6)


def test_nuclear_init_rejects_zero_repetitions():
    with pytest.raises(SequenceError):
        make_nuclear_init(0)


# ------------------------------------------------------------ serialization
@pytest.mark.parametrize("seq", [
    make_deer(3.5, [1000.0, 1010.0]),
    make_zf_deer(tau_grid=[0.0, 1.0], carrier=32.0),
    make_neetr([0.0, 50.0], "echo", rf_carrier=17.6, f_mod=1.0),
    make_nuclear_init(2, hhcp_fidelity=0.87),
    make_hhcp_roundtrip([0.0, math.pi]),
])
def test_json_round_trip(seq):
    back = PulseSequence.from_json(seq.to_json())
    assert back == seq
    assert json.loads(back.to_json()) == json.loads(seq.to_json())


def test_from_dict_reports_the_offending_field():
    doc = make_deer(3.5, [1000.0]).to_dict()
    with pytest.raises(SequenceError, match="schema"):
        PulseSequence.from_dict({**doc, "schema": "other/1"})
    bad = json.loads(json.dumps(doc))
    bad["blocks"][1]["kind"] = "laser"
    with pytest.raises(SequenceError, match=r"blocks\[1\]"):
        PulseSequence.from_dict(bad)
    bad = json.loads(json.dumps(doc))
    del bad["sweep"]
    with pytest.raises(SequenceError, match="sweep"):
        PulseSequence.from_dict(bad)


def test_validate_structure():
    sweep = Sweep("tau", [0.0])
    with pytest.raises(SequenceError, match="readout"):
        PulseSequence("x", [Delay(1.0)], sweep).validate()
    with pytest.raises(SequenceError, match="exactly one"):
        PulseSequence("x", [Readout(), Readout()], sweep).validate()
    with pytest.raises(SequenceError, match="sweep variable"):
        PulseSequence("x", [Readout()], Sweep("field", [0.0])).validate()
    with pytest.raises(SequenceError, match="missing block"):
        PulseSequence("x", [Readout()], Sweep("tau", [0.0], (Binding(3, "duration"),))).validate()
    with pytest.raises(SequenceError, match="cannot follow"):
        PulseSequence("x", [Delay(0.0), Readout()],
                      Sweep("tau", [0.0], (Binding(0, "carrier"),))).validate()
    with pytest.raises(SequenceError, match="decay"):
        PulseSequence("x", [Readout()], sweep, decay="fid").validate()
    assert SCHEMA.startswith("defectspin.sequence/")


def test_with_grid_keeps_everything_else():
    seq = make_neetr([0.0], "echo", rf_carrier=17.6, f_mod=1.0)
    other = seq.with_grid([1.0, 2.0])
    assert other.sweep.grid == (1.0, 2.0)
    assert other.blocks == seq.blocks and other.phase_mod == seq.phase_mod
