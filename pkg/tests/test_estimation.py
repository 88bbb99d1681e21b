import json
import math

import numpy as np
import pytest

from defectspin.estimation import (
    AmbiguousGroupingError,
    DefectRecord,
    EstimationError,
    Isotope,
    MeasurementSet,
    Value,
    ZFLine,
    angle_grid,
    azz_ratio_map,
    extract_hyperfine_from_zf,
    group_lines_by_coupling,
    identify_species,
    load_defect_db,
    load_isotopes,
    match_defect,
    polarization_from_peaks,
    residual_map,
)
from defectspin.spin_model import (
    HyperfineTensor,
    SpinSystem,
    level_spectrum,
    secular_components,
    zf_transitions,
)

GAMMA_H = 42.577


def load(fixtures_dir, name):
    return MeasurementSet.from_json(fixtures_dir / f"{name}.json")


# ------------------------------------------------------------- extraction
@pytest.mark.parametrize("lines, expected", [((7.0, 32.0), (39.0, 25.0)),
                                             ((5.0, 11.0), (16.0, 6.0))])
def test_extraction_from_line_pair(lines, expected):
    est = extract_hyperfine_from_zf(*lines)
    assert (est.a_par, est.a_perp) == expected
    # Two lines, each with 0.5 G stray field and 0.2 MHz width, in quadrature.
    assert est.sigma_par == pytest.approx(1.03, abs=0.01)
    assert est.tensor.uniaxial() and est.tensor.theta_x is None


def test_equal_lines_give_isotropic_z():
    est = extract_hyperfine_from_zf(12.0, 12.0)
    assert est.a_perp == 0.0 and est.a_par == 24.0


def test_extraction_errors():
    with pytest.raises(EstimationError, match="unpaired"):
        extract_hyperfine_from_zf(7.0, None)
    with pytest.raises(EstimationError, match="mis-grouped"):
        extract_hyperfine_from_zf(32.0, 7.0)


def test_line_sigma_overrides_default_width():
    narrow = extract_hyperfine_from_zf(ZFLine(7.0, 70.0, sigma=0.01), ZFLine(32.0, 70.0, sigma=0.01),
                                       b_e=0.0)
    assert narrow.sigma_par == pytest.approx(math.sqrt(2) * 0.01)


# ---------------------------------------------------------------- grouping
def test_grouping_forms_two_pairs():
    lines = [ZFLine(7.0, 70.0, 3.0), ZFLine(5.0, 47.0, 3.0), ZFLine(32.0, 70.0, 3.0),
             ZFLine(11.0, 47.0, 3.0)]
    grouping = group_lines_by_coupling(lines)
    assert [(a.frequency, b.frequency) for a, b in grouping.pairs] == [(5.0, 11.0), (7.0, 32.0)]
    assert grouping.unpaired == []


def test_single_line_is_unpaired():
    grouping = group_lines_by_coupling([ZFLine(7.0, 70.0, 3.0)])
    assert grouping.pairs == [] and grouping.unpaired[0].frequency == 7.0


def test_three_lines_with_equal_coupling_are_ambiguous():
    lines = [ZFLine(15.2, 60.0, 2.0), ZFLine(15.8, 61.0, 2.0), ZFLine(16.6, 59.0, 2.0)]
    with pytest.raises(AmbiguousGroupingError) as err:
        group_lines_by_coupling(lines)
    for f in ("15.2", "15.8", "16.6"):
        assert f in str(err.value)


def test_grouping_needs_lines():
    with pytest.raises(EstimationError):
        group_lines_by_coupling([])


# ------------------------------------------------------------ measurements
def test_measurement_round_trip(fixtures_dir):
    meas = load(fixtures_dir, "x1")
    again = MeasurementSet.from_dict(json.loads(json.dumps(meas.to_dict())))
    assert again == meas


def test_measurement_validation():
    with pytest.raises(ValueError):
        MeasurementSet(Value(0.0), Value(1.0), Value(1.0), 365.0)
    with pytest.raises(ValueError):
        MeasurementSet(Value(1.0), Value(1.0), Value(1.0), 0.0)
    with pytest.raises(ValueError, match="missing"):
        MeasurementSet.from_dict({"b0": 1.0, "splitting": 1.0, "omega_n_minus": 1.0})
    with pytest.raises(ValueError, match="schema"):
        MeasurementSet.from_dict({"schema": "other"})
    with pytest.raises(ValueError):
        Value(1.0, -0.1)


# ----------------------------------------------------------- residual maps
def test_angle_grid_shape():
    theta, phi = angle_grid(1.0)
    assert (len(theta), len(phi)) == (181, 360)
    assert phi[0] == -179.0 and phi[-1] == 180.0
    with pytest.raises(ValueError):
        angle_grid(0.0)


def test_x2_residual_map(fixtures_dir):
    rmap = residual_map(load(fixtures_dir, "x2"), 16.0, 6.0, -4.316)
    assert rmap.eps_min == pytest.approx(0.019, abs=0.005)
    assert rmap.absolute_residual * 1e3 == pytest.approx(90.0, rel=0.2)
    assert rmap.values.shape == (181, 360)


def test_x1_residual_map(fixtures_dir):
    rmap = residual_map(load(fixtures_dir, "x1"), 39.0, 25.0, GAMMA_H)
    assert rmap.eps_min == pytest.approx(0.10, abs=0.02)
    assert rmap.absolute_residual == pytest.approx(1.5, rel=0.1)
    assert rmap.eps_min <= rmap.min
    assert len(rmap.argmin_set) >= 1


def test_forward_fixture_is_recovered_at_true_angles(fixtures_dir):
    rmap = residual_map(load(fixtures_dir, "forward"), 39.0, 25.0, GAMMA_H)
    assert rmap.eps_min < 1e-9
    assert (60.0, 30.0) in rmap.argmin_set


def test_weighted_residuals_need_uncertainties(fixtures_dir):
    meas = load(fixtures_dir, "forward")
    with pytest.raises(EstimationError):
        residual_map(meas, 39.0, 25.0, GAMMA_H, grid_deg=10.0, weighted=True)
    weighted = residual_map(load(fixtures_dir, "x2"), 16.0, 6.0, -4.316, grid_deg=5.0,
                            weighted=True)
    assert weighted.weighted and math.isnan(weighted.absolute_residual)


def test_azz_ratio_map_isotropic_and_compositional():
    flat = azz_ratio_map(20.0, 20.0, grid_deg=10.0)
    np.testing.assert_allclose(flat.values, 1.0)
    amap = azz_ratio_map(39.0, 25.0, grid_deg=10.0)
    i, j = list(amap.theta).index(60.0), list(amap.phi).index(30.0)
    sc = secular_components(SpinSystem(HyperfineTensor.from_uniaxial(39.0, 25.0, 60.0, 30.0)))
    assert amap.values[i, j] == pytest.approx(abs(sc.a_zz) / sc.splitting, abs=1e-12)


# ------------------------------------------------------------------ species
def test_x1_splitting_ranks_hydrogen_with_fluorine_close(fixtures_dir):
    meas = load(fixtures_dir, "x1")
    report = identify_species(meas.omega_n_plus.value - meas.omega_n_minus.value, meas.b0)
    names = [c.isotope.name for c in report.candidates]
    assert names[0] == "1H"
    fluorine = report.candidates[names.index("19F")]
    assert fluorine.within_tolerance and fluorine.deviation < 0.06
    assert report.ambiguous == ["1H", "19F"]


def test_x2_splitting_ranks_nitrogen_15(fixtures_dir):
    meas = load(fixtures_dir, "x2")
    report = identify_species(meas.omega_n_plus.value - meas.omega_n_minus.value, meas.b0)
    assert report.best.isotope.name == "15N"
    assert report.best.isotope.gamma == -4.316


def test_zero_splitting_is_the_no_match_sentinel():
    report = identify_species(0.0, 365.0)
    assert report.gamma_est == 0.0 and report.best is None
    assert all(not c.within_tolerance for c in report.candidates)


def test_species_errors():
    with pytest.raises(EstimationError):
        identify_species(1.0, 0.0)
    with pytest.raises(EstimationError):
        identify_species(1.0, 365.0, table=[])


def test_species_from_closed_form_splitting():
    sys = SpinSystem(HyperfineTensor.from_uniaxial(39.0, 25.0, 60.0, 30.0), gamma_n=GAMMA_H)
    lo, hi = level_spectrum(sys, 365.0).nuclear_transitions
    assert identify_species(hi - lo, 365.0).best.isotope.name == "1H"


def test_isotope_table_loads_signed_values():
    table = {iso.name: iso for iso in load_isotopes()}
    assert table["1H"].gamma == 42.577 and table["15N"].gamma < 0


# ----------------------------------------------------------------- database
def test_table_loads_every_record():
    db = load_defect_db()
    assert len(db) == 24
    assert {"MIT1", "WAR9"} <= {r.label for r in db}


def test_x1_matches_mit1():
    ranked = match_defect(39.0, 25.0)
    top = ranked[0]
    assert top.record.label == "MIT1"
    assert top.record.a == (27.38, 19.97, 36.06)
    assert top.d_a == pytest.approx(math.hypot((27.38 + 19.97) / 2 - 25.0, 36.06 - 39.0))
    assert [m.d_a for m in ranked] == sorted(m.d_a for m in ranked)


def test_x2_matches_war9():
    top = match_defect(16.0, 6.0)[0]
    assert top.record.label == "WAR9"
    assert not top.within_accuracy


def test_exact_record_has_zero_distance():
    rec = DefectRecord("T", "test", 0, "T", (10.0, 20.0, 30.0), ((0, 0), (90, 0), (90, 90)), "x")
    match = match_defect(30.0, 15.0, [rec])[0]
    assert match.d_a == 0.0 and match.within_accuracy


def test_record_validation():
    with pytest.raises(ValueError):
        DefectRecord("T", "t", 0, "T", (math.nan, 1.0, 1.0), ((0, 0), (0, 0), (0, 0)), "x")
    with pytest.raises(ValueError):
        DefectRecord("T", "t", 0, "T", (1.0, 1.0, 1.0), ((200, 0), (0, 0), (0, 0)), "x")


def test_bad_database_row_names_the_row(tmp_path):
    path = tmp_path / "db.csv"
    path.write_text("label,type,n_vacancy,defect,a1,theta1,phi1,a2,theta2,phi2,a3,theta3,phi3,"
                    "functional\nA,t,zero,A,1,0,0,1,0,0,1,0,0,f\n")
    with pytest.raises(EstimationError, match="row 1"):
        load_defect_db(path)


# ------------------------------------------------------------- polarization
def test_polarization_from_printed_areas():
    p, sigma = polarization_from_peaks(1.5, 0.67, 0.50, 0.6, (0.1, 0.08, 0.06, 0.1))
    assert p == pytest.approx(0.5402, abs=1e-4)
    assert 0.05 < sigma < 0.15


def test_polarization_limits():
    assert polarization_from_peaks(1.0, 0.5, 0.5, 1.0)[0] == 0.0
    assert polarization_from_peaks(1.0, 0.5, 0.0, 1.0)[0] == 1.0
    with pytest.raises(EstimationError):
        polarization_from_peaks(0.0, 1.0, 0.0, 1.0)
    with pytest.raises(EstimationError):
        polarization_from_peaks(-1.0, 1.0, 1.0, 1.0)


# ------------------------------------------------------ transition catalog
def test_zf_catalog_round_trip():
    for a_par, a_perp in ((39.0, 25.0), (16.0, 6.0)):
        lines = [t.frequency for t in zf_transitions(HyperfineTensor.from_uniaxial(a_par, a_perp))
                 if t.observable]
        est = extract_hyperfine_from_zf(*lines)
        assert (est.a_par, est.a_perp) == (a_par, a_perp)


def test_custom_isotope_table():
    table = [Isotope("A", 10.0), Isotope("B", -10.5)]
    report = identify_species(2 * 10.2 * 365e-4, 365.0, table=table)
    assert [c.isotope.name for c in report.candidates] == ["A", "B"]
