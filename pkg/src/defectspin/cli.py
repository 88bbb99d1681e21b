"""Command-line front end.

Every command reads a JSON run config (``--config``), writes plain CSV/JSON
into ``--out`` and leaves a ``manifest.json`` that holds the fully resolved
config plus library versions. A manifest is itself a valid config, so any run
can be repeated from it alone.

Exit status: 0 success, 1 I/O error, 2 invalid input, 3 fit did not
converge, 4 measurements are mutually inconsistent.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
from pathlib import Path
from typing import Any

import numpy as np
import scipy

from . import __version__
from .analysis import (
    MAX_NFEV,
    FitError,
    SignalTrace,
    TraceFormatError,
    evaluate,
    fit_decaying_cosine,
    fit_exponential,
    fit_lorentzian,
)
from .estimation import (
    EstimationError,
    MeasurementSet,
    extract_hyperfine_from_zf,
    group_lines_by_coupling,
    identify_species,
    load_defect_db,
    match_defect,
    residual_map,
)
from .propagator import DecoherenceParams, run_sequence
from .sequences import (
    PulseSequence,
    SequenceError,
    make_deer,
    make_hhcp_roundtrip,
    make_neetr,
    make_nuclear_init,
    make_zf_deer,
)
from .spin_model import HyperfineTensor, SpinSystem

log = logging.getLogger("defectspin")

RUN_SCHEMA = "defectspin.run/1"
EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_NO_CONVERGENCE, EXIT_INCONSISTENT = 0, 1, 2, 3, 4
DEFAULT_EPS_THRESHOLD = 0.25

FACTORIES = {
    "deer": make_deer,
    "zf_deer": make_zf_deer,
    "neetr": make_neetr,
    "nuclear_init": make_nuclear_init,
    "hhcp_roundtrip": make_hhcp_roundtrip,
}


class ConfigError(ValueError):
    """The run config is malformed; the message names the offending field."""


# ----------------------------------------------------------------- helpers
def _versions() -> dict[str, str]:
    return {"defectspin": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _dump_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _finite(obj: Any) -> Any:
    """Replace non-finite floats by strings so the JSON stays standard."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _require(cfg: dict, key: str, where: str = "config") -> Any:
    if key not in cfg:
        raise ConfigError(f"{where}: missing field {key!r}")
    return cfg[key]


def _grid_from(spec: Any, where: str) -> list[float]:
    if isinstance(spec, dict):
        try:
            grid = np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["num"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: grid needs start, stop, num ({exc})") from None
    elif isinstance(spec, list):
        grid = np.asarray(spec, dtype=float)
    else:
        raise ConfigError(f"{where}: grid must be a list or {{start, stop, num}}")
    if grid.size == 0:
        raise ConfigError(f"{where}: empty sweep grid")
    return [float(v) for v in grid]


def system_from_dict(doc: dict) -> SpinSystem:
    """Build a :class:`SpinSystem` from its JSON description."""
    try:
        a_perp = doc.get("a_perp")
        a_xx = float(doc.get("a_xx", a_perp if a_perp is not None else math.nan))
        a_yy = float(doc.get("a_yy", a_perp if a_perp is not None else math.nan))
        h = HyperfineTensor(a_xx, a_yy, float(doc["a_par"]),
                            doc.get("theta_x"), doc.get("phi_x"))
        return SpinSystem(h, gamma_n=float(doc.get("gamma_n", 0.0)),
                          d_zz=float(doc.get("d_zz", 0.0)),
                          gamma_e=float(doc.get("gamma_e", 2.8025)),
                          probe_axis=tuple(doc.get("probe_axis", (54.7, 45.0))),
                          d_zx=float(doc.get("d_zx", 0.0)), d_zy=float(doc.get("d_zy", 0.0)))
    except KeyError as exc:
        raise ConfigError(f"system: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"system: {exc}") from None


def sequence_from_config(doc: dict, base: Path) -> PulseSequence:
    """A sequence from a factory call, an inline document or a file reference."""
    if "file" in doc:
        path = _resolve(base, doc["file"])
        return PulseSequence.from_json(path.read_text())
    if "schema" in doc:
        return PulseSequence.from_dict(doc)
    factory = _require(doc, "factory", "sequence")
    if factory not in FACTORIES:
        raise ConfigError(f"sequence.factory: unknown factory {factory!r}; "
                          f"choose from {sorted(FACTORIES)}")
    args = dict(doc.get("args", {}))
    for key in ("freq_grid", "tau_grid", "grid", "wait_grid", "phase_grid"):
        if key in args:
            args[key] = _grid_from(args[key], f"sequence.args.{key}")
    try:
        return FACTORIES[factory](**args)
    except TypeError as exc:
        raise ConfigError(f"sequence.args: {exc}") from None


# ---------------------------------------------------------------- commands
def cmd_simulate(cfg: dict, out: Path, base: Path) -> int:
    system_doc = _require(cfg, "system")
    sys_model = system_from_dict(system_doc)
    seq = sequence_from_config(_require(cfg, "sequence"), base)
    if "grid" in cfg:
        seq = seq.with_grid(_grid_from(cfg["grid"], "grid"))
    if not seq.sweep.grid:
        raise ConfigError("empty sweep")
    dec_doc = cfg.get("decoherence")
    dec = DecoherenceParams(**dec_doc) if dec_doc else None
    b0 = float(cfg.get("b0", 0.0))
    readout = cfg.get("readout", "differential")
    eta = float(cfg.get("eta", 1.0))
    trace = run_sequence(seq, sys_model, b0, dec, readout=readout, eta=eta,
                         dipolar_during_pulses=bool(cfg.get("dipolar_during_pulses", False)))
    noise = float(cfg.get("noise_sigma", 0.0))
    seed = int(cfg.get("seed", 0))
    if noise < 0:
        raise ConfigError("noise_sigma must be non-negative")
    if noise > 0:
        rng = np.random.default_rng(seed)
        trace = trace.with_y(trace.y + rng.normal(0.0, noise, len(trace)),
                             np.full(len(trace), noise))
    name = cfg.get("output", "trace.csv")
    trace.to_csv(out / name)
    resolved = {
        "schema": RUN_SCHEMA, "command": "simulate", "system": system_doc,
        "sequence": seq.to_dict(), "b0": b0, "readout": readout, "eta": eta,
        "noise_sigma": noise, "seed": seed, "output": name,
        "dipolar_during_pulses": bool(cfg.get("dipolar_during_pulses", False)),
    }
    if dec_doc:
        resolved["decoherence"] = dec_doc
    _write_manifest(out, resolved)
    log.info("wrote %d points to %s", len(trace), out / name)
    return EXIT_OK


def _t1e_from(cfg: dict, base: Path) -> float | None:
    if "t1e" in cfg:
        return float(cfg["t1e"])
    if "t1e_trace" in cfg:
        fit = fit_exponential(SignalTrace.from_csv(_resolve(base, cfg["t1e_trace"])))
        return fit["T"]
    return None


def cmd_fit(cfg: dict, out: Path, base: Path) -> int:
    trace_path = _resolve(base, _require(cfg, "trace"))
    trace = SignalTrace.from_csv(trace_path)
    model = _require(cfg, "model")
    resolved = {"schema": RUN_SCHEMA, "command": "fit", "trace": str(trace_path.resolve()),
                "model": model, "seed": int(cfg.get("seed", 0))}
    max_nfev = int(cfg.get("max_nfev", MAX_NFEV))
    resolved["max_nfev"] = max_nfev
    if model == "lorentzian":
        n = int(cfg.get("n_peaks", 1))
        fit = fit_lorentzian(trace, n, cfg.get("init"), max_nfev=max_nfev)
        resolved["n_peaks"] = n
    elif model == "decaying-cosine":
        variant = cfg.get("variant", "free-T")
        baseline = cfg.get("baseline", "none")
        kind = cfg.get("kind", "ramsey")
        t1e = _t1e_from(cfg, base)
        fit = fit_decaying_cosine(trace, variant, baseline, t1e=t1e, kind=kind,
                                  init=cfg.get("init"), max_nfev=max_nfev)
        resolved.update(variant=variant, baseline=baseline, kind=kind)
        if "t1e_trace" in cfg:
            resolved["t1e_trace"] = str(_resolve(base, cfg["t1e_trace"]).resolve())
        elif t1e is not None:
            resolved["t1e"] = t1e
    elif model == "exponential":
        fit = fit_exponential(trace, cfg.get("init"), max_nfev=max_nfev)
    else:
        raise ConfigError(f"model: unknown model {model!r}")
    if "init" in cfg:
        resolved["init"] = cfg["init"]
    report = fit.to_dict()
    report["trace"] = str(cfg["trace"])
    _dump_json(_finite(report), out / "fit.json")
    curve = trace.with_y(evaluate(fit, trace.x), np.zeros(len(trace)))
    curve.to_csv(out / "fit_curve.csv")
    _write_manifest(out, resolved)
    return EXIT_OK


def _identify_core(cfg: dict, base: Path, grid_deg: float):
    meas_doc = _require(cfg, "measurement")
    meas = MeasurementSet.from_json(_resolve(base, meas_doc)) if isinstance(meas_doc, str) \
        else MeasurementSet.from_dict(meas_doc)
    if "hyperfine" in cfg:
        hf = cfg["hyperfine"]
        a_par, a_perp = float(hf["a_par"]), float(hf["a_perp"])
        sig = (float(hf.get("sigma", 0.0)),) * 2
        grouping = None
    else:
        grouping = group_lines_by_coupling(meas.zf_lines)
        if not grouping.pairs:
            raise EstimationError("no zero-field line pair with matching coupling")
        pair = grouping.pairs[0]
        if "coupling" in cfg:
            target = float(cfg["coupling"])
            pair = min(grouping.pairs, key=lambda p: abs(p[0].d - target))
        est = extract_hyperfine_from_zf(pair[0], pair[1], b_e=float(cfg.get("b_e", 0.5)),
                                        linewidth=float(cfg.get("linewidth", 0.2)))
        a_par, a_perp = est.a_par, est.a_perp
        sig = (est.sigma_par, est.sigma_perp)
    delta = meas.omega_n_plus.value - meas.omega_n_minus.value
    delta_sigma = math.hypot(meas.omega_n_plus.sigma, meas.omega_n_minus.sigma)
    species = identify_species(delta, meas.b0, sigma=delta_sigma,
                               tolerance=float(cfg.get("species_tolerance", 0.10)))
    if "gamma_n" in cfg:
        gamma_n = float(cfg["gamma_n"])
    elif species.best is not None:
        gamma_n = species.best.isotope.gamma
    else:
        raise EstimationError("no nuclear species could be assigned (zero splitting)")
    rmap = residual_map(meas, a_par, a_perp, gamma_n, grid_deg=grid_deg,
                        weighted=bool(cfg.get("weighted", False)))
    return meas, grouping, (a_par, a_perp, sig), species, gamma_n, rmap


def _map_csv(rmap, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("theta_deg,phi_deg,eps\n")
        for t, p, e in rmap.to_rows():
            fh.write(f"{t!r},{p!r},{e!r}\n")


def cmd_identify(cfg: dict, out: Path, base: Path, grid_deg: float) -> int:
    meas, grouping, (a_par, a_perp, sig), species, gamma_n, rmap = _identify_core(cfg, base, grid_deg)
    db_path = cfg.get("defect_db")
    db = load_defect_db(_resolve(base, db_path) if db_path else None)
    matches = match_defect(a_par, a_perp, db)
    top_n = int(cfg.get("top", 5))
    threshold = float(cfg.get("eps_threshold", DEFAULT_EPS_THRESHOLD))
    report = {
        "label": meas.label,
        "hyperfine": {"a_par": a_par, "a_perp": a_perp, "sigma_par": sig[0], "sigma_perp": sig[1]},
        "line_pairs": None if grouping is None else [
            [p[0].frequency, p[1].frequency] for p in grouping.pairs],
        "unpaired_lines": None if grouping is None else [z.frequency for z in grouping.unpaired],
        "species": {
            "gamma_est": species.gamma_est,
            "gamma_sigma": species.gamma_sigma,
            "ranking": [{"isotope": c.isotope.name, "gamma": c.isotope.gamma,
                         "deviation": c.deviation, "within_tolerance": c.within_tolerance}
                        for c in species.candidates],
            "ambiguous": species.ambiguous,
        },
        "gamma_n_used": gamma_n,
        "residual": {"eps_min": rmap.eps_min, "theta_min": rmap.theta_min,
                     "phi_min": rmap.phi_min, "absolute_residual": rmap.absolute_residual,
                     "argmin_points": len(rmap.argmin_set), "grid_deg": grid_deg,
                     "threshold": threshold},
        "defects": [{"label": m.record.label, "defect": m.record.defect,
                     "a": list(m.record.a), "d_a": m.d_a, "within_accuracy": m.within_accuracy}
                    for m in matches[:top_n]],
    }
    consistent = rmap.eps_min <= threshold
    report["consistent"] = consistent
    _dump_json(_finite(report), out / "identify.json")
    if cfg.get("dump_map", False):
        _map_csv(rmap, out / "residual_map.csv")
    resolved = _absolute_refs(cfg, base)
    resolved.update(schema=RUN_SCHEMA, command="identify", grid_deg=grid_deg,
                    eps_threshold=threshold, seed=int(cfg.get("seed", 0)))
    _write_manifest(out, resolved)
    if not consistent:
        log.error("measurements inconsistent: eps_min %.4g exceeds %.4g", rmap.eps_min, threshold)
        return EXIT_INCONSISTENT
    return EXIT_OK


def cmd_scan_residual(cfg: dict, out: Path, base: Path, grid_deg: float) -> int:
    _, _, (a_par, a_perp, _), _, gamma_n, rmap = _identify_core(cfg, base, grid_deg)
    _map_csv(rmap, out / "residual_map.csv")
    summary = {"grid_deg": grid_deg, "a_par": a_par, "a_perp": a_perp, "gamma_n": gamma_n,
               "eps_min": rmap.eps_min,
               "theta_min": rmap.theta_min, "phi_min": rmap.phi_min,
               "absolute_residual": rmap.absolute_residual,
               "argmin_set": [list(p) for p in rmap.argmin_set]}
    _dump_json(_finite(summary), out / "residual_summary.json")
    resolved = _absolute_refs(cfg, base)
    resolved.update(schema=RUN_SCHEMA, command="scan-residual", grid_deg=grid_deg,
                    seed=int(cfg.get("seed", 0)))
    _write_manifest(out, resolved)
    return EXIT_OK


def cmd_defect_db_list(path: str | None) -> int:
    db = load_defect_db(path)
    print(f"{'label':<8} {'type':<16} {'nV':>2} {'A1':>8} {'A2':>8} {'A3':>8}  functional")
    for rec in db:
        a1, a2, a3 = rec.a
        print(f"{rec.label:<8} {rec.structure:<16} {rec.n_vacancy:>2} "
              f"{a1:>8.2f} {a2:>8.2f} {a3:>8.2f}  {rec.functional}")
    return EXIT_OK


def _absolute_refs(cfg: dict, base: Path) -> dict:
    """Copy of ``cfg`` whose file references no longer depend on the config location."""
    out = dict(cfg)
    for key in ("measurement", "defect_db"):
        if isinstance(out.get(key), str):
            out[key] = str(_resolve(base, out[key]).resolve())
    return out


def _write_manifest(out: Path, resolved: dict) -> None:
    doc = dict(resolved)
    doc["versions"] = _versions()
    _dump_json(_finite(doc), out / "manifest.json")


# --------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defectspin", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [("simulate", "simulate a pulse sequence into a trace CSV"),
                            ("fit", "fit a trace CSV"),
                            ("identify", "hyperfine, species and defect identification"),
                            ("scan-residual", "dump the orientation residual map")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run config (or a manifest)")
        p.add_argument("--out", default=".", help="output directory (created if needed)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name in ("identify", "scan-residual"):
            p.add_argument("--grid-deg", type=float, default=None,
                           help="residual grid step in degrees (default 1)")
    db = sub.add_parser("defect-db", help="defect database utilities")
    db_sub = db.add_subparsers(dest="db_command", required=True)
    lst = db_sub.add_parser("list", help="print the defect table")
    lst.add_argument("--path", default=None, help="alternative defect CSV")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if args.command == "defect-db":
            return cmd_defect_db_list(args.path)
        config_path = Path(args.config)
        cfg = json.loads(config_path.read_text())
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        schema = cfg.get("schema", RUN_SCHEMA)
        if schema != RUN_SCHEMA:
            raise ConfigError(f"schema: expected {RUN_SCHEMA!r}, got {schema!r}")
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        base = config_path.parent
        if args.command == "simulate":
            return cmd_simulate(cfg, out, base)
        if args.command == "fit":
            return cmd_fit(cfg, out, base)
        grid_deg = args.grid_deg if args.grid_deg is not None else float(cfg.get("grid_deg", 1.0))
        if args.command == "identify":
            return cmd_identify(cfg, out, base, grid_deg)
        return cmd_scan_residual(cfg, out, base, grid_deg)
    except FitError as exc:
        log.error("fit did not converge: %s (best residual %.4g)", exc, exc.best_residual)
        return EXIT_NO_CONVERGENCE
    except (TraceFormatError, json.JSONDecodeError) as exc:
        log.error("could not parse input: %s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ConfigError, SequenceError, EstimationError, ValueError, KeyError, TypeError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
