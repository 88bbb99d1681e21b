"""Simulation and inference for a probe spin coupled to an electron-nuclear defect."""

__version__ = "0.1.0"

from .spin_model import (  # noqa: E402
    HyperfineTensor,
    SpinSystem,
    level_spectrum,
    secular_components,
    zf_transitions,
)
from .propagator import DecoherenceParams, pi_duration, run_sequence  # noqa: E402
from .sequences import (  # noqa: E402
    PulseSequence,
    make_deer,
    make_hhcp_roundtrip,
    make_neetr,
    make_nuclear_init,
    make_zf_deer,
)
from .analysis import (  # noqa: E402
    FitError,
    FitResult,
    SignalTrace,
    fft_psd,
    fit_decaying_cosine,
    fit_exponential,
    fit_lorentzian,
    normalize_differential,
)
from .estimation import (  # noqa: E402
    MeasurementSet,
    extract_hyperfine_from_zf,
    group_lines_by_coupling,
    identify_species,
    load_defect_db,
    match_defect,
    polarization_from_peaks,
    residual_map,
)

__all__ = [
    "__version__",
    "HyperfineTensor", "SpinSystem", "level_spectrum", "secular_components", "zf_transitions",
    "DecoherenceParams", "pi_duration", "run_sequence",
    "PulseSequence", "make_deer", "make_zf_deer", "make_neetr", "make_nuclear_init",
    "make_hhcp_roundtrip",
    "SignalTrace", "FitResult", "FitError", "normalize_differential", "fit_lorentzian",
    "fit_decaying_cosine", "fit_exponential", "fft_psd",
    "MeasurementSet", "extract_hyperfine_from_zf", "group_lines_by_coupling",
    "identify_species", "load_defect_db", "match_defect", "polarization_from_peaks",
    "residual_map",
]
