"""Signal traces, differential normalization and the fit models.

Every model is fitted with MINPACK's Levenberg-Marquardt (through
:func:`scipy.optimize.least_squares`) using analytic Jacobians. Parameter
uncertainties come from the residual-scaled covariance at the optimum.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import find_peaks

X_KINDS = ("time", "frequency")
DEFAULT_UNITS = {"time": "us", "frequency": "MHz"}
COSINE_MODELS = ("free-T", "fixed-t1e", "stretched")
BASELINES = ("none", "constant", "linear")
MAX_NFEV = 4000


class TraceFormatError(ValueError):
    """Raised when a trace file cannot be parsed."""


class FitError(RuntimeError):
    """Raised when a fit fails to converge; carries the best point reached."""

    def __init__(self, message: str, best_residual: float = math.nan,
                 best_params: np.ndarray | None = None):
        super().__init__(message)
        self.best_residual = best_residual
        self.best_params = best_params


class PeakCollisionWarning(UserWarning):
    """Two fitted peak centres closer than the sampling step."""


# ------------------------------------------------------------------ traces
@dataclass(frozen=True)
class SignalTrace:
    """Sampled signal with per-point standard deviations.

    ``x`` is in microseconds for ``x_kind="time"`` and in MHz for
    ``x_kind="frequency"`` unless ``units`` says otherwise.
    """

    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray
    x_kind: str = "time"
    units: str | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float).reshape(-1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), x.shape).copy() \
            if np.ndim(self.sigma) == 0 else np.asarray(self.sigma, dtype=float).reshape(-1)
        if self.x_kind not in X_KINDS:
            raise ValueError(f"x_kind must be one of {X_KINDS}, got {self.x_kind!r}")
        if not (len(x) == len(y) == len(sigma)):
            raise ValueError(f"x, y and sigma lengths differ ({len(x)}, {len(y)}, {len(sigma)})")
        if len(x) == 0:
            raise ValueError("trace is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("x and y must be finite")
        if np.any(~np.isfinite(sigma)) or np.any(sigma < 0):
            raise ValueError("sigma must be finite and non-negative")
        if len(x) > 1:
            dx = np.diff(x)
            if not (np.all(dx > 0) or np.all(dx < 0)):
                raise ValueError("x must be strictly monotonic")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sigma", sigma)
        if self.units is None:
            object.__setattr__(self, "units", DEFAULT_UNITS[self.x_kind])

    def __len__(self) -> int:
        return len(self.x)

    def with_y(self, y: np.ndarray, sigma: np.ndarray | None = None) -> "SignalTrace":
        return SignalTrace(self.x, y, self.sigma if sigma is None else sigma,
                           self.x_kind, self.units)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# x_kind={self.x_kind} units={self.units}\n")
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "sigma"])
            for row in zip(self.x, self.y, self.sigma):
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SignalTrace":
        meta = {"x_kind": "time", "units": None}
        rows: list[tuple[float, float, float]] = []
        header_seen = False
        with open(path, newline="") as fh:
            for lineno, line in enumerate(fh, start=1):
                text = line.strip()
                if not text:
                    continue
                if text.startswith("#"):
                    for token in text.lstrip("#").split():
                        key, sep, value = token.partition("=")
                        if sep and key in meta:
                            meta[key] = value
                    continue
                cells = [c.strip() for c in text.split(",")]
                if not header_seen and cells[0] == "x":
                    if cells[:3] != ["x", "y", "sigma"]:
                        raise TraceFormatError(f"{path}: row {lineno}: expected header x,y,sigma")
                    header_seen = True
                    continue
                if len(cells) not in (2, 3):
                    raise TraceFormatError(
                        f"{path}: row {lineno}: expected 3 columns, found {len(cells)}")
                try:
                    values = [float(c) for c in cells]
                except ValueError as exc:
                    raise TraceFormatError(f"{path}: row {lineno}: {exc}") from None
                if len(values) == 2:
                    values.append(0.0)
                rows.append(tuple(values))
        if not rows:
            raise TraceFormatError(f"{path}: no data rows")
        arr = np.array(rows)
        try:
            return cls(arr[:, 0], arr[:, 1], arr[:, 2], meta["x_kind"], meta["units"])
        except ValueError as exc:
            raise TraceFormatError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class FitResult:
    """Best-fit parameters with their covariance.

    ``residual_norm`` is the Euclidean norm of the (weighted) residual vector.
    """

    model: str
    names: tuple[str, ...]
    values: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    n_points: int
    info: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (len(values), len(values)):
            raise ValueError("covariance shape does not match the parameter count")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @property
    def uncertainties(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def params(self) -> dict[str, tuple[float, float]]:
        return {n: (float(v), float(e)) for n, v, e in zip(self.names, self.values, self.uncertainties)}

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def error(self, name: str) -> float:
        return float(self.uncertainties[self.names.index(name)])

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "params": {n: {"value": _json_float(v), "sigma": _json_float(e)}
                       for n, (v, e) in self.params.items()},
            "covariance": [[_json_float(c) for c in row] for row in self.covariance],
            "residual_norm": _json_float(self.residual_norm),
            "n_points": self.n_points,
            "info": self.info,
        }


def _json_float(v: float) -> float | str:
    v = float(v)
    return v if math.isfinite(v) else str(v)


# --------------------------------------------------- differential signal
def normalize_differential(r_plus, r_minus, r_zero, r_one, x=None,
                           x_kind: str = "time", units: str | None = None) -> SignalTrace:
    """Differential, reference-normalized probe signal.

    ``y_i = (R+_i - R-_i) / (<R0> - <R1>)`` where ``<>`` averages over the
    sweep. The error bar is the combined spread of the two reference traces,
    ``sqrt(s0**2 + s1**2) / (<R0> - <R1>)``, applied to every point.
    """
    traces = [np.asarray(r, dtype=float).reshape(-1) for r in (r_plus, r_minus, r_zero, r_one)]
    n = len(traces[0])
    if any(len(t) != n for t in traces):
        raise ValueError("all four count traces must have the same length")
    if n < 2:
        raise ValueError("at least two sweep points are needed for the reference spread")
    rp, rm, r0, r1 = traces
    contrast = r0.mean() - r1.mean()
    if not contrast > 0:
        raise ValueError(f"reference contrast <R0> - <R1> must be positive, got {contrast:g}")
    y = (rp - rm) / contrast
    sigma = math.sqrt(r0.std(ddof=1) ** 2 + r1.std(ddof=1) ** 2) / contrast
    xs = np.arange(n, dtype=float) if x is None else x
    return SignalTrace(xs, y, np.full(n, sigma), x_kind, units)


# ------------------------------------------------------------ fit engine
def _weights(trace: SignalTrace) -> np.ndarray:
    s = trace.sigma
    if np.all(s > 0):
        return 1.0 / s
    return np.ones_like(s)


def _run_lm(model_fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
            p0: np.ndarray, trace: SignalTrace, names: Sequence[str], model: str,
            max_nfev: int = MAX_NFEV, info: dict | None = None) -> FitResult:
    w = _weights(trace)
    y = trace.y
    m, p = len(y), len(p0)
    if m < p:
        raise ValueError(f"{model}: {m} points cannot constrain {p} parameters")

    def fun(q):
        return (model_fn(q)[0] - y) * w

    def jac(q):
        return model_fn(q)[1] * w[:, None]

    p0 = np.asarray(p0, dtype=float)
    if not np.all(np.isfinite(p0)):
        raise ValueError(f"{model}: non-finite initial guess {p0}")
    try:
        res = least_squares(fun, p0, jac=jac, method="lm", max_nfev=max_nfev,
                            xtol=1e-12, ftol=1e-12, gtol=1e-12)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise FitError(f"{model}: optimizer failed ({exc})",
                       float(np.linalg.norm(fun(p0))), p0) from None
    norm = float(np.linalg.norm(res.fun))
    if res.status <= 0 or not np.all(np.isfinite(res.x)):
        raise FitError(f"{model}: no convergence after {res.nfev} evaluations ({res.message})",
                       norm, res.x)
    J = res.jac
    dof = max(m - p, 1)
    s2 = 2 * res.cost / dof
    cov = np.linalg.pinv(J.T @ J) * s2
    out_info = {"nfev": int(res.nfev), "status": int(res.status)}
    out_info.update(info or {})
    return FitResult(model, tuple(names), res.x, cov, norm, m, out_info)


def noise_level(y: np.ndarray) -> float:
    """Robust point-to-point noise estimate (MAD of first differences)."""
    d = np.diff(np.asarray(y, dtype=float))
    if len(d) == 0:
        return 0.0
    return float(1.4826 * np.median(np.abs(d - np.median(d))) / math.sqrt(2))


# -------------------------------------------------------------- Lorentzian
def lorentzian(x, a: float, b: float, gamma: float, f: float) -> np.ndarray:
    """Single Lorentzian ``a gamma^2 / (gamma^2 + (x - f)^2) + b``."""
    x = np.asarray(x, dtype=float)
    g2 = gamma * gamma
    return a * g2 / (g2 + (x - f) ** 2) + b


def multi_lorentzian(x, amplitudes, centers, b: float, gamma: float) -> np.ndarray:
    """Sum of Lorentzians sharing one half width ``gamma``."""
    x = np.asarray(x, dtype=float)
    a = np.asarray(amplitudes, dtype=float)[:, None]
    f = np.asarray(centers, dtype=float)[:, None]
    g2 = gamma * gamma
    return np.sum(a * g2 / (g2 + (x[None, :] - f) ** 2), axis=0) + b


def lorentzian_model(x, params, n_peaks: int) -> tuple[np.ndarray, np.ndarray]:
    """Value and Jacobian for parameters ``[a_1..a_n, f_1..f_n, b, gamma]``."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(params, dtype=float)
    a, f = p[:n_peaks], p[n_peaks:2 * n_peaks]
    b, g = p[2 * n_peaks], p[2 * n_peaks + 1]
    u = x[None, :] - f[:, None]
    g2 = g * g
    den = g2 + u ** 2
    shape = g2 / den
    y = np.sum(a[:, None] * g2 / den, axis=0) + b  # same rounding as lorentzian()
    jac = np.empty((len(x), 2 * n_peaks + 2))
    jac[:, :n_peaks] = shape.T
    jac[:, n_peaks:2 * n_peaks] = (a[:, None] * g2 * 2 * u / den ** 2).T
    jac[:, 2 * n_peaks] = 1.0
    jac[:, 2 * n_peaks + 1] = np.sum(a[:, None] * 2 * g * u ** 2 / den ** 2, axis=0)
    return y, jac


def lorentzian_names(n_peaks: int) -> tuple[str, ...]:
    if n_peaks == 1:
        return ("a", "f", "b", "gamma")
    return (tuple(f"a{i}" for i in range(1, n_peaks + 1))
            + tuple(f"f{i}" for i in range(1, n_peaks + 1)) + ("b", "gamma"))


def _guess_peaks(trace: SignalTrace, n_peaks: int) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Local extrema more than 3 noise units from the baseline, strongest first.

    Candidates must also stand 3 noise units above their surroundings
    (prominence) so that noise ripples on a broad peak are not counted twice.
    """
    x, y = trace.x, trace.y
    base = float(np.median(y))
    sign = -1.0 if abs(y.min() - base) > abs(y.max() - base) else 1.0
    s = sign * (y - base)
    noise = float(np.median(trace.sigma)) if np.all(trace.sigma > 0) else noise_level(y)
    idx, _ = find_peaks(s, height=3 * noise if noise > 0 else None,
                        prominence=3 * noise if noise > 0 else None)
    if len(idx) < n_peaks:
        idx, _ = find_peaks(s)
    if len(idx) < n_peaks:
        extra = [i for i in np.argsort(s)[::-1] if i not in set(idx)]
        idx = np.concatenate([idx, extra[:n_peaks - len(idx)]]).astype(int)
    idx = idx[np.argsort(s[idx])[::-1]][:n_peaks]
    idx = np.sort(idx)
    amps = sign * s[idx]
    # half width from the strongest peak's half-maximum crossing
    k = idx[np.argmax(s[idx])]
    half = s[k] / 2
    left = k
    while left > 0 and s[left] > half:
        left -= 1
    right = k
    while right < len(s) - 1 and s[right] > half:
        right += 1
    step = float(np.median(np.abs(np.diff(x)))) if len(x) > 1 else 1.0
    gamma = max(abs(x[right] - x[left]) / 2, step)
    return amps, x[idx], base, gamma


def fit_lorentzian(trace: SignalTrace, n_peaks: int = 1, init: dict | None = None,
                   max_nfev: int = MAX_NFEV) -> FitResult:
    """Fit ``sum_i a_i gamma^2 / (gamma^2 + (x - f_i)^2) + b``.

    All peaks share the half width ``gamma`` (reported positive), which is also
    the frequency uncertainty quoted for each line. Peaks are returned in
    ascending centre frequency.

    Parameters
    ----------
    init : dict, optional
        Any of ``amplitudes``, ``centers``, ``b``, ``gamma`` to override the
        automatic seeds.
    """
    if n_peaks < 1:
        raise ValueError("n_peaks must be at least 1")
    if len(trace) < 4 + n_peaks:
        raise ValueError(f"need at least {4 + n_peaks} points for {n_peaks} peak(s)")
    amps, centers, b, gamma = _guess_peaks(trace, n_peaks)
    init = init or {}
    if "centers" in init:
        centers = np.asarray(init["centers"], dtype=float)
        amps = np.interp(centers, *(_sorted_xy(trace))) - b
    amps = np.asarray(init.get("amplitudes", amps), dtype=float)
    b = float(init.get("b", b))
    gamma = float(init.get("gamma", gamma))
    if len(amps) != n_peaks or len(centers) != n_peaks:
        raise ValueError("initial guesses must have one entry per peak")
    p0 = np.concatenate([amps, centers, [b, gamma]])
    fit = _run_lm(lambda q: lorentzian_model(trace.x, q, n_peaks), p0, trace,
                  lorentzian_names(n_peaks), "lorentzian", max_nfev,
                  {"n_peaks": n_peaks})
    return _canonical_lorentzian(fit, n_peaks, trace)


def _sorted_xy(trace: SignalTrace) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(trace.x)
    return trace.x[order], trace.y[order]


def _canonical_lorentzian(fit: FitResult, n: int, trace: SignalTrace) -> FitResult:
    """Make gamma positive and order peaks by centre frequency."""
    values = fit.values.copy()
    cov = fit.covariance.copy()
    sign = np.ones(len(values))
    if values[-1] < 0:
        values[-1] = -values[-1]
        sign[-1] = -1.0
    cov = cov * np.outer(sign, sign)
    order = np.argsort(values[n:2 * n], kind="stable")
    perm = np.concatenate([order, n + order, [2 * n, 2 * n + 1]])
    values = values[perm]
    cov = cov[np.ix_(perm, perm)]
    centers = values[n:2 * n]
    step = float(np.min(np.abs(np.diff(np.sort(trace.x))))) if len(trace) > 1 else 0.0
    if n > 1 and np.any(np.diff(centers) < step):
        warnings.warn("fitted peak centres collide within one sampling step",
                      PeakCollisionWarning, stacklevel=3)
    return FitResult(fit.model, fit.names, values, cov, fit.residual_norm, fit.n_points, fit.info)


# ----------------------------------------------------------- cosine decay
def cosine_names(model: str, baseline: str, kind: str = "ramsey") -> tuple[str, ...]:
    if model == "fixed-t1e":
        decay = "T2star" if kind == "ramsey" else "T2"
    else:
        decay = "T"
    names = ("a", "f", "phi", decay)
    if baseline == "constant":
        names += ("c",)
    elif baseline == "linear":
        names += ("b", "c")
    return names


def decaying_cosine_model(t, params, model: str = "free-T", baseline: str = "none",
                          t1e: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Value and Jacobian of ``a cos(2 pi f t + phi) D(t)`` plus baseline.

    ``D`` is ``exp(-t/T)`` (free-T), ``exp(-(t/T)^2)`` (stretched) or
    ``exp(-t/T2 - 3t/(2 T1e))`` (fixed-t1e). ``f`` is in cycles per unit of
    ``t`` (MHz for microseconds).
    """
    t = np.asarray(t, dtype=float)
    p = np.asarray(params, dtype=float)
    a, f, phi, tau = p[:4]
    theta = 2 * math.pi * f * t + phi
    c, s = np.cos(theta), np.sin(theta)
    if model == "free-T":
        env = np.exp(-t / tau)
        d_env = env * t / tau ** 2
    elif model == "stretched":
        env = np.exp(-(t / tau) ** 2)
        d_env = env * 2 * t ** 2 / tau ** 3
    elif model == "fixed-t1e":
        if t1e is None or not t1e > 0:
            raise ValueError("fixed-t1e model needs a positive t1e")
        env = np.exp(-t / tau - 1.5 * t / t1e)
        d_env = env * t / tau ** 2
    else:
        raise ValueError(f"unknown cosine model {model!r}; expected one of {COSINE_MODELS}")
    y = a * c * env
    cols = [c * env, -a * s * env * 2 * math.pi * t, -a * s * env, a * c * d_env]
    if baseline == "constant":
        y = y + p[4]
        cols.append(np.ones_like(t))
    elif baseline == "linear":
        y = y + p[4] * t + p[5]
        cols += [t, np.ones_like(t)]
    elif baseline != "none":
        raise ValueError(f"unknown baseline {baseline!r}; expected one of {BASELINES}")
    return y, np.column_stack(cols)


def dominant_frequency(t: np.ndarray, y: np.ndarray) -> float:
    """Frequency of the strongest non-DC FFT bin, with parabolic refinement."""
    tu, yu = _uniform(np.asarray(t, float), np.asarray(y, float))
    n = len(tu)
    pad = 8 * n
    spec = np.abs(np.fft.rfft(yu - yu.mean(), pad)) ** 2
    freqs = np.fft.rfftfreq(pad, tu[1] - tu[0])
    k = int(np.argmax(spec[1:])) + 1
    if 1 <= k < len(spec) - 1:
        l, c, r = spec[k - 1], spec[k], spec[k + 1]
        den = l - 2 * c + r
        shift = 0.5 * (l - r) / den if den != 0 else 0.0
        return float(freqs[k] + shift * (freqs[1] - freqs[0]))
    return float(freqs[k])


def fit_decaying_cosine(trace: SignalTrace, model: str = "free-T", baseline: str = "none", *,
                        t1e: float | None = None, kind: str = "ramsey",
                        init: dict | None = None, max_nfev: int = MAX_NFEV) -> FitResult:
    """Fit an exponentially decaying cosine.

    Parameters
    ----------
    model : {"free-T", "fixed-t1e", "stretched"}
        Envelope. ``fixed-t1e`` fits the intrinsic time with the total rate
        ``1/T2 + 3/(2 t1e)``; ``kind`` only picks the parameter label
        (``T2star`` for Ramsey, ``T2`` for echo).
    baseline : {"none", "constant", "linear"}
        Additive background ``c`` or ``b t + c``.
    init : dict, optional
        Seeds for ``a``, ``f``, ``phi`` and the decay time.
    """
    if trace.x_kind != "time":
        raise ValueError("decaying-cosine fits need a time-domain trace")
    if model not in COSINE_MODELS:
        raise ValueError(f"unknown cosine model {model!r}; expected one of {COSINE_MODELS}")
    if baseline not in BASELINES:
        raise ValueError(f"unknown baseline {baseline!r}; expected one of {BASELINES}")
    if kind not in ("ramsey", "echo"):
        raise ValueError("kind must be 'ramsey' or 'echo'")
    if model == "fixed-t1e" and (t1e is None or not t1e > 0):
        raise ValueError("fixed-t1e model needs a positive t1e")
    names = cosine_names(model, baseline, kind)
    if len(trace) < len(names) + 1:
        raise ValueError(f"need more than {len(names)} points")
    init = dict(init or {})
    t, y = trace.x, trace.y
    span = float(np.ptp(t)) or 1.0
    decay_name = names[3]
    for key in ("T", decay_name):
        if key in init and not init[key] > 0:
            raise ValueError("decay time guesses must be positive")
    f0 = float(init.get("f", dominant_frequency(t, _detrend(t, y, baseline))))
    p0 = _linear_seed(t, y, f0, float(init.get(decay_name, init.get("T", span / 2))),
                      model, baseline, t1e)
    if "a" in init:
        p0[0] = init["a"]
    if "phi" in init:
        p0[2] = init["phi"]

    def fn(q):
        return decaying_cosine_model(t, q, model, baseline, t1e)

    fit = _run_lm(fn, p0, trace, names, f"decaying-cosine/{model}/{baseline}", max_nfev,
                  {"t1e": t1e} if model == "fixed-t1e" else None)
    values = fit.values.copy()
    cov = fit.covariance.copy()
    if values[3] <= 0:
        raise FitError(f"fit ended at non-physical decay time {values[3]:g}",
                       fit.residual_norm, values)
    # canonical form: a > 0, f > 0, phi in (-pi, pi]
    sign = np.ones(len(values))
    if values[1] < 0:
        values[1] = -values[1]
        values[2] = -values[2]
        sign[1] = sign[2] = -1.0
    if values[0] < 0:
        values[0] = -values[0]
        values[2] += math.pi
        sign[0] = -1.0
    values[2] = math.remainder(values[2], 2 * math.pi)
    cov = cov * np.outer(sign, sign)
    return FitResult(fit.model, fit.names, values, cov, fit.residual_norm, fit.n_points, fit.info)


def _detrend(t, y, baseline: str) -> np.ndarray:
    if baseline == "linear":
        return y - np.polyval(np.polyfit(t, y, 1), t)
    return y - y.mean()


def _linear_seed(t, y, f0, tau0, model, baseline, t1e) -> np.ndarray:
    """Amplitude, phase and baseline from a linear solve at fixed f and T."""
    best = None
    span = float(np.ptp(t)) or 1.0
    theta = 2 * math.pi * f0 * t
    for tau in (tau0, span / 4, span, 4 * span):
        env = _envelope(t, tau, model, t1e)
        cols = [np.cos(theta) * env, -np.sin(theta) * env]
        if baseline == "constant":
            cols.append(np.ones_like(t))
        elif baseline == "linear":
            cols += [t, np.ones_like(t)]
        A = np.column_stack(cols)
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        r = float(np.sum((A @ coef - y) ** 2))
        if best is None or r < best[0]:
            best = (r, tau, coef)
    _, tau, coef = best
    amp = math.hypot(coef[0], coef[1])
    phi = math.atan2(coef[1], coef[0])
    return np.concatenate([[amp or 1e-3, f0, phi, tau], coef[2:]])


def _envelope(t, tau, model, t1e) -> np.ndarray:
    if model == "stretched":
        return np.exp(-(t / tau) ** 2)
    if model == "fixed-t1e":
        return np.exp(-t / tau - 1.5 * t / t1e)
    return np.exp(-t / tau)


# ------------------------------------------------------------ exponential
def exponential_model(t, params) -> tuple[np.ndarray, np.ndarray]:
    """``a exp(-t/T) + b`` and its Jacobian."""
    t = np.asarray(t, dtype=float)
    a, tau, b = np.asarray(params, dtype=float)
    env = np.exp(-t / tau)
    return a * env + b, np.column_stack([env, a * env * t / tau ** 2, np.ones_like(t)])


def fit_exponential(trace: SignalTrace, init: dict | None = None,
                    max_nfev: int = MAX_NFEV) -> FitResult:
    """Fit ``a exp(-t/T) + b``.

    A trace with no resolvable decay (flat, or an amplitude below twice its
    uncertainty, or ``T`` beyond a thousand record lengths) is reported with
    ``T = inf``, ``a = 0`` and ``info["no_decay"] = True``.
    """
    if trace.x_kind != "time":
        raise ValueError("exponential fits need a time-domain trace")
    if len(trace) < 4:
        raise ValueError("need at least 4 points")
    t, y = trace.x, trace.y
    span = float(np.ptp(t)) or 1.0
    names = ("a", "T", "b")
    if np.ptp(y) <= 1e-12 * max(1.0, float(np.max(np.abs(y)))):
        return _no_decay(trace)
    init = init or {}
    order = np.argsort(t)
    ts, ys = t[order], y[order]
    b0 = float(init.get("b", ys[-1]))
    tau0 = float(init.get("T", span / 3))
    if not tau0 > 0:
        raise ValueError("decay time guess must be positive")
    a0 = float(init.get("a", (ys[0] - b0) * math.exp(ts[0] / tau0)))
    try:
        fit = _run_lm(lambda q: exponential_model(t, q), np.array([a0, tau0, b0]), trace,
                      names, "exponential", max_nfev)
    except FitError:
        if noise_level(y) > 0 and np.ptp(y) < 6 * noise_level(y):
            return _no_decay(trace)
        raise
    a, tau = fit["a"], fit["T"]
    if tau <= 0 or tau > 1e3 * span or abs(a) <= 2 * fit.error("a"):
        return _no_decay(trace)
    return fit


def _no_decay(trace: SignalTrace) -> FitResult:
    w = _weights(trace)
    b = float(np.sum(trace.y * w ** 2) / np.sum(w ** 2))
    resid = (trace.y - b) * w
    n = len(trace)
    var_b = float(np.sum(resid ** 2) / max(n - 1, 1) / np.sum(w ** 2))
    cov = np.diag([0.0, 0.0, var_b])
    return FitResult("exponential", ("a", "T", "b"), np.array([0.0, math.inf, b]), cov,
                     float(np.linalg.norm(resid)), n, {"no_decay": True})


# --------------------------------------------------------------- spectra
def _uniform(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(x)
    x, y = x[order], y[order]
    dx = np.diff(x)
    if np.allclose(dx, dx.mean(), rtol=1e-6, atol=0):
        return x, y
    grid = np.linspace(x[0], x[-1], len(x))
    return grid, np.interp(grid, x, y)


def fft_psd(trace: SignalTrace, background: str = "none", pad: int = 1) -> SignalTrace:
    """One-sided power spectral density normalized to its peak.

    Non-uniform time grids are linearly interpolated onto a uniform grid with
    the same number of points. The mean is always removed; ``"linear-subtract"``
    removes a least-squares straight line instead.
    """
    if trace.x_kind != "time":
        raise ValueError("fft_psd needs a time-domain trace")
    if len(trace) < 8:
        raise ValueError("fft_psd needs at least 8 samples")
    if background not in ("none", "linear-subtract"):
        raise ValueError("background must be 'none' or 'linear-subtract'")
    if pad < 1:
        raise ValueError("pad must be at least 1")
    t, y = _uniform(trace.x, trace.y)
    if background == "linear-subtract":
        y = y - np.polyval(np.polyfit(t, y, 1), t)
    else:
        y = y - y.mean()
    n = len(t) * pad
    power = np.abs(np.fft.rfft(y, n)) ** 2
    freqs = np.fft.rfftfreq(n, t[1] - t[0])
    peak = power.max()
    psd = power / peak if peak > 0 else power
    units = "MHz" if trace.units in ("us", None) else f"1/{trace.units}"
    return SignalTrace(freqs, psd, np.zeros_like(psd), "frequency", units)


def subtract_linear_baseline(trace: SignalTrace, fit: FitResult) -> SignalTrace:
    """Remove the fitted ``b t + c`` background from a trace."""
    if "b" not in fit.names or "c" not in fit.names:
        raise ValueError("fit has no linear baseline")
    return trace.with_y(trace.y - (fit["b"] * trace.x + fit["c"]))


def evaluate(fit: FitResult, x) -> np.ndarray:
    """Evaluate a fitted model on new abscissae."""
    x = np.asarray(x, dtype=float)
    if fit.model == "lorentzian":
        return lorentzian_model(x, fit.values, fit.info["n_peaks"])[0]
    if fit.model == "exponential":
        if fit.info.get("no_decay"):
            return np.full_like(x, fit["b"])
        return exponential_model(x, fit.values)[0]
    if fit.model.startswith("decaying-cosine/"):
        _, model, baseline = fit.model.split("/")
        return decaying_cosine_model(x, fit.values, model, baseline, fit.info.get("t1e"))[0]
    raise ValueError(f"unknown model {fit.model!r}")


__all__ = [
    "SignalTrace", "FitResult", "FitError", "TraceFormatError", "PeakCollisionWarning",
    "normalize_differential", "lorentzian", "multi_lorentzian", "lorentzian_model",
    "fit_lorentzian", "decaying_cosine_model", "fit_decaying_cosine", "exponential_model",
    "fit_exponential", "fft_psd", "dominant_frequency", "noise_level",
    "subtract_linear_baseline", "evaluate",
]
