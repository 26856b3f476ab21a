"""Gamma-probe response model, count noise, and calibration fitting.

The probe reading combines the solid angle subtended by a circular detector
face of radius ``r`` at distance ``d`` with an angular efficiency factor that
falls off once the source leaves the detector's direct field of view::

    cps = activity * c1 * 0.5 * (1 - 1 / sqrt(r**2 / d**2 + 1)) * f(alpha) + c2

    f(alpha) = 1                         for alpha <= arctan(2 r / l)
             = 2 r / (l tan(alpha))      above the breakpoint

``f`` is undefined from 90 degrees on; it is ramped linearly to ``floor`` over
the last few degrees before 90 and held at the floor behind the detector face.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import ProbePose
from .lsq import ConvergenceError, levenberg_marquardt

DEFAULT_RADIUS = 6.7
RAMP_START = np.radians(85.0)
REFERENCE_FIT = {"l": 26.50, "c1": 173.78, "c2": 0.29}


@dataclass(frozen=True)
class ResponseParams:
    r: float = DEFAULT_RADIUS
    l: float = REFERENCE_FIT["l"]
    c1: float = REFERENCE_FIT["c1"]
    c2: float = REFERENCE_FIT["c2"]

    def __post_init__(self):
        if not (self.r > 0 and self.l > 0 and self.c1 >= 0 and self.c2 >= 0):
            raise ValueError(f"invalid response parameters {self}")

    @property
    def breakpoint(self) -> float:
        return math.atan(2.0 * self.r / self.l)


@dataclass(frozen=True, eq=False)
class SourceTarget:
    position: np.ndarray
    activity_scale: float = 1.0

    def __post_init__(self):
        pos = np.array(self.position, dtype=float).reshape(3)
        pos.setflags(write=False)
        object.__setattr__(self, "position", pos)
        if not self.activity_scale > 0:
            raise ValueError("activity_scale must be positive")


@dataclass(frozen=True)
class Measurement:
    d: float  # mm
    alpha: float  # radians
    cps: float

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError(f"distance must be positive, got {self.d}")
        if not 0.0 <= self.alpha <= math.pi:
            raise ValueError(f"detection angle must lie in [0, pi], got {self.alpha}")


@dataclass
class CalibrationSet:
    measurements: list[Measurement]
    valid: list[bool]
    n_samples: list[int]

    def __post_init__(self):
        if not len(self.measurements) == len(self.valid) == len(self.n_samples):
            raise ValueError("measurements, validity flags and sample counts must align")

    def __len__(self) -> int:
        return len(self.measurements)

    @property
    def n_valid(self) -> int:
        return sum(self.valid)

    def valid_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rows = [m for m, ok in zip(self.measurements, self.valid) if ok]
        return (
            np.array([m.d for m in rows], dtype=float),
            np.array([m.alpha for m in rows], dtype=float),
            np.array([m.cps for m in rows], dtype=float),
        )


# -- response model ---------------------------------------------------------


def scale_function(alpha, r, l, *, floor: float = 0.0, ramp_start: float = RAMP_START):
    """Angular efficiency factor ``f(alpha)``; accepts scalars or arrays."""
    alpha = np.asarray(alpha, dtype=float)
    k = 2.0 * r / l
    breakpoint_ = np.arctan(k)
    # The identity 2r/(l tan a) = k cos a / sin a keeps the branch finite at 90 deg.
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = k * np.cos(alpha) / np.sin(alpha)
    ramp_top = k * np.cos(ramp_start) / np.sin(ramp_start)
    ramp = floor + (ramp_top - floor) * (np.pi / 2 - alpha) / (np.pi / 2 - ramp_start)
    out = np.where(alpha <= breakpoint_, 1.0, tail)
    out = np.where((alpha > ramp_start) & (alpha > breakpoint_), ramp, out)
    out = np.where(alpha >= np.pi / 2, floor, out)
    return out if out.ndim else float(out)


def scale_function_dalpha(alpha, r, l, *, floor: float = 0.0, ramp_start: float = RAMP_START):
    """Derivative of :func:`scale_function` with respect to ``alpha``."""
    alpha = np.asarray(alpha, dtype=float)
    k = 2.0 * r / l
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = -k / np.sin(alpha) ** 2
    ramp_top = k * np.cos(ramp_start) / np.sin(ramp_start)
    ramp = -(ramp_top - floor) / (np.pi / 2 - ramp_start)
    out = np.where(alpha <= np.arctan(k), 0.0, tail)
    out = np.where((alpha > ramp_start) & (alpha > np.arctan(k)), ramp, out)
    return np.where(alpha >= np.pi / 2, 0.0, out)


def geometric_term(d, r):
    """Fraction of the full sphere seen by a disc of radius ``r`` at distance ``d``."""
    d = np.asarray(d, dtype=float)
    return 0.5 * (1.0 - 1.0 / np.sqrt(r * r / (d * d) + 1.0))


def geometric_term_dd(d, r):
    d = np.asarray(d, dtype=float)
    u = r * r / (d * d) + 1.0
    return -0.5 * (r * r / d**3) * u**-1.5


def response(d, alpha, params: ResponseParams, activity_scale=1.0, *, floor: float = 0.0):
    """Expected CPS for distances ``d`` (mm) and detection angles ``alpha``."""
    g = geometric_term(d, params.r)
    f = scale_function(alpha, params.r, params.l, floor=floor)
    return activity_scale * params.c1 * g * f + params.c2


def detection_geometry(tip, axis, point):
    """Distance and detection angle from probe pose(s) to point(s), broadcasting."""
    v = np.asarray(point, dtype=float) - np.asarray(tip, dtype=float)
    d = np.sqrt((v * v).sum(axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_a = (np.asarray(axis, dtype=float) * v).sum(axis=-1) / d
    return d, np.arccos(np.clip(cos_a, -1.0, 1.0))


def expected_cps(params: ResponseParams, probe: ProbePose, source: SourceTarget, *, floor: float = 0.0) -> float:
    d, alpha = detection_geometry(probe.tip, probe.axis, source.position)
    if not d > 0:
        raise ValueError("probe tip coincides with the source; response is singular at d = 0")
    return float(response(d, alpha, params, source.activity_scale, floor=floor))


def sample_cps(params: ResponseParams, probe: ProbePose, source: SourceTarget, rng: np.random.Generator, dwell: float = 1.0) -> float:
    """Poisson count over ``dwell`` seconds, reported as a rate."""
    mean = expected_cps(params, probe, source)
    return poisson_rate(mean, rng, dwell)


def poisson_rate(mean, rng: np.random.Generator, dwell: float = 1.0):
    return rng.poisson(np.asarray(mean) * dwell) / dwell


# -- calibration ------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationProtocol:
    """Platform sweep used to collect calibration readings.

    The probe looks straight down at the source; ``vertical`` is the
    probe-source height and ``horizontal`` the lateral platform offset, both
    as inclusive (start, stop, step) ranges in mm. The near-field sweep runs
    at zero lateral offset.
    """

    vertical: tuple[float, float, float] = (5.0, 45.0, 5.0)
    horizontal: tuple[float, float, float] = (0.0, 15.0, 5.0)
    near_vertical: tuple[float, float, float] = (1.0, 5.0, 1.0)
    samples_per_point: int = 10
    noise: str = "gaussian"  # "gaussian", "poisson" or "none"
    noise_scale: float = 2.78  # std of the averaged reading, gaussian mode
    dwell: float = 1.0  # seconds per sample, poisson mode
    readable_margin: float = 1.0  # points with mean < c2 + margin are unreadable

    def points(self) -> list[tuple[float, float]]:
        """(vertical, horizontal) offsets in acquisition order, duplicates dropped."""

        def span(start, stop, step):
            n = int(round((stop - start) / step))
            return [start + i * step for i in range(n + 1)]

        pts = [(v, h) for v in span(*self.vertical) for h in span(*self.horizontal)]
        seen = set(pts)
        for v in span(*self.near_vertical):
            if (v, 0.0) not in seen:
                pts.append((v, 0.0))
                seen.add((v, 0.0))
        return pts


def generate_calibration_grid(
    params: ResponseParams, protocol: CalibrationProtocol | None = None, rng: np.random.Generator | None = None
) -> CalibrationSet:
    protocol = protocol or CalibrationProtocol()
    if protocol.noise not in ("gaussian", "poisson", "none"):
        raise ValueError(f"unknown noise mode {protocol.noise!r}")
    if protocol.noise != "none" and rng is None:
        raise ValueError("a random generator is required for noisy calibration data")
    n = protocol.samples_per_point
    measurements, valid = [], []
    for v, h in protocol.points():
        d = math.hypot(v, h)
        alpha = math.atan2(h, v)
        mean = float(response(d, alpha, params))
        if protocol.noise == "gaussian":
            # per-sample spread chosen so the n-sample average has std noise_scale
            samples = mean + rng.normal(0.0, protocol.noise_scale * math.sqrt(n), size=n)
            cps = float(samples.mean())
        elif protocol.noise == "poisson":
            cps = float(poisson_rate(np.full(n, mean), rng, protocol.dwell).mean())
        else:
            cps = mean
        measurements.append(Measurement(d, alpha, cps))
        valid.append(cps >= params.c2 + protocol.readable_margin)
    return CalibrationSet(measurements, valid, [n] * len(measurements))


@dataclass(frozen=True)
class FitReport:
    rmse: float
    r_squared: float
    n_points: int
    iterations: int

    def to_text(self, params: ResponseParams) -> str:
        doc = {
            "params": {"r": params.r, "l": params.l, "c1": params.c1, "c2": params.c2},
            "rmse": self.rmse,
            "r_squared": self.r_squared,
            "n_points": self.n_points,
            "iterations": self.iterations,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def response_jacobian_lc(d, alpha, r, l, c1):
    """Model value and partials with respect to (l, c1, c2) at fixed radius."""
    g = geometric_term(d, r)
    f = scale_function(alpha, r, l)
    # f is proportional to 1/l on every non-flat branch (floor = 0)
    df_dl = np.where(alpha <= np.arctan(2 * r / l), 0.0, -f / l)
    return g, f, np.stack([c1 * g * df_dl, g * f, np.ones_like(g)], axis=-1)


def fit_response(
    data: CalibrationSet,
    r: float = DEFAULT_RADIUS,
    initial_guess: tuple[float, float, float] = (20.0, 100.0, 1.0),
    *,
    max_iter: int = 500,
) -> tuple[ResponseParams, FitReport]:
    """Fit (l, c1, c2) by damped least squares with the detector radius held fixed."""
    d, alpha, cps = data.valid_arrays()
    if d.size < 6:
        raise ValueError(f"need at least 6 valid calibration points, got {d.size}")
    if np.ptp(cps) == 0.0:
        raise ValueError("degenerate calibration data: all readings identical")
    # canonical order makes the summations, hence the result, order independent
    order = np.lexsort((cps, alpha, d))
    d, alpha, cps = d[order], alpha[order], cps[order]

    def model(x):
        l, c1, c2 = x[:, 0:1], x[:, 1:2], x[:, 2:3]
        g, f, J = response_jacobian_lc(d[None, :], alpha[None, :], r, l, c1)
        return c1 * g * f + c2 - cps[None, :], J

    res = levenberg_marquardt(
        model,
        np.asarray(initial_guess, dtype=float),
        lower=np.array([1e-6, 0.0, 0.0]),
        upper=np.array([np.inf, np.inf, np.inf]),
        max_iter=max_iter,
    )
    x = res.x[0]
    if not res.converged[0]:
        raise ConvergenceError("calibration fit did not converge", x, float(res.cost[0]))
    params = _polish_linear(ResponseParams(r=r, l=float(x[0]), c1=float(x[1]), c2=float(x[2])), d, alpha, cps)
    pred = response(d, alpha, params)
    ss_res = float(((cps - pred) ** 2).sum())
    ss_tot = float(((cps - cps.mean()) ** 2).sum())
    report = FitReport(
        rmse=math.sqrt(ss_res / d.size),
        r_squared=1.0 - ss_res / ss_tot,
        n_points=int(d.size),
        iterations=int(res.iterations[0]),
    )
    return params, report


def _polish_linear(params: ResponseParams, d, alpha, cps) -> ResponseParams:
    """Exact least-squares (c1, c2) at the fitted l.

    The model is linear in (c1, c2) once l is fixed. Where a data point sits
    on the efficiency breakpoint the objective has a kink in l that can
    stall the damped iteration short of the optimum in the linear pair.
    """
    basis = geometric_term(d, params.r) * scale_function(alpha, params.r, params.l)
    A = np.stack([basis, np.ones_like(basis)], axis=1)
    c1, c2 = np.linalg.lstsq(A, cps, rcond=None)[0]
    if c1 < 0 or c2 < 0:
        return params
    cand = ResponseParams(r=params.r, l=params.l, c1=float(c1), c2=float(c2))
    old = float(((response(d, alpha, params) - cps) ** 2).sum())
    new = float(((response(d, alpha, cand) - cps) ** 2).sum())
    return cand if new < old else params


# -- calibration file -------------------------------------------------------

CALIBRATION_HEADER = "# d_mm, alpha_deg, cps_mean, n_samples, valid_flag"


class CalibrationFileError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


def write_calibration_file(path, data: CalibrationSet) -> None:
    lines = [CALIBRATION_HEADER]
    for m, ok, n in zip(data.measurements, data.valid, data.n_samples):
        lines.append(f"{m.d!r}, {math.degrees(m.alpha)!r}, {m.cps!r}, {n}, {int(ok)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_calibration_file(path) -> CalibrationSet:
    measurements, valid, counts = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [x.strip() for x in line.split(",")]
        if len(fields) != 5:
            raise CalibrationFileError(lineno, f"expected 5 comma-separated fields, got {len(fields)}")
        try:
            d, alpha_deg, cps = float(fields[0]), float(fields[1]), float(fields[2])
            n = int(fields[3])
            flag = int(fields[4])
        except ValueError as exc:
            raise CalibrationFileError(lineno, f"unparseable field ({exc})") from None
        if flag not in (0, 1):
            raise CalibrationFileError(lineno, f"valid_flag must be 0 or 1, got {flag}")
        if n < 1:
            raise CalibrationFileError(lineno, "n_samples must be positive")
        try:
            measurements.append(Measurement(d, math.radians(alpha_deg), cps))
        except ValueError as exc:
            raise CalibrationFileError(lineno, str(exc)) from None
        valid.append(bool(flag))
        counts.append(n)
    return CalibrationSet(measurements, valid, counts)
