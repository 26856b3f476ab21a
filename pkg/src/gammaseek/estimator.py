"""Angle prediction: locate the source by fitting the response model to history.

Every (probe pose, CPS) sample constrains the source position through the
response model. A damped least-squares fit over the three source coordinates
turns a history of readings into a position estimate; the observation then
carries the detection angle between the current probe axis and that estimate.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .kinematics import ProbePose
from .lsq import LMResult, levenberg_marquardt
from .radiation import RAMP_START, ResponseParams

MIN_SAMPLES = 8


class UnobservableError(ValueError):
    """The history carries no usable information about the source position."""


@dataclass(frozen=True, eq=False)
class HistorySample:
    tip: np.ndarray
    axis: np.ndarray
    cps: float
    step: int


class HistoryBuffer:
    """Chronological ring of probe readings; the oldest entry is evicted when full."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._items: deque[HistorySample] = deque(maxlen=self.capacity)

    def append(self, pose: ProbePose, cps: float, step: int) -> None:
        if self._items and step < self._items[-1].step:
            raise ValueError("history must be appended in chronological order")
        self._items.append(HistorySample(np.array(pose.tip, float), np.array(pose.axis, float), float(cps), int(step)))

    def extend(self, other: "HistoryBuffer") -> None:
        for s in other:
            self._items.append(s)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self._items:
            return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
        tips = np.array([s.tip for s in self._items])
        axes = np.array([s.axis for s in self._items])
        cps = np.array([s.cps for s in self._items])
        return tips, axes, cps


@dataclass(frozen=True, eq=False)
class TargetEstimate:
    position: np.ndarray
    relative_angle: float
    direction: np.ndarray  # unit vector from the probe tip to the estimate
    confidence: float
    rmse: float  # RMS residual in units of the Poisson standard deviation
    converged: bool


def relative_angle(pose: ProbePose, point) -> float:
    v = np.asarray(point, dtype=float) - pose.tip
    n = float(np.sqrt(v @ v))
    if n == 0.0:
        raise ValueError("point coincides with the probe tip")
    return float(np.arccos(np.clip(pose.axis @ (v / n), -1.0, 1.0)))


def model_and_jacobian(
    source: np.ndarray,
    tips: np.ndarray,
    axes: np.ndarray,
    params: ResponseParams,
    activity: np.ndarray,
    *,
    min_distance: float = 1e-3,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Predicted CPS and its gradient for batched source hypotheses.

    ``source`` is ``(B, 3)``, ``tips``/``axes`` are ``(B, N, 3)`` and
    ``activity`` is ``(B,)``. Returns the prediction ``(B, N)``, its gradient
    with respect to the source position ``(B, N, 3)`` and its partial with
    respect to the activity scale ``(B, N)``.
    """
    v = source[:, None, :] - tips
    d = np.maximum(np.sqrt((v * v).sum(axis=-1)), min_distance)
    vhat = v / d[..., None]
    cos_a = np.clip((axes * vhat).sum(axis=-1), -1.0, 1.0)
    f, coef = _efficiency_from_cos(cos_a, params.r, params.l)
    coef = coef / d
    u = params.r * params.r / (d * d) + 1.0
    g = 0.5 * (1.0 - 1.0 / np.sqrt(u))
    dg = -0.5 * (params.r * params.r / (d * d * d)) * u**-1.5
    dalpha_term = coef[..., None] * (axes - cos_a[..., None] * vhat)
    scale = (activity * params.c1)[:, None]
    gf = g * f
    pred = scale * gf + params.c2
    grad = scale[..., None] * ((dg * f)[..., None] * vhat + g[..., None] * dalpha_term)
    return pred, grad, params.c1 * gf


def _efficiency_from_cos(cos_a: np.ndarray, r: float, l: float) -> tuple[np.ndarray, np.ndarray]:
    """``f`` and ``-f'(alpha) / sin(alpha)`` evaluated from ``cos(alpha)``.

    Same branches as :func:`scale_function` with a zero floor. The second
    output is what the chain rule through ``alpha = arccos(.)`` needs; it is
    zero wherever ``f`` is flat, which covers the points where
    ``sin(alpha) = 0``.
    """
    k = 2.0 * r / l
    c_break = 1.0 / np.sqrt(1.0 + k * k)
    c_ramp = np.cos(RAMP_START)
    ramp_top = k * c_ramp / np.sin(RAMP_START)
    ramp_slope = ramp_top / (np.pi / 2 - RAMP_START)
    s = np.sqrt(np.maximum(1.0 - cos_a * cos_a, 0.0))
    s_safe = np.where(s > 0, s, 1.0)
    tail = (cos_a < c_break) & (cos_a >= c_ramp)
    ramp = (cos_a < c_ramp) & (cos_a > 0.0)
    alpha = np.arccos(np.where(ramp, cos_a, c_ramp))
    f = np.where(cos_a >= c_break, 1.0, 0.0)
    f = np.where(tail, k * cos_a / s_safe, f)
    f = np.where(ramp, ramp_slope * (np.pi / 2 - alpha), f)
    coef = np.where(tail, k / (s_safe * s_safe * s_safe), 0.0)
    coef = np.where(ramp, ramp_slope / s_safe, coef)
    return f, coef


def fit_source(
    tips: np.ndarray,
    axes: np.ndarray,
    cps: np.ndarray,
    mask: np.ndarray,
    x0: np.ndarray,
    params: ResponseParams,
    activity: np.ndarray,
    *,
    fit_activity: bool = False,
    lower: np.ndarray | None = None,
    upper: np.ndarray | None = None,
    max_iter: int = 50,
    dwell: float | None = 1.0,
) -> LMResult:
    """Batched source-position fit; masked rows carry zero weight.

    With ``dwell`` set, residuals are weighted by the inverse Poisson
    variance of each reading, ``dwell / max(cps, 1)``, so the cost is a
    chi-square; ``dwell=None`` gives an unweighted fit.
    """
    activity = np.asarray(activity, dtype=float)
    w = poisson_weights(cps, mask, dwell)

    if fit_activity:

        def model(x):
            pred, grad, dact = model_and_jacobian(x[:, :3], tips, axes, params, x[:, 3])
            return pred - cps, np.concatenate([grad, dact[..., None]], axis=-1)

        x_init = np.concatenate([x0, activity[:, None]], axis=-1)
        lo = None if lower is None else np.append(lower, 1e-6)
        hi = None if upper is None else np.append(upper, np.inf)
        if lo is None:
            lo = np.array([-np.inf] * 3 + [1e-6])
    else:

        def model(x):
            pred, grad, _ = model_and_jacobian(x, tips, axes, params, activity)
            return pred - cps, grad

        x_init, lo, hi = x0, lower, upper
    return levenberg_marquardt(model, x_init, w, lower=lo, upper=hi, max_iter=max_iter, ftol=1e-12, xtol=1e-9)


def poisson_weights(cps: np.ndarray, mask: np.ndarray, dwell: float | None) -> np.ndarray:
    w = mask.astype(float)
    if dwell is None:
        return w
    return w * dwell / np.maximum(cps, 1.0)


def confidence_score(rmse: float) -> float:
    """1 when the noise-normalised residual is at the counting-noise level, decaying as 1/rmse."""
    if not np.isfinite(rmse):
        return 0.0
    return 1.0 if rmse <= 1.0 else float(1.0 / rmse)


def estimate_target(
    history: HistoryBuffer,
    params: ResponseParams,
    initial_guess,
    *,
    pose: ProbePose | None = None,
    activity_scale: float = 1.0,
    fit_activity: bool = False,
    dwell: float = 1.0,
    max_iter: int = 200,
) -> TargetEstimate:
    """Fit the source position to ``history`` starting from ``initial_guess``.

    The relative angle is measured from ``pose`` (default: the most recent
    history sample). Raises :class:`UnobservableError` when the readings
    cannot constrain the source: fewer than 8 samples, a single probe
    heading, or a flat CPS trace. A fit that fails to converge returns the
    initial guess with zero confidence.
    """
    tips, axes, cps = history.arrays()
    if len(cps) < MIN_SAMPLES:
        raise UnobservableError(f"need at least {MIN_SAMPLES} samples, got {len(cps)}")
    if np.ptp(cps) == 0.0:
        raise UnobservableError("constant CPS trace carries no gradient information")
    spread = np.abs(axes - axes[0]).max()
    if spread < 1e-9:
        raise UnobservableError("all samples share one probe heading")
    if pose is None:
        last = list(history)[-1]
        pose = ProbePose(tip=last.tip, axis=last.axis, orientation=np.array([0.0, 0.0, 0.0, 1.0]))
    guess = np.asarray(initial_guess, dtype=float).reshape(3)

    res = fit_source(
        tips[None],
        axes[None],
        cps[None],
        np.ones((1, len(cps)), dtype=bool),
        guess[None],
        params,
        np.array([activity_scale]),
        fit_activity=fit_activity,
        max_iter=max_iter,
        dwell=dwell,
    )
    position = res.x[0, :3]
    rmse = float(np.sqrt(res.cost[0] / len(cps)))
    converged = bool(res.converged[0])
    if not converged:
        position = guess
        confidence = 0.0
    else:
        confidence = confidence_score(rmse)
    v = position - pose.tip
    norm = float(np.sqrt(v @ v))
    direction = v / norm if norm > 0 else np.array(pose.axis, dtype=float)
    angle = relative_angle(pose, position) if norm > 0 else 0.0
    return TargetEstimate(position, angle, direction, confidence, rmse, converged)
