"""Adaptive pitch/yaw grid scanning (Phase I).

Each round sweeps the probe over a ``grid_n x grid_n`` grid of headings
spanning ``[-alpha, alpha]`` in pitch and yaw around the current heading,
smooths the readings with a small Gaussian kernel, re-aims the probe at the
smoothed peak and advances the tip along the new heading. The sweep range
shrinks geometrically every round. After the base rounds, scanning continues
as long as the peak still sits on the grid boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy import ndimage

from .estimator import HistoryBuffer
from .kinematics import ProbePose
from .radiation import ResponseParams


class ScanError(RuntimeError):
    pass


class ScanHandle(Protocol):
    """What the scanner needs from an environment.

    ``point`` and ``move`` each consume one environment step and return the
    reading taken at the new pose, or ``None`` when the arm cannot realise
    the command (the step is still consumed). ``move`` takes candidate
    (tip, axis) targets in order of preference and executes the first
    reachable one. ``end_sweep`` returns the probe to the pose held at
    ``begin_sweep`` without consuming a step.
    """

    params: ResponseParams
    step_count: int

    @property
    def pose(self) -> ProbePose: ...

    def begin_sweep(self) -> None: ...

    def point(self, direction: np.ndarray) -> float | None: ...

    def end_sweep(self) -> None: ...

    def move(self, targets: list[tuple[np.ndarray, np.ndarray]]) -> float | None: ...


@dataclass(frozen=True)
class ScanConfig:
    alpha0: float = math.radians(30.0)
    gamma: float = 0.8
    grid_n: int = 5
    blur_sigma: float = 1.0
    blur_size: int = 3
    advance_step: float = 10.0  # mm per round
    base_rounds: int = 2
    max_rounds: int = 3  # keeps Phase I within about half of a 150-step budget
    min_contrast: float = 0.0  # grids whose raw spread is not above this have no peak
    # A boundary peak only asks for another round when the blurred peak beats the
    # blurred centre cell by this many counting-noise deviations (sqrt of the
    # centre reading). Inside the flat-efficiency cone every heading reads the
    # same, so without a margin the noise alone puts most peaks on the rim.
    boundary_margin: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.grid_n < 3 or self.grid_n % 2 == 0:
            raise ValueError("grid_n must be odd and at least 3")
        if not 0.0 < self.alpha0 < math.pi / 2:
            raise ValueError("alpha0 must lie in (0, 90) degrees")
        if self.blur_size < 1 or self.blur_size % 2 == 0:
            raise ValueError("blur kernel size must be odd")
        if self.base_rounds < 1 or self.max_rounds < self.base_rounds:
            raise ValueError("need 1 <= base_rounds <= max_rounds")
        if self.boundary_margin < 0:
            raise ValueError("boundary_margin must be non-negative")

    def alpha_at(self, round_index: int) -> float:
        return self.alpha0 * self.gamma**round_index

    @property
    def steps_per_round(self) -> int:
        # grid samples plus one combined reorient-and-advance move
        return self.grid_n**2 + 1


@dataclass(frozen=True, eq=False)
class ScanGrid:
    values: np.ndarray  # (grid_n, grid_n), rows index pitch, columns yaw
    pitch_offsets: np.ndarray
    yaw_offsets: np.ndarray
    unreachable: np.ndarray = None  # bool mask

    def __post_init__(self):
        if self.unreachable is None:
            object.__setattr__(self, "unreachable", np.zeros(self.values.shape, dtype=bool))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def with_values(self, values: np.ndarray) -> "ScanGrid":
        return ScanGrid(values, self.pitch_offsets, self.yaw_offsets, self.unreachable)


def grid_offsets(alpha: float, n: int) -> np.ndarray:
    return np.linspace(-alpha, alpha, n)


def heading_basis(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing ``axis`` to a right-handed frame.

    Pitch tilts toward the first, yaw toward the second. The first is the
    world x-axis projected off ``axis`` (world y when ``axis`` is nearly x),
    so the grid orientation depends on the heading alone.
    """
    axis = np.asarray(axis, dtype=float)
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ axis) * axis
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


def cell_direction(axis: np.ndarray, pitch: float, yaw: float) -> np.ndarray:
    return _directions(axis, np.array([pitch]), np.array([yaw]))[0, 0]


def _directions(axis: np.ndarray, pitch: np.ndarray, yaw: np.ndarray) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    e1, e2 = heading_basis(axis)
    cp, sp = np.cos(pitch)[:, None, None], np.sin(pitch)[:, None, None]
    cy, sy = np.cos(yaw)[None, :, None], np.sin(yaw)[None, :, None]
    v = cp * cy * axis + sp * e1 + cp * sy * e2
    return v / np.sqrt((v * v).sum(axis=-1, keepdims=True))


def grid_directions(axis: np.ndarray, alpha: float, n: int) -> np.ndarray:
    """Unit headings of every cell, shape ``(n, n, 3)``; rows are pitch, columns yaw."""
    offs = grid_offsets(alpha, n)
    return _directions(axis, offs, offs)


def gaussian_kernel(size: int = 3, sigma: float = 1.0) -> np.ndarray:
    half = size // 2
    x = np.arange(-half, half + 1, dtype=float)
    k1 = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(k1, k1)
    return k / k.sum()


def blur_grid(grid: ScanGrid, size: int = 3, sigma: float = 1.0) -> ScanGrid:
    """Normalized Gaussian smoothing with edge values replicated outward."""
    kernel = gaussian_kernel(size, sigma)
    out = ndimage.correlate(np.asarray(grid.values, dtype=float), kernel, mode="nearest")
    return grid.with_values(out)


def find_peak(grid: ScanGrid) -> tuple[tuple[int, int], bool]:
    """Maximum cell; ties go to the cell nearest the centre, then row-major order."""
    v = np.asarray(grid.values)
    n = v.shape[0]
    c = (n - 1) / 2
    rows, cols = np.nonzero(v == v.max())
    dist = (rows - c) ** 2 + (cols - c) ** 2
    order = np.lexsort((rows * n + cols, dist))
    i, j = int(rows[order[0]]), int(cols[order[0]])
    return (i, j), i in (0, n - 1) or j in (0, n - 1)


def peak_is_significant(blurred: ScanGrid, peak: tuple[int, int], margin: float) -> bool:
    v = np.asarray(blurred.values)
    c = v.shape[0] // 2
    centre = float(v[c, c])
    return bool(v[peak] - centre > margin * np.sqrt(max(centre, 1.0)))


def acquire_grid(handle: ScanHandle, config: ScanConfig, alpha: float, history: HistoryBuffer | None = None) -> ScanGrid:
    """Sweep the grid in row-major order, one environment step per cell.

    Cells the arm cannot point at keep the background level and are flagged.
    The probe is returned to its starting heading afterward.
    """
    n = config.grid_n
    pose0 = handle.pose
    offs = grid_offsets(alpha, n)
    values = np.full((n, n), handle.params.c2)
    unreachable = np.zeros((n, n), dtype=bool)
    dirs = _directions(pose0.axis, offs, offs)
    handle.begin_sweep()
    for i in range(n):
        for j in range(n):
            cps = handle.point(dirs[i, j])
            if cps is None:
                unreachable[i, j] = True
                continue
            values[i, j] = cps
            if history is not None:
                history.append(handle.pose, cps, handle.step_count)
    handle.end_sweep()
    if unreachable.sum() > n * n / 2:
        raise ScanError(f"{int(unreachable.sum())} of {n * n} grid headings unreachable")
    return ScanGrid(values, offs.copy(), offs.copy(), unreachable)


@dataclass(frozen=True, eq=False)
class ScanRound:
    alpha: float
    grid: ScanGrid
    blurred: ScanGrid
    peak: tuple[int, int]
    is_boundary: bool
    has_contrast: bool
    significant: bool  # the peak stands clear of the centre reading
    heading_before: np.ndarray
    heading_after: np.ndarray
    tip_before: np.ndarray
    tip_after: np.ndarray
    advanced: float

    @property
    def resolved(self) -> bool:
        return self.has_contrast and not (self.is_boundary and self.significant)

    def to_record(self) -> dict:
        return {
            "alpha_deg": math.degrees(self.alpha),
            "grid": self.grid.values.tolist(),
            "blurred": self.blurred.values.tolist(),
            "unreachable": self.grid.unreachable.astype(int).tolist(),
            "peak": list(self.peak),
            "is_boundary": self.is_boundary,
            "has_contrast": self.has_contrast,
            "significant": self.significant,
            "heading_before": self.heading_before.tolist(),
            "heading_after": self.heading_after.tolist(),
            "tip_before": self.tip_before.tolist(),
            "tip_after": self.tip_after.tolist(),
            "advanced_mm": self.advanced,
        }


def _reorient_and_advance(handle: ScanHandle, direction: np.ndarray, distance: float, history: HistoryBuffer | None) -> float:
    """One step: aim along ``direction`` and move the tip ``distance`` along it."""
    pose = handle.pose
    # full advance, then half, then a pure re-aim
    targets = [(pose.tip + f * distance * direction, direction) for f in (1.0, 0.5, 0.0)]
    cps = handle.move(targets)
    if cps is None:
        return 0.0
    if history is not None:
        history.append(handle.pose, cps, handle.step_count)
    return float(np.linalg.norm(handle.pose.tip - pose.tip))


def scan_round(
    handle: ScanHandle,
    config: ScanConfig,
    alpha: float,
    history: HistoryBuffer | None = None,
    *,
    advance: float | None = None,
) -> tuple[np.ndarray, float, ScanRound]:
    """Acquire, blur, pick the peak, re-aim and advance; returns (heading, next alpha, record)."""
    if not alpha > 0:
        raise ValueError("scan half-range must be positive")
    pose0 = handle.pose
    grid = acquire_grid(handle, config, alpha, history)
    blurred = blur_grid(grid, config.blur_size, config.blur_sigma)
    peak, boundary = find_peak(blurred)
    reach = grid.values[~grid.unreachable]
    has_contrast = bool(reach.max() - reach.min() > config.min_contrast)
    significant = peak_is_significant(blurred, peak, config.boundary_margin)
    offs = grid.pitch_offsets
    direction = cell_direction(pose0.axis, offs[peak[0]], grid.yaw_offsets[peak[1]])
    step = config.advance_step if advance is None else advance
    moved = _reorient_and_advance(handle, direction, step, history)
    pose1 = handle.pose
    record = ScanRound(
        alpha=alpha,
        grid=grid,
        blurred=blurred,
        peak=peak,
        is_boundary=boundary,
        has_contrast=has_contrast,
        significant=significant,
        heading_before=np.array(pose0.axis),
        heading_after=np.array(pose1.axis),
        tip_before=np.array(pose0.tip),
        tip_after=np.array(pose1.tip),
        advanced=moved,
    )
    return np.array(pose1.axis), config.gamma * alpha, record


@dataclass
class Phase1Result:
    heading: np.ndarray
    history: HistoryBuffer
    rounds_used: int
    steps_used: int
    resolved: bool
    rounds: list[ScanRound] = field(default_factory=list)

    def trace_text(self) -> str:
        doc = {
            "rounds_used": self.rounds_used,
            "steps_used": self.steps_used,
            "resolved": self.resolved,
            "rounds": [r.to_record() for r in self.rounds],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def run_phase1(handle: ScanHandle, config: ScanConfig | None = None, history: HistoryBuffer | None = None) -> Phase1Result:
    """Base rounds, then extra rounds while the peak stays on the boundary."""
    config = config or ScanConfig()
    history = history if history is not None else HistoryBuffer(config.max_rounds * config.steps_per_round)
    start_steps = handle.step_count
    alpha = config.alpha0
    rounds: list[ScanRound] = []
    for i in range(config.max_rounds):
        _, alpha, record = scan_round(handle, config, alpha, history)
        rounds.append(record)
        if i + 1 >= config.base_rounds and record.resolved:
            break
    return Phase1Result(
        heading=np.array(handle.pose.axis),
        history=history,
        rounds_used=len(rounds),
        steps_used=handle.step_count - start_steps,
        resolved=rounds[-1].resolved,
        rounds=rounds,
    )


def range_from_cps(cps: float, params: ResponseParams, activity_scale: float = 1.0) -> float:
    """Distance at which an on-axis source of the given activity reads ``cps``."""
    g = (cps - params.c2) / (activity_scale * params.c1)
    if g <= 0:
        return math.inf
    g = min(g, 0.5 - 1e-12)
    return params.r / math.sqrt(1.0 / (1.0 - 2.0 * g) ** 2 - 1.0)


@dataclass
class ScanOnlyResult:
    success: bool
    steps: int
    final_distance: float
    rounds: list[ScanRound]


def plateau_direction(axis: np.ndarray, grid: ScanGrid, tol: float) -> np.ndarray:
    """Mean heading of the cells within ``tol * spread`` of the grid maximum."""
    v = np.where(grid.unreachable, -np.inf, grid.values)
    top = v.max()
    spread = top - v[np.isfinite(v)].min()
    rows, cols = np.nonzero(v >= top - tol * spread)
    dirs = _directions(axis, grid.pitch_offsets, grid.yaw_offsets)[rows, cols]
    m = dirs.mean(axis=0)
    return m / np.linalg.norm(m)


def run_scan_only(
    handle,
    config: ScanConfig | None = None,
    *,
    max_steps: int = 1000,
    alpha_min: float = math.radians(25.0),
    alpha_max: float = math.radians(75.0),
    standoff: float = 1.0,
    plateau_tol: float = 0.05,
    activity_scale: float = 1.0,
) -> ScanOnlyResult:
    """Localise the source by scanning alone.

    Rounds repeat without a heading hand-off. The half-range shrinks as in
    Phase I down to ``alpha_min``. A grid without contrast means the source
    is outside the swept cone, so the range doubles (up to ``alpha_max``)
    and the probe does not advance; it also holds position while the
    required turn exceeds half the sweep range. The new heading is the mean
    direction of the cells whose raw reading lies within ``plateau_tol``
    (relative to the grid's spread) of the maximum: inside the flat-efficiency cone every cell reads the
    same, so the plateau's centre tracks the source better than its
    tie-broken peak. The advance per round is limited by the
    range implied by the strongest reading, stopping ``standoff`` mm short
    of an on-axis source instead of overshooting it. If too many headings
    are unreachable the half-range is halved and the round retried.
    """
    config = config or ScanConfig()
    rounds: list[ScanRound] = []
    alpha = config.alpha0
    while handle.step_count + config.steps_per_round <= max_steps and not handle.success:
        pose0 = handle.pose
        try:
            grid = acquire_grid(handle, config, alpha)
        except ScanError:
            alpha *= 0.5
            if alpha < math.radians(1.0):
                break
            continue
        blurred = blur_grid(grid, config.blur_size, config.blur_sigma)
        peak, boundary = find_peak(blurred)
        reach = grid.values[~grid.unreachable]
        contrast = bool(reach.max() - reach.min() > config.min_contrast)
        direction = plateau_direction(pose0.axis, grid, plateau_tol)
        turn = math.acos(max(-1.0, min(1.0, float(direction @ pose0.axis))))
        if contrast and turn <= 0.5 * alpha:
            est = range_from_cps(float(reach.max()), handle.params, activity_scale)
            step = min(config.advance_step, max(est - standoff, 0.5))
        else:
            step = 0.0  # turn first
        half = pose0.axis + direction
        half = half / np.linalg.norm(half)
        targets = [
            (pose0.tip + step * direction, direction),
            (pose0.tip + 0.5 * step * direction, direction),
            (pose0.tip, direction),
            (pose0.tip, half),
            (pose0.tip + config.advance_step * 0.5 * pose0.axis, pose0.axis),
        ]
        handle.move(targets)
        moved = float(np.linalg.norm(handle.pose.tip - pose0.tip))
        pose1 = handle.pose
        rounds.append(
            ScanRound(alpha, grid, blurred, peak, boundary, contrast,
                      peak_is_significant(blurred, peak, config.boundary_margin), np.array(pose0.axis), np.array(pose1.axis), np.array(pose0.tip), np.array(pose1.tip), moved)
        )
        if contrast:
            alpha = max(alpha * config.gamma, alpha_min)
        else:
            alpha = min(2.0 * alpha, alpha_max)
    return ScanOnlyResult(bool(handle.success), handle.step_count, float(handle.distance), rounds)
