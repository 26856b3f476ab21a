"""Probe-localisation MDP with a vectorised core.

:class:`VecRadioEnv` holds ``n`` independent episodes in flat arrays and
advances them together. Every arithmetic step is row-independent, so an
episode evolves bit-identically whether it runs alone or inside a batch.
:class:`RadioguidedEnv` is the single-episode view used for evaluation; it
also exposes the scanner handle so Phase I can drive the real arm.

Observation layout, version 1 (``k`` = history length, slot 0 oldest)::

    [0:6)    joint angles q (rad)
    [6:12)   joint increments of the last step (rad)
    [12:15)  probe tip, workspace-normalised
    next k+1 CPS history divided by the episode's running max
    next 3(k+1) tip history, workspace-normalised
    next 1   detection angle between probe axis and the estimated source (rad)
    next 3   offset from tip to the estimated source / EST_RANGE_SCALE

Unfilled history slots are zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .estimator import MIN_SAMPLES, HistoryBuffer, confidence_score, fit_source
from .kinematics import (
    N_JOINTS,
    ArmModel,
    JointState,
    PointingError,
    ProbePose,
    forward_kinematics,
    home_joints,
    solve_pose,
    tip_and_axis,
)
from .radiation import ResponseParams, response
from .scanner import ScanConfig, run_phase1

OBS_LAYOUT_VERSION = 1
EST_RANGE_SCALE = 50.0  # mm
MIN_DISTANCE = 1e-3  # mm, keeps the response finite if the tip lands on the source
HANDOFF_RANGE_FACTORS = (1.0, 0.5, 2.0)

REWARD_VARIANTS = {
    "distance": (1.0, 0.0),
    "signal": (0.0, 0.1),
    "composite": (1.0, 0.1),
}


def observation_width(k: int) -> int:
    return 6 + 6 + 3 + (k + 1) + 3 * (k + 1) + 4


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 150
    success_radius: float = 5.0  # mm
    lambda_d: float = 1.0
    lambda_f: float = 0.1
    lambda_q: float = 0.01
    lambda_s: float = 10.0
    k: int = 5
    sigma: float = 30.0  # mm, per-axis std of the source offset
    nominal_depth: float = 45.0  # mm ahead of the home tip along the home axis
    workspace_lateral: float = 150.0  # half-width across the home axis
    workspace_behind: float = 75.0
    workspace_ahead: float = 150.0
    noise: str = "poisson"  # or "none"
    dwell: float = 1.0  # s
    activity_scale: float = 100.0
    params: ResponseParams = field(default_factory=ResponseParams)
    arm: ArmModel = field(default_factory=ArmModel)
    scan: ScanConfig = field(default_factory=ScanConfig)
    history_window: int = 50  # recent samples used by the source fit
    phase1_capacity: int = 78  # pinned scan samples kept for the fit (three rounds)
    fit_iterations: int = 5  # LM iterations per step, warm-started
    handoff_iterations: int = 40
    fit_activity: bool = False
    guess_range: float = 40.0  # mm along the heading for the initial source guess

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not self.success_radius > 0:
            raise ValueError("success_radius must be positive")
        for name in ("lambda_d", "lambda_f", "lambda_q", "lambda_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.noise not in ("poisson", "none"):
            raise ValueError(f"unknown noise model {self.noise!r}")
        if not self.dwell > 0 or not self.activity_scale > 0:
            raise ValueError("dwell and activity_scale must be positive")
        if self.history_window < 1 or self.phase1_capacity < 0:
            raise ValueError("history capacities must be non-negative (window at least 1)")

    def with_reward(self, variant: str) -> "EnvConfig":
        if variant not in REWARD_VARIANTS:
            raise ValueError(f"unknown reward variant {variant!r}")
        ld, lf = REWARD_VARIANTS[variant]
        return replace(self, lambda_d=ld, lambda_f=lf)

    @property
    def obs_width(self) -> int:
        return observation_width(self.k)

    def home_pose(self) -> ProbePose:
        return forward_kinematics(self.arm, home_joints())

    def nominal_source(self) -> np.ndarray:
        pose = self.home_pose()
        return pose.tip + self.nominal_depth * pose.axis

    def workspace(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box (lower, upper) that contains every sampled source."""
        home = self.home_pose()
        nominal = self.nominal_source()
        lo = nominal - self.workspace_lateral
        hi = nominal + self.workspace_lateral
        # The box's extent along the dominant home-axis direction is asymmetric.
        a = int(np.argmax(np.abs(home.axis)))
        s = np.sign(home.axis[a])
        ends = sorted([nominal[a] - s * self.workspace_behind, nominal[a] + s * self.workspace_ahead])
        lo[a], hi[a] = ends
        return lo, hi


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def sample_source(config: EnvConfig, rng: np.random.Generator, max_tries: int = 10_000) -> np.ndarray:
    """Nominal location plus an isotropic normal offset, rejected outside the workspace."""
    nominal = config.nominal_source()
    if config.sigma == 0:
        return nominal
    lo, hi = config.workspace()
    for _ in range(max_tries):
        p = nominal + config.sigma * rng.standard_normal(3)
        if np.all(p >= lo) and np.all(p <= hi):
            return p
    raise RuntimeError("source sampler failed to land inside the workspace")


@dataclass(frozen=True, eq=False)
class RewardBreakdown:
    dense: float
    potential: float
    speed_penalty: float
    terminal: float
    total: float


@dataclass(frozen=True, eq=False)
class EnvState:
    robot: JointState
    probe: ProbePose
    cps_history: np.ndarray  # (k+1,) raw CPS, slot 0 oldest
    pose_history: np.ndarray  # (k+1, 3) tip positions in mm
    history_filled: int
    running_max: float
    est_angle: float
    est_position: np.ndarray
    step: int


def observation_vector(state: EnvState, config: EnvConfig) -> np.ndarray:
    """Flat observation for a single state (layout documented in the module)."""
    lo, hi = config.workspace()
    center, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    k1 = config.k + 1
    filled = np.arange(k1) >= k1 - state.history_filled
    cps = np.where(filled, state.cps_history / max(state.running_max, 1e-9), 0.0)
    pos = np.where(filled[:, None], (state.pose_history - center) / half, 0.0)
    offset = (state.est_position - state.probe.tip) / EST_RANGE_SCALE
    return np.concatenate(
        [
            state.robot.q,
            state.robot.qdot,
            (state.probe.tip - center) / half,
            cps,
            pos.reshape(-1),
            [state.est_angle],
            offset,
        ]
    )


@dataclass
class StepBatch:
    """Per-env results of one vectorised step (arrays of length n)."""

    obs: np.ndarray
    dense: np.ndarray
    potential: np.ndarray
    speed_penalty: np.ndarray
    terminal: np.ndarray
    total: np.ndarray
    done: np.ndarray
    success: np.ndarray
    distance: np.ndarray
    cps: np.ndarray
    # filled only for episodes that ended this step (auto-reset mode)
    episode_length: np.ndarray
    episode_success: np.ndarray


class VecRadioEnv:
    """``n`` independent episodes stepped in lock-step.

    With ``phase1_init`` every reset runs an idealised Phase I (exact
    pointing, no arm) and hands the arm over at the scan's final pose, which
    is how Phase-II policies are trained. ``auto_reset`` restarts finished
    episodes inside :meth:`step`.
    """

    def __init__(self, config: EnvConfig, seeds, *, phase1_init: bool = False, auto_reset: bool = False):
        self.config = config
        self.seeds = list(seeds)
        self.n = len(self.seeds)
        if self.n < 1:
            raise ValueError("need at least one environment")
        self.phase1_init = phase1_init
        self.auto_reset = auto_reset
        self.rngs = [make_rng(s) for s in self.seeds]
        n, k1 = self.n, config.k + 1
        self._lo, self._hi = config.workspace()
        self._center, self._half = 0.5 * (self._lo + self._hi), 0.5 * (self._hi - self._lo)
        margin = 50.0
        self._fit_lo, self._fit_hi = self._lo - margin, self._hi + margin
        self._home_q = home_joints().q.copy()

        self.q = np.zeros((n, N_JOINTS))
        self.qdot = np.zeros((n, N_JOINTS))
        self.tip = np.zeros((n, 3))
        self.axis = np.zeros((n, 3))
        self.source = np.zeros((n, 3))
        self.activity = np.full(n, config.activity_scale)
        self.cps = np.zeros(n)
        self.cps_hist = np.zeros((n, k1))
        self.pos_hist = np.zeros((n, k1, 3))
        self.hist_filled = np.zeros(n, dtype=int)
        self.running_max = np.zeros(n)
        self.step_count = np.zeros(n, dtype=int)
        self.done = np.zeros(n, dtype=bool)
        self.first_success = np.full(n, -1)
        self.phase2_start = np.zeros(n, dtype=int)
        self.est = np.zeros((n, 3))
        self.est_conf = np.zeros(n)
        P, R = config.phase1_capacity, config.history_window
        self._P, self._R = P, R
        self.h_tip = np.zeros((n, P + R, 3))
        self.h_axis = np.zeros((n, P + R, 3))
        self.h_cps = np.zeros((n, P + R))
        self.h_mask = np.zeros((n, P + R), dtype=bool)
        self.h_count = np.zeros(n, dtype=int)  # samples written to the ring so far

    # -- reset ------------------------------------------------------------

    def reset(self, idx=None) -> np.ndarray:
        ids = range(self.n) if idx is None else np.atleast_1d(idx)
        for i in ids:
            self._reset_one(int(i))
        return self.observations()

    def _clear(self, i: int) -> None:
        self.cps_hist[i] = 0.0
        self.pos_hist[i] = 0.0
        self.hist_filled[i] = 0
        self.h_tip[i] = 0.0
        self.h_axis[i] = 0.0
        self.h_cps[i] = 0.0
        self.h_mask[i] = False
        self.h_count[i] = 0
        self.done[i] = False
        self.first_success[i] = -1
        self.phase2_start[i] = 0
        self.est_conf[i] = 0.0

    def _reset_one(self, i: int, source=None) -> None:
        cfg = self.config
        self._clear(i)
        self.source[i] = sample_source(cfg, self.rngs[i])
        if source is not None:
            # sampled anyway so the rest of the random stream is unchanged
            self.source[i] = np.asarray(source, dtype=float).reshape(3)
        self._set_joints(i, self._home_q, np.zeros(N_JOINTS))
        self.step_count[i] = 0
        c = self._measure_rows(np.array([i]))[0]
        self.cps[i] = c
        self.running_max[i] = c
        self._push_history(np.array([i]), np.array([c]))
        self.est[i] = self.tip[i] + cfg.guess_range * self.axis[i]
        if self.phase1_init:
            self._emulate_phase1(i)

    def _set_joints(self, i: int, q: np.ndarray, qdot: np.ndarray) -> None:
        self.q[i] = q
        self.qdot[i] = qdot
        t, a = tip_and_axis(self.config.arm, self.q[i : i + 1])
        self.tip[i], self.axis[i] = t[0], a[0]

    def _emulate_phase1(self, i: int) -> None:
        cfg = self.config
        handle = IdealPointingHandle(self, i)
        result = run_phase1(handle, cfg.scan)
        pose = handle.pose
        try:
            joints = solve_pose(cfg.arm, JointState(self._home_q), pose.tip, pose.axis)
        except PointingError as e:
            joints = e.joints
        self._set_joints(i, joints.q, np.zeros(N_JOINTS))
        self.step_count[i] = handle.step_count
        tips, axes, cps = result.history.arrays()
        k1 = cfg.k + 1
        m = min(k1, len(cps))
        self.cps_hist[i] = 0.0
        self.pos_hist[i] = 0.0
        self.cps_hist[i, k1 - m :] = cps[-m:]
        self.pos_hist[i, k1 - m :] = tips[-m:]
        self.hist_filled[i] = m
        self.running_max[i] = max(self.running_max[i], float(cps.max()))
        self.cps[i] = cps[-1]
        self.begin_phase2(i, result.history)

    def begin_phase2(self, i: int, history: HistoryBuffer) -> None:
        """Load scan samples into the fit buffer and fit from the heading guess."""
        cfg = self.config
        tips, axes, cps = history.arrays()
        m = min(len(cps), self._P)
        self.h_tip[i, : self._P] = 0.0
        self.h_axis[i, : self._P] = 0.0
        self.h_cps[i, : self._P] = 0.0
        self.h_mask[i, : self._P] = False
        self.h_tip[i, :m] = tips[len(cps) - m :]
        self.h_axis[i, :m] = axes[len(cps) - m :]
        self.h_cps[i, :m] = cps[len(cps) - m :]
        self.h_mask[i, :m] = True
        # ring restarts so scan samples are not counted twice
        self.h_tip[i, self._P :] = 0.0
        self.h_axis[i, self._P :] = 0.0
        self.h_cps[i, self._P :] = 0.0
        self.h_mask[i, self._P :] = False
        self.h_count[i] = 0
        self.phase2_start[i] = self.step_count[i]
        # multi-start along the heading; the nominal guess is the middle one
        best, best_cost = None, np.inf
        for f in HANDOFF_RANGE_FACTORS:
            self.est[i] = self.tip[i] + f * cfg.guess_range * self.axis[i]
            cost = self._refit(np.array([i]), cfg.handoff_iterations)
            c = np.inf if cost is None else float(cost[0])
            if c < best_cost:
                best, best_cost, conf = self.est[i].copy(), c, self.est_conf[i]
        if best is None:
            self.est[i] = self.tip[i] + cfg.guess_range * self.axis[i]
            self.est_conf[i] = 0.0
        else:
            self.est[i], self.est_conf[i] = best, conf

    # -- dynamics ---------------------------------------------------------

    def _measure_rows(self, idx: np.ndarray) -> np.ndarray:
        cfg = self.config
        v = self.source[idx] - self.tip[idx]
        d = np.sqrt((v * v).sum(axis=-1))
        cos_a = (self.axis[idx] * v).sum(axis=-1) / np.maximum(d, MIN_DISTANCE)
        alpha = np.arccos(np.clip(cos_a, -1.0, 1.0))
        mean = response(np.maximum(d, MIN_DISTANCE), alpha, cfg.params, self.activity[idx])
        if cfg.noise == "none":
            return np.asarray(mean, dtype=float)
        out = np.empty(len(idx))
        for j, i in enumerate(idx):
            out[j] = self.rngs[i].poisson(mean[j] * cfg.dwell) / cfg.dwell
        return out

    def _push_history(self, idx: np.ndarray, cps: np.ndarray) -> None:
        self.cps_hist[idx] = np.roll(self.cps_hist[idx], -1, axis=1)
        self.pos_hist[idx] = np.roll(self.pos_hist[idx], -1, axis=1)
        self.cps_hist[idx, -1] = cps
        self.pos_hist[idx, -1] = self.tip[idx]
        self.hist_filled[idx] = np.minimum(self.hist_filled[idx] + 1, self.config.k + 1)

    def _record_sample(self, idx: np.ndarray, cps: np.ndarray) -> None:
        slot = self._P + self.h_count[idx] % self._R
        self.h_tip[idx, slot] = self.tip[idx]
        self.h_axis[idx, slot] = self.axis[idx]
        self.h_cps[idx, slot] = cps
        self.h_mask[idx, slot] = True
        self.h_count[idx] += 1

    def _refit(self, idx: np.ndarray, iterations: int) -> np.ndarray | None:
        """Warm-started fit for rows ``idx``; returns the costs of rows that could be fitted."""
        if len(idx) == 0:
            return None
        m = self.h_mask[idx]
        count = m.sum(axis=1)
        cps = self.h_cps[idx]
        big = np.where(m, cps, -np.inf).max(axis=1)
        small = np.where(m, cps, np.inf).min(axis=1)
        ax = self.h_axis[idx]
        ax_hi = np.where(m[..., None], ax, -np.inf).max(axis=1)
        ax_lo = np.where(m[..., None], ax, np.inf).min(axis=1)
        ok = (count >= MIN_SAMPLES) & (big > small) & ((ax_hi - ax_lo).max(axis=1) > 1e-9)
        rows = idx[ok]
        if len(rows) == 0:
            return None
        res = fit_source(
            self.h_tip[rows],
            self.h_axis[rows],
            self.h_cps[rows],
            self.h_mask[rows],
            self.est[rows],
            self.config.params,
            self.activity[rows],
            fit_activity=self.config.fit_activity,
            lower=self._fit_lo,
            upper=self._fit_hi,
            max_iter=iterations,
            dwell=self.config.dwell,
        )
        x = res.x[:, :3]
        good = np.isfinite(x).all(axis=1)
        self.est[rows] = np.where(good[:, None], x, self.est[rows])
        rmse = np.sqrt(res.cost / self.h_mask[rows].sum(axis=1))
        self.est_conf[rows] = [confidence_score(float(a)) if g else 0.0 for a, g in zip(rmse, good)]
        return np.where(good, res.cost, np.inf)

    def transition(self, idx: np.ndarray, q_new: np.ndarray, *, fit: bool = True) -> dict:
        """Move rows ``idx`` to joint targets ``q_new`` and score the step."""
        cfg = self.config
        if np.any(self.done[idx]):
            raise RuntimeError("step called on a finished episode; reset it first")
        q_old = self.q[idx].copy()
        self.q[idx] = q_new
        self.qdot[idx] = q_new - q_old
        t, a = tip_and_axis(cfg.arm, self.q[idx])
        self.tip[idx], self.axis[idx] = t, a
        prev = self.cps[idx].copy()
        cps = self._measure_rows(idx)
        self.cps[idx] = cps
        self.running_max[idx] = np.maximum(self.running_max[idx], cps)
        self._push_history(idx, cps)
        self.step_count[idx] += 1
        if fit:
            self._record_sample(idx, cps)
            self._refit(idx, cfg.fit_iterations)

        v = self.tip[idx] - self.source[idx]
        dist = np.sqrt((v * v).sum(axis=-1))
        success = dist < cfg.success_radius
        horizon = self.step_count[idx] >= cfg.horizon
        done = success | horizon
        first = success & (self.first_success[idx] < 0)
        self.first_success[idx] = np.where(first, self.step_count[idx], self.first_success[idx])
        dense = -dist
        potential = cps - prev
        speed = -np.abs(self.qdot[idx]).sum(axis=-1)
        terminal = success.astype(float)
        total = cfg.lambda_d * dense + cfg.lambda_f * potential + cfg.lambda_q * speed + cfg.lambda_s * terminal
        self.done[idx] = done
        return dict(
            dense=dense, potential=potential, speed_penalty=speed, terminal=terminal, total=total,
            done=done, success=success, distance=dist, cps=cps,
        )

    def clamp_actions(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=float)
        if actions.shape != (self.n, N_JOINTS):
            raise ValueError(f"expected actions of shape {(self.n, N_JOINTS)}, got {actions.shape}")
        bad = ~np.isfinite(actions).all(axis=1)
        if bad.any():
            raise ValueError(f"non-finite action for env(s) {np.nonzero(bad)[0].tolist()}")
        arm = self.config.arm
        delta = np.clip(actions, -arm.increment_cap, arm.increment_cap)
        return np.clip(self.q + delta, arm.lower, arm.upper)

    def step(self, actions: np.ndarray) -> StepBatch:
        q_new = self.clamp_actions(actions)
        idx = np.arange(self.n)
        r = self.transition(idx, q_new)
        length = np.where(r["done"], self.step_count - self.phase2_start, 0)
        ep_success = r["done"] & r["success"]
        if self.auto_reset:
            for i in np.nonzero(r["done"])[0]:
                self._reset_one(int(i))
        return StepBatch(obs=self.observations(), episode_length=length, episode_success=ep_success, **r)

    # -- observation ------------------------------------------------------

    def observations(self) -> np.ndarray:
        k1 = self.config.k + 1
        filled = np.arange(k1)[None, :] >= (k1 - self.hist_filled)[:, None]
        rm = np.maximum(self.running_max, 1e-9)[:, None]
        cps = np.where(filled, self.cps_hist / rm, 0.0)
        pos = np.where(filled[..., None], (self.pos_hist - self._center) / self._half, 0.0)
        off = self.est - self.tip
        dn = np.sqrt((off * off).sum(axis=-1))
        cos_a = (self.axis * off).sum(axis=-1) / np.maximum(dn, 1e-12)
        angle = np.arccos(np.clip(cos_a, -1.0, 1.0))
        return np.concatenate(
            [
                self.q,
                self.qdot,
                (self.tip - self._center) / self._half,
                cps,
                pos.reshape(self.n, -1),
                angle[:, None],
                off / EST_RANGE_SCALE,
            ],
            axis=1,
        )

    def state(self, i: int) -> EnvState:
        off = self.est[i] - self.tip[i]
        dn = math.sqrt(float(off @ off))
        angle = math.acos(max(-1.0, min(1.0, float(self.axis[i] @ off) / max(dn, 1e-12))))
        joints = JointState(self.q[i].copy(), self.qdot[i].copy())
        return EnvState(
            robot=joints,
            probe=forward_kinematics(self.config.arm, joints),
            cps_history=self.cps_hist[i].copy(),
            pose_history=self.pos_hist[i].copy(),
            history_filled=int(self.hist_filled[i]),
            running_max=float(self.running_max[i]),
            est_angle=angle,
            est_position=self.est[i].copy(),
            step=int(self.step_count[i]),
        )


class IdealPointingHandle:
    """Scanner handle with exact pointing and no arm, for cheap training resets.

    Readings use the owning env's source and RNG stream; nothing in the
    owning env changes except the RNG state.
    """

    def __init__(self, env: VecRadioEnv, i: int):
        self.env, self.i = env, i
        self.params = env.config.params
        self.step_count = int(env.step_count[i])
        self._tip = env.tip[i].copy()
        self._axis = env.axis[i].copy()
        self._saved = None

    @property
    def pose(self) -> ProbePose:
        return ProbePose(self._tip.copy(), self._axis.copy(), np.array([0.0, 0.0, 0.0, 1.0]))

    def _read(self) -> float:
        env, i = self.env, self.i
        saved = env.tip[i].copy(), env.axis[i].copy()
        env.tip[i], env.axis[i] = self._tip, self._axis
        c = float(env._measure_rows(np.array([i]))[0])
        env.tip[i], env.axis[i] = saved
        self.step_count += 1
        return c

    def begin_sweep(self) -> None:
        self._saved = self._axis.copy()

    def point(self, direction) -> float:
        self._axis = np.asarray(direction, dtype=float)
        return self._read()

    def end_sweep(self) -> None:
        self._axis = self._saved

    def move(self, targets) -> float:
        tip, direction = targets[0]
        self._tip = np.asarray(tip, dtype=float)
        self._axis = np.asarray(direction, dtype=float)
        return self._read()


class RadioguidedEnv:
    """Single episode with scalar results, trace recording and a scanner handle."""

    def __init__(self, config: EnvConfig | None = None, seed=0, *, record_trace: bool = True):
        self.config = config or EnvConfig()
        self.seed = seed
        self.record_trace = record_trace
        self._vec = VecRadioEnv(self.config, [seed])
        self.trace: list[dict] = []
        self._sweep_q = None
        self._warm_q = None
        self.reset(seed)

    # -- episode API --------------------------------------------------------

    def reset(self, seed=None, *, source=None) -> EnvState:
        """New episode; ``source`` pins the source position instead of sampling it."""
        if seed is not None:
            self.seed = seed
            self._vec.rngs[0] = make_rng(seed)
        self._vec._reset_one(0, source)
        self.trace = []
        return self.state

    @property
    def state(self) -> EnvState:
        return self._vec.state(0)

    def observation(self) -> np.ndarray:
        return self._vec.observations()[0]

    def step(self, action) -> tuple[EnvState, RewardBreakdown, bool, dict]:
        action = np.asarray(action, dtype=float).reshape(N_JOINTS)
        q_new = self._vec.clamp_actions(action[None])
        return self._transition(q_new, action, fit=True)

    def _transition(self, q_new: np.ndarray, action: np.ndarray, *, fit: bool, phase: int = 2):
        r = self._vec.transition(np.array([0]), q_new, fit=fit)
        rb = RewardBreakdown(
            float(r["dense"][0]), float(r["potential"][0]), float(r["speed_penalty"][0]),
            float(r["terminal"][0]), float(r["total"][0]),
        )
        done = bool(r["done"][0])
        info = {
            "success": bool(r["success"][0]),
            "distance": float(r["distance"][0]),
            "cps": float(r["cps"][0]),
            "first_success_step": self.first_success_step,
            "phase": phase,
        }
        if self.record_trace:
            self._log(action, rb, done, phase)
        return self.state, rb, done, info

    def _log(self, action, rb: RewardBreakdown, done: bool, phase: int) -> None:
        v = self._vec
        off = v.est[0] - v.tip[0]
        angle = math.acos(max(-1.0, min(1.0, float(v.axis[0] @ off) / max(math.sqrt(float(off @ off)), 1e-12))))
        self.trace.append(
            dict(
                step=int(v.step_count[0]), phase=phase, q=v.q[0].copy(), tip=v.tip[0].copy(), cps=float(v.cps[0]),
                est_angle=angle, action=np.asarray(action, dtype=float).copy(), dense=rb.dense,
                potential=rb.potential, speed_penalty=rb.speed_penalty, terminal=rb.terminal,
                total=rb.total, done=done,
            )
        )

    @property
    def source(self) -> np.ndarray:
        return self._vec.source[0].copy()

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self._vec.tip[0] - self._vec.source[0]))

    @property
    def success(self) -> bool:
        return self.first_success_step is not None

    @property
    def first_success_step(self) -> int | None:
        s = int(self._vec.first_success[0])
        return None if s < 0 else s

    @property
    def done(self) -> bool:
        return bool(self._vec.done[0])

    @property
    def step_count(self) -> int:
        return int(self._vec.step_count[0])

    def begin_phase2(self, history: HistoryBuffer) -> None:
        self._vec.begin_phase2(0, history)

    @property
    def estimate(self) -> np.ndarray:
        return self._vec.est[0].copy()

    @property
    def estimate_confidence(self) -> float:
        return float(self._vec.est_conf[0])

    def degrade_estimate(self) -> None:
        """Mark the current estimate as untrusted; the next successful refit restores a confidence."""
        self._vec.est_conf[0] = 0.0

    # -- scanner handle ------------------------------------------------------

    @property
    def params(self) -> ResponseParams:
        return self.config.params

    @property
    def joints(self) -> JointState:
        return JointState(self._vec.q[0].copy(), self._vec.qdot[0].copy())

    @property
    def pose(self) -> ProbePose:
        return forward_kinematics(self.config.arm, self.joints)

    def _scan_step(self, q_new: np.ndarray) -> float:
        # Scan moves bypass the per-step increment cap; they are point-to-point.
        # A finished episode is reopened so mandatory scanning can complete.
        self._vec.done[0] = False
        _, _, _, info = self._transition(q_new[None], q_new - self._vec.q[0], fit=False, phase=1)
        return info["cps"]

    def begin_sweep(self) -> None:
        self._sweep_q = self._vec.q[0].copy()
        self._sweep_tip = self._vec.tip[0].copy()
        self._warm_q = self._sweep_q

    def point(self, direction) -> float | None:
        try:
            joints = solve_pose(self.config.arm, JointState(self._warm_q), self._sweep_tip, direction)
        except PointingError:
            self._scan_step(self._vec.q[0].copy())
            return None
        self._warm_q = joints.q
        return self._scan_step(joints.q)

    def end_sweep(self) -> None:
        v = self._vec
        v._set_joints(0, self._sweep_q, np.zeros(N_JOINTS))

    def move(self, targets) -> float | None:
        start = JointState(self._vec.q[0].copy())
        for tip, direction in targets:
            try:
                joints = solve_pose(self.config.arm, start, tip, direction)
            except PointingError:
                continue
            return self._scan_step(joints.q)
        self._scan_step(start.q)
        return None


def batch_step(envs: list[RadioguidedEnv], actions) -> list:
    """Step each env with its action; a failing env yields its exception in place."""
    actions = list(actions)
    if len(actions) != len(envs):
        raise ValueError(f"{len(envs)} envs but {len(actions)} actions")
    out = []
    for env, a in zip(envs, actions):
        try:
            out.append(env.step(a))
        except Exception as e:  # isolation: report per index, keep going
            out.append(e)
    return out


TRACE_COLUMNS = (
    ["step", "phase"]
    + [f"q{i}" for i in range(N_JOINTS)]
    + ["tip_x", "tip_y", "tip_z", "cps", "est_angle"]
    + [f"a{i}" for i in range(N_JOINTS)]
    + ["dense", "potential", "speed_penalty", "terminal", "total", "done"]
)


def trace_rows(trace: list[dict]) -> list[list[str]]:
    rows = []
    for t in trace:
        vals = [t["step"], t["phase"], *t["q"], *t["tip"], t["cps"], t["est_angle"], *t["action"]]
        vals += [t["dense"], t["potential"], t["speed_penalty"], t["terminal"], t["total"], int(t["done"])]
        rows.append([v if isinstance(v, (int, np.integer)) else repr(float(v)) for v in vals])
    return rows


def write_trace_csv(path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        w.writerows(trace_rows(trace))


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("step", "phase", "done") else float(v)) for k, v in r.items()} for r in rows]
