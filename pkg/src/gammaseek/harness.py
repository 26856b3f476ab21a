"""Batch evaluation, reward ablation, calibration reports and result export.

Methods are compared on matched seeds: trial ``i`` of every method at a
given placement spread uses the same seed, hence the same source position.
All result files are written with sorted keys and ``repr`` floats so that
identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .env import RadioguidedEnv
from .hybrid import EpisodeRecord, HybridConfig, run_drl_episode, run_episode
from .policy import CURVE_COLUMNS, PolicyNet, TrainResult, load_checkpoint, train
from .radiation import (
    CalibrationProtocol,
    CalibrationSet,
    FitReport,
    ResponseParams,
    fit_response,
    generate_calibration_grid,
    read_calibration_file,
    response,
)
from .scanner import run_scan_only

METHODS = ("scan", "drl", "hybrid")
RESULT_COLUMNS = ["method", "sigma", "n_trials", "successes", "success_rate", "ci_half_width", "mean_steps", "mean_phase1_steps"]
EPISODE_COLUMNS = ["method", "sigma", "trial", "seed", "success", "steps", "phase1_steps", "phase2_steps", "final_distance"]


class MethodError(RuntimeError):
    """A method failed while running; distinct from configuration mistakes."""


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n < 1:
        raise ValueError("need at least one trial")
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # exact at the ends, where cancellation leaves round-off residue
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def trial_seeds(seed: int, n: int) -> list[int]:
    """Per-trial seeds shared by every method and spread."""
    return [int(np.random.SeedSequence([seed, 7, i]).generate_state(1)[0]) for i in range(n)]


@dataclass(frozen=True)
class EvalRow:
    method: str
    sigma: float
    n_trials: int
    successes: int
    success_rate: float
    ci_half_width: float
    mean_steps: float  # over successful trials only; nan when there are none
    mean_phase1_steps: float

    @classmethod
    def from_episodes(cls, method: str, sigma: float, episodes: list["EpisodeResult"]) -> "EvalRow":
        n = len(episodes)
        wins = [e for e in episodes if e.success]
        lo, hi = wilson_interval(len(wins), n)
        steps = float(np.mean([e.steps for e in wins])) if wins else math.nan
        p1 = float(np.mean([e.phase1_steps for e in episodes]))
        return cls(method, float(sigma), n, len(wins), len(wins) / n, (hi - lo) / 2, steps, p1)


@dataclass(frozen=True)
class EpisodeResult:
    method: str
    sigma: float
    trial: int
    seed: int
    success: bool
    steps: int  # steps to first success, or all steps taken on failure
    phase1_steps: int
    phase2_steps: int
    final_distance: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    episodes: list[EpisodeResult] = field(default_factory=list)

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)
        self.episodes.extend(other.episodes)

    def row(self, method: str, sigma: float) -> EvalRow:
        for r in self.rows:
            if r.method == method and r.sigma == float(sigma):
                return r
        raise KeyError((method, sigma))

    @classmethod
    def from_episodes(cls, episodes: list[EpisodeResult]) -> "EvalReport":
        """Recompute every row from per-episode results."""
        groups: dict[tuple[str, float], list[EpisodeResult]] = {}
        for e in episodes:
            groups.setdefault((e.method, e.sigma), []).append(e)
        rows = [EvalRow.from_episodes(m, s, eps) for (m, s), eps in groups.items()]
        return cls(rows, list(episodes))


def _episode_result(method, sigma, trial, seed, rec: EpisodeRecord) -> EpisodeResult:
    steps = rec.first_success_step if rec.success else rec.total_steps
    return EpisodeResult(
        method, float(sigma), trial, seed, bool(rec.success), int(steps),
        rec.phase1_steps, rec.phase2_steps, float(rec.final_distance),
    )


def _scan_episode(cfg: RunConfig, sigma: float, seed: int) -> EpisodeRecord:
    env_cfg = cfg.env_config(sigma=float(sigma), horizon=cfg.eval.scan_max_steps, noise=cfg.eval.scan_noise)
    env = RadioguidedEnv(env_cfg, seed, record_trace=False)
    res = run_scan_only(env, cfg.scan, max_steps=cfg.eval.scan_max_steps, activity_scale=env_cfg.activity_scale)
    return EpisodeRecord(
        seed=seed, phase1_steps=env.step_count, phase2_steps=0, success=env.success,
        final_distance=res.final_distance, first_success_step=env.first_success_step,
        phase1_resolved=True, handoff_confidence=0.0, degraded=False, rounds_used=len(res.rounds),
    )


def evaluate(
    method: str,
    sigma: float,
    n_trials: int,
    seed: int,
    *,
    config: RunConfig | None = None,
    policy: PolicyNet | None = None,
    checkpoint=None,
) -> EvalReport:
    """``n_trials`` seeded episodes of one method at one placement spread.

    ``drl`` and ``hybrid`` need a policy, given directly or as a checkpoint
    path. Success is a tip within the success radius inside the episode
    budget (the shared 150-step cap; scan-only uses its own longer cap).
    """
    cfg = config or RunConfig()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    if method != "scan" and policy is None:
        if checkpoint is None:
            raise FileNotFoundError(f"method {method!r} needs a policy checkpoint")
        if not Path(checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
        policy = load_checkpoint(checkpoint)
    hcfg = HybridConfig(scan=cfg.scan, total_cap=cfg.hybrid.total_cap)
    env_cfg = cfg.env_config(sigma=float(sigma), horizon=cfg.hybrid.total_cap)
    episodes = []
    for i, s in enumerate(trial_seeds(seed, n_trials)):
        try:
            if method == "scan":
                rec = _scan_episode(cfg, sigma, s)
            elif method == "drl":
                rec = run_drl_episode(RadioguidedEnv(env_cfg, s, record_trace=False), policy)
            else:
                rec = run_episode(RadioguidedEnv(env_cfg, s, record_trace=False), hcfg, policy)
        except (ValueError, FileNotFoundError):
            raise
        except Exception as exc:
            raise MethodError(f"{method} trial {i} (seed {s}) failed: {exc}") from exc
        episodes.append(_episode_result(method, sigma, i, s, rec))
    return EvalReport([EvalRow.from_episodes(method, sigma, episodes)], episodes)


# -- reward ablation -------------------------------------------------------------


@dataclass
class AblationRun:
    variant: str
    seed: int
    curves: list[dict]
    final_success: float  # rolling success averaged over the last few curve points
    final_episode_length: float


@dataclass
class AblationResult:
    variant: str
    runs: list[AblationRun]

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.runs]

    @property
    def mean_final_success(self) -> float:
        return float(np.mean([r.final_success for r in self.runs]))

    @property
    def mean_episode_length(self) -> float:
        return float(np.mean([r.final_episode_length for r in self.runs]))

    @property
    def success_variance(self) -> float:
        """Across-seed variance of the success-rate curve, averaged over the curve."""
        return curve_variance([[c["success_rate"] for c in r.curves] for r in self.runs])


def curve_variance(curves: list[list[float]]) -> float:
    n = min(len(c) for c in curves)
    if n == 0:
        return 0.0
    a = np.array([c[:n] for c in curves], dtype=float)
    return float(a.var(axis=0).mean())


def train_variant(variant: str, seed: int, config: RunConfig, *, phase1_init: bool | None = None, checkpoint_path=None) -> TrainResult:
    env_cfg = config.env_config().with_reward(variant)
    tcfg = replace(config.train, seed=seed)
    if phase1_init is not None:
        tcfg = replace(tcfg, phase1_init=phase1_init)
    return train(tcfg, env_cfg, checkpoint_path=checkpoint_path)


def run_ablation(variant: str, seeds, config: RunConfig | None = None, *, checkpoint_dir=None) -> AblationResult:
    """Train ``variant`` once per seed under the configured, matched budget."""
    cfg = config or RunConfig()
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise ValueError("the ablation needs at least 3 seeds")
    if len(set(seeds)) != len(seeds):
        raise ValueError("ablation seeds must be distinct")
    runs = []
    w = cfg.ablation.final_window
    for s in seeds:
        ckpt = None if checkpoint_dir is None else Path(checkpoint_dir) / f"ablation_{variant}_seed{s}.ckpt"
        res = train_variant(variant, s, cfg, phase1_init=cfg.ablation.phase1_init, checkpoint_path=ckpt)
        tail = res.curves[-w:]
        runs.append(
            AblationRun(
                variant, s, res.curves,
                float(np.mean([c["success_rate"] for c in tail])),
                float(np.mean([c["mean_episode_len"] for c in tail])),
            )
        )
    return AblationResult(variant, runs)


# -- calibration -------------------------------------------------------------------


@dataclass
class CalibrationOutcome:
    params: ResponseParams
    report: FitReport
    data: CalibrationSet

    def pairs(self) -> list[tuple[float, float, float, float]]:
        """(d, alpha in degrees, measured, predicted) for every valid point."""
        d, alpha, cps = self.data.valid_arrays()
        pred = response(d, alpha, self.params)
        return [(float(a), math.degrees(float(b)), float(c), float(p)) for a, b, c, p in zip(d, alpha, cps, pred)]


def calibrate_cmd(
    path=None, *, synthetic: bool = False, noiseless: bool = False, seed: int = 0, truth: ResponseParams | None = None
) -> CalibrationOutcome:
    """Fit the response model to a calibration file or to a synthetic protocol grid."""
    if (path is None) == (not synthetic):
        raise ValueError("give either a calibration file or synthetic=True")
    if noiseless and not synthetic:
        raise ValueError("noiseless only applies to synthetic data")
    truth = truth or ResponseParams()
    if synthetic:
        protocol = CalibrationProtocol(noise="none" if noiseless else "gaussian")
        data = generate_calibration_grid(truth, protocol, np.random.default_rng(seed))
    else:
        data = read_calibration_file(path)
    params, report = fit_response(data, r=truth.r)
    return CalibrationOutcome(params, report, data)


# -- export ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def json_text(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def _sorted_rows(report: EvalReport) -> list[EvalRow]:
    order = {m: i for i, m in enumerate(METHODS)}
    return sorted(report.rows, key=lambda r: (order.get(r.method, len(order)), r.method, r.sigma))


def export_results(report: EvalReport, directory, stem: str = "results") -> list[Path]:
    """Write ``<stem>.csv`` (one row per method and spread), ``<stem>.json`` and ``<stem>_episodes.csv``."""
    directory = Path(directory)
    rows = [asdict(r) for r in _sorted_rows(report)]
    episodes = sorted(report.episodes, key=lambda e: (METHODS.index(e.method) if e.method in METHODS else 99, e.sigma, e.trial))
    summary = {
        "columns": RESULT_COLUMNS,
        "rows": rows,
        "n_episodes": len(episodes),
    }
    return [
        _write(directory / f"{stem}.csv", csv_text(RESULT_COLUMNS, rows)),
        _write(directory / f"{stem}.json", json_text(summary)),
        _write(directory / f"{stem}_episodes.csv", csv_text(EPISODE_COLUMNS, [asdict(e) for e in episodes])),
    ]


def export_ablation(results: list[AblationResult], directory) -> list[Path]:
    """Per-run learning curves plus a summary of the ordering statistics."""
    directory = Path(directory)
    curve_rows = []
    summary = {}
    for res in results:
        for run in res.runs:
            for c in run.curves:
                curve_rows.append({"variant": res.variant, "seed": run.seed, **c})
        summary[res.variant] = {
            "seeds": res.seeds,
            "final_success": [r.final_success for r in res.runs],
            "final_episode_length": [r.final_episode_length for r in res.runs],
            "mean_final_success": res.mean_final_success,
            "mean_episode_length": res.mean_episode_length,
            "success_variance": res.success_variance,
        }
    return [
        _write(directory / "ablation_curves.csv", csv_text(["variant", "seed"] + CURVE_COLUMNS, curve_rows)),
        _write(directory / "ablation_summary.json", json_text(summary)),
    ]


def export_calibration(outcome: CalibrationOutcome, directory) -> list[Path]:
    directory = Path(directory)
    pairs = [dict(zip(["d_mm", "alpha_deg", "cps_measured", "cps_predicted"], p)) for p in outcome.pairs()]
    return [
        _write(directory / "calibration_report.json", outcome.report.to_text(outcome.params)),
        _write(directory / "calibration_pairs.csv", csv_text(["d_mm", "alpha_deg", "cps_measured", "cps_predicted"], pairs)),
    ]
