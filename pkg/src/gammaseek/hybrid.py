"""Two-phase localization: adaptive scanning hands over to the learned policy.

Phase I runs the scanner on the real arm until its handoff rule is met; its
readings seed the source estimate. Phase II runs the policy deterministically
from the final scan heading until success or the shared step cap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import EnvConfig, RadioguidedEnv
from .policy import PolicyNet, act, load_checkpoint
from .scanner import Phase1Result, ScanConfig, run_phase1


@dataclass(frozen=True)
class HybridConfig:
    scan: ScanConfig = field(default_factory=ScanConfig)
    checkpoint: str | Path | None = None
    total_cap: int = 150  # Phase I + Phase II steps

    def __post_init__(self):
        worst = self.scan.max_rounds * self.scan.steps_per_round
        if self.total_cap < worst:
            raise ValueError(f"total_cap {self.total_cap} is below the worst-case scan length {worst}")

    def load_policy(self) -> PolicyNet:
        if self.checkpoint is None:
            raise FileNotFoundError("no policy checkpoint configured")
        path = Path(self.checkpoint)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return load_checkpoint(path)

    def env_config(self, base: EnvConfig | None = None) -> EnvConfig:
        """``base`` with the horizon set to the shared cap and this scan config."""
        base = base or EnvConfig()
        return EnvConfig(**{**base.__dict__, "horizon": self.total_cap, "scan": self.scan})


@dataclass
class EpisodeRecord:
    seed: object
    phase1_steps: int
    phase2_steps: int
    success: bool
    final_distance: float
    first_success_step: int | None
    phase1_resolved: bool
    handoff_confidence: float
    degraded: bool  # Phase I ended unresolved and Phase II started from a zero-confidence estimate
    rounds_used: int

    @property
    def phase_boundary(self) -> int:
        return self.phase1_steps

    @property
    def total_steps(self) -> int:
        return self.phase1_steps + self.phase2_steps

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["seed"] = self.seed if isinstance(self.seed, (int, str)) else json.dumps(self.seed)
        d["total_steps"] = self.total_steps
        return d


def run_episode(env: RadioguidedEnv, config: HybridConfig, policy: PolicyNet | None = None) -> EpisodeRecord:
    """One hybrid episode on a freshly reset ``env``.

    ``env`` must start at step 0 with a horizon no larger than the total cap.
    Scanning is unconditional, so a source already inside the success radius
    still costs the mandatory rounds.
    """
    if env.step_count != 0:
        raise ValueError("run_episode expects a freshly reset env")
    if env.config.horizon > config.total_cap:
        raise ValueError(f"env horizon {env.config.horizon} exceeds the total cap {config.total_cap}")
    policy = policy if policy is not None else config.load_policy()
    if policy.obs_dim != env.config.obs_width:
        raise ValueError(f"policy expects observations of width {policy.obs_dim}, env gives {env.config.obs_width}")

    p1: Phase1Result = run_phase1(env, config.scan)
    boundary = env.step_count
    env.begin_phase2(p1.history)
    degraded = not p1.resolved
    if degraded:
        # the scan never settled; hand over without trusting the fit
        env.degrade_estimate()
    confidence = env.estimate_confidence

    if not env.success:
        while not env.done:
            env.step(act(policy, env.observation(), deterministic=True))
            if env.success:
                break
    return EpisodeRecord(
        seed=env.seed,
        phase1_steps=boundary,
        phase2_steps=env.step_count - boundary,
        success=env.success,
        final_distance=env.distance,
        first_success_step=env.first_success_step,
        phase1_resolved=p1.resolved,
        handoff_confidence=confidence,
        degraded=degraded,
        rounds_used=p1.rounds_used,
    )


def run_drl_episode(env: RadioguidedEnv, policy: PolicyNet) -> EpisodeRecord:
    """Policy-only baseline from the home pose: no scanning, the estimate starts from the heading guess."""
    if env.step_count != 0:
        raise ValueError("run_drl_episode expects a freshly reset env")
    while not env.done:
        env.step(act(policy, env.observation(), deterministic=True))
    return EpisodeRecord(
        seed=env.seed,
        phase1_steps=0,
        phase2_steps=env.step_count,
        success=env.success,
        final_distance=env.distance,
        first_success_step=env.first_success_step,
        phase1_resolved=False,
        handoff_confidence=env.estimate_confidence,
        degraded=False,
        rounds_used=0,
    )
