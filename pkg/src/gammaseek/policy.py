"""Clipped-surrogate actor-critic training over :class:`~gammaseek.env.VecRadioEnv`.

The policy is a tanh MLP trunk shared by a squashed-Gaussian actor and a
value head. Actions are sampled as ``u ~ N(mu, sigma)`` and executed as
``cap * tanh(u)``; the buffer stores the pre-squash ``u`` so log-probabilities
never need ``atanh``. The squashing Jacobian does not depend on network
parameters, so it cancels in the probability ratio and is omitted.
"""

from __future__ import annotations

import copy
import io
import json
import math
import struct
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .env import EnvConfig, StepBatch, VecRadioEnv
from .kinematics import DEFAULT_INCREMENT_CAP, N_JOINTS

CHECKPOINT_MAGIC = b"GSPOLICY"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, message: str, stats: dict | None = None):
        self.stats = stats or {}
        super().__init__(message)


class RunningMeanStd(nn.Module):
    """Running observation statistics kept as module buffers (saved with the net)."""

    def __init__(self, dim: int, clip: float = 10.0):
        super().__init__()
        self.clip = clip
        self.register_buffer("mean", torch.zeros(dim, dtype=torch.float64))
        self.register_buffer("var", torch.ones(dim, dtype=torch.float64))
        self.register_buffer("count", torch.tensor(1e-4, dtype=torch.float64))

    @torch.no_grad()
    def update(self, x: torch.Tensor) -> None:
        x = x.to(torch.float64).reshape(-1, self.mean.shape[0])
        bm, bv, bc = x.mean(0), x.var(0, unbiased=False), x.shape[0]
        delta = bm - self.mean
        tot = self.count + bc
        self.mean += delta * bc / tot
        m2 = self.var * self.count + bv * bc + delta * delta * self.count * bc / tot
        self.var.copy_(m2 / tot)
        self.count.copy_(tot)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = (x.to(torch.float64) - self.mean) / torch.sqrt(self.var + 1e-8)
        return z.clamp(-self.clip, self.clip).to(x.dtype)


class PolicyNet(nn.Module):
    def __init__(
        self,
        obs_dim: int,
        act_dim: int = N_JOINTS,
        hidden: tuple[int, ...] = (128, 128),
        *,
        action_cap: float = DEFAULT_INCREMENT_CAP,
        init_log_std: float = -0.5,
        normalize_obs: bool = True,
    ):
        super().__init__()
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.hidden = tuple(hidden)
        self.action_cap = float(action_cap)
        self.normalize_obs = normalize_obs
        self.obs_rms = RunningMeanStd(obs_dim)
        layers: list[nn.Module] = []
        width = obs_dim
        for h in self.hidden:
            layers += [nn.Linear(width, h), nn.Tanh()]
            width = h
        self.trunk = nn.Sequential(*layers)
        self.mu = nn.Linear(width, act_dim)
        self.value = nn.Linear(width, 1)
        self.log_std = nn.Parameter(torch.full((act_dim,), float(init_log_std)))
        for m in self.trunk:
            if isinstance(m, nn.Linear):
                nn.init.orthogonal_(m.weight, math.sqrt(2))
                nn.init.zeros_(m.bias)
        nn.init.orthogonal_(self.mu.weight, 0.01)
        nn.init.zeros_(self.mu.bias)
        nn.init.orthogonal_(self.value.weight, 1.0)
        nn.init.zeros_(self.value.bias)

    def _features(self, obs: torch.Tensor) -> torch.Tensor:
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation width {obs.shape[-1]} does not match the policy's {self.obs_dim}")
        if self.normalize_obs:
            obs = self.obs_rms(obs)
        return self.trunk(obs)

    def forward(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Pre-squash mean, log-std (broadcast) and value."""
        h = self._features(obs)
        mu = self.mu(h)
        return mu, self.log_std.expand_as(mu), self.value(h).squeeze(-1)

    def squash(self, u: torch.Tensor) -> torch.Tensor:
        return self.action_cap * torch.tanh(u)

    def config_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "hidden": list(self.hidden),
            "action_cap": self.action_cap,
            "normalize_obs": self.normalize_obs,
        }


def gaussian_logp(u: torch.Tensor, mu: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    z = (u - mu) * torch.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)


def gaussian_entropy(log_std: torch.Tensor) -> torch.Tensor:
    return (log_std + 0.5 * math.log(2 * math.pi * math.e)).sum(-1)


@torch.no_grad()
def act(policy: PolicyNet, obs, deterministic: bool = True, generator: torch.Generator | None = None) -> np.ndarray:
    """Joint increments for one observation ``(D,)`` or a batch ``(N, D)``."""
    x = torch.as_tensor(np.asarray(obs), dtype=next(policy.parameters()).dtype)
    single = x.ndim == 1
    if single:
        x = x[None]
    mu, log_std, _ = policy(x)
    u = mu if deterministic else mu + torch.exp(log_std) * torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    a = policy.squash(u).numpy().astype(float)
    return a[0] if single else a


# -- rollouts ----------------------------------------------------------------


@dataclass
class RolloutBuffer:
    obs: torch.Tensor  # (T, N, D)
    u: torch.Tensor  # (T, N, A) pre-squash actions
    logp: torch.Tensor  # (T, N)
    reward: torch.Tensor  # (T, N) as used for learning (possibly scaled)
    raw_reward: np.ndarray  # (T, N) env totals
    value: torch.Tensor  # (T, N) at collection time
    done: torch.Tensor  # (T, N) episode ended after this step
    last_obs: torch.Tensor  # (N, D)
    episodes: list[tuple[int, bool, float]] = field(default_factory=list)  # (length, success, return)

    @property
    def n_transitions(self) -> int:
        return int(self.obs.shape[0] * self.obs.shape[1])


def compute_gae(reward, value, done, last_value, gamma: float, lam: float):
    """Generalised advantage estimates and value targets, ``(T, N)`` each.

    ``done[t]`` cuts the bootstrap from step ``t`` into ``t + 1``.
    """
    T = reward.shape[0]
    adv = torch.zeros_like(reward)
    last = torch.zeros_like(last_value)
    for t in reversed(range(T)):
        nxt = last_value if t == T - 1 else value[t + 1]
        nonterminal = 1.0 - done[t]
        delta = reward[t] + gamma * nxt * nonterminal - value[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + value


class RewardScaler:
    """Divides rewards by the running std of the discounted return."""

    def __init__(self, n: int, gamma: float):
        self.gamma = gamma
        self.ret = np.zeros(n)
        self.rms = RunningMeanStd(1)

    def __call__(self, reward: np.ndarray, done: np.ndarray) -> np.ndarray:
        self.ret = self.ret * self.gamma + reward
        self.rms.update(torch.as_tensor(self.ret[:, None]))
        self.ret[done] = 0.0
        return reward / math.sqrt(float(self.rms.var[0]) + 1e-8)


class Collector:
    """Keeps the env batch, last observation and episode accumulators between rollouts."""

    def __init__(self, venv: VecRadioEnv, *, seed: int = 0, reward_scaler: RewardScaler | None = None):
        self.venv = venv
        self.obs = venv.reset()
        self.generator = torch.Generator().manual_seed(int(seed))
        self.scaler = reward_scaler
        self.ep_return = np.zeros(venv.n)
        self.env_steps = 0


def collect_rollouts(policy: PolicyNet, collector: Collector, T: int, *, update_obs_stats: bool = True) -> RolloutBuffer:
    """Run ``T`` stochastic steps in every env of the collector."""
    if T < 1:
        raise ValueError("T must be at least 1")
    venv = collector.venv
    N, D = venv.n, policy.obs_dim
    dtype = next(policy.parameters()).dtype
    obs_buf = torch.zeros((T, N, D), dtype=dtype)
    u_buf = torch.zeros((T, N, policy.act_dim), dtype=dtype)
    logp_buf = torch.zeros((T, N), dtype=dtype)
    val_buf = torch.zeros((T, N), dtype=dtype)
    rew_buf = torch.zeros((T, N), dtype=dtype)
    raw = np.zeros((T, N))
    done_buf = torch.zeros((T, N), dtype=dtype)
    episodes = []
    for t in range(T):
        x = torch.as_tensor(collector.obs, dtype=dtype)
        if update_obs_stats and policy.normalize_obs:
            policy.obs_rms.update(x)
        with torch.no_grad():
            mu, log_std, v = policy(x)
            u = mu + torch.exp(log_std) * torch.randn(mu.shape, generator=collector.generator, dtype=dtype)
            lp = gaussian_logp(u, mu, log_std)
        a = policy.squash(u).numpy().astype(float)
        try:
            res: StepBatch = venv.step(a)
        except Exception as e:
            raise TrainingError(f"env step failed at rollout step {t} of {T}: {e}", {"completed_steps": t}) from e
        collector.env_steps += N
        r = res.total
        collector.ep_return += r
        for i in np.nonzero(res.done)[0]:
            episodes.append((int(res.episode_length[i]), bool(res.episode_success[i]), float(collector.ep_return[i])))
            collector.ep_return[i] = 0.0
        scaled = collector.scaler(r, res.done) if collector.scaler is not None else r
        obs_buf[t], u_buf[t], logp_buf[t], val_buf[t] = x, u, lp, v
        rew_buf[t] = torch.as_tensor(scaled, dtype=dtype)
        raw[t] = r
        done_buf[t] = torch.as_tensor(res.done, dtype=dtype)
        collector.obs = res.obs
    last = torch.as_tensor(collector.obs, dtype=dtype)
    return RolloutBuffer(obs_buf, u_buf, logp_buf, rew_buf, raw, val_buf, done_buf, last, episodes)


# -- update --------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch_size: int = 2048
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    target_kl: float = 0.05
    total_steps: int = 2_000_000
    n_envs: int = 64
    rollout_steps: int = 256
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128)
    init_log_std: float = -0.5
    normalize_obs: bool = True
    normalize_reward: bool = True
    success_window: int = 100  # episodes in the rolling success rate
    phase1_init: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.lr <= 0 or self.epochs < 1 or self.minibatch_size < 1:
            raise ValueError("lr, epochs and minibatch_size must be positive")
        if self.n_envs < 1 or self.rollout_steps < 1 or self.total_steps < 1:
            raise ValueError("n_envs, rollout_steps and total_steps must be positive")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ValueError("loss coefficients must be non-negative")


def ppo_loss(policy: PolicyNet, obs, u, old_logp, adv, ret, *, clip: float, value_coef: float, entropy_coef: float):
    """Clipped surrogate + value regression - entropy bonus; returns (loss, parts dict)."""
    mu, log_std, v = policy(obs)
    logp = gaussian_logp(u, mu, log_std)
    ratio = torch.exp(logp - old_logp)
    surr = torch.min(ratio * adv, torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * adv)
    policy_loss = -surr.mean()
    value_loss = 0.5 * ((v - ret) ** 2).mean()
    entropy = gaussian_entropy(log_std).mean()
    loss = policy_loss + value_coef * value_loss - entropy_coef * entropy
    with torch.no_grad():
        log_ratio = logp - old_logp
        kl = ((torch.exp(log_ratio) - 1) - log_ratio).mean()
    return loss, {"policy_loss": policy_loss, "value_loss": value_loss, "entropy": entropy, "kl": kl}


def update(policy: PolicyNet, optimizer: torch.optim.Optimizer, buffer: RolloutBuffer, config: TrainConfig, generator: torch.Generator | None = None) -> dict:
    """Epochs of minibatch steps; advantages are recomputed from the current critic each epoch."""
    if buffer.n_transitions == 0:
        raise ValueError("empty rollout buffer")
    T, N = buffer.reward.shape
    flat = lambda x: x.reshape(T * N, *x.shape[2:])
    obs, u, old_logp = flat(buffer.obs), flat(buffer.u), flat(buffer.logp)
    stats = {"policy_loss": float("nan"), "value_loss": float("nan"), "kl": 0.0, "entropy": float("nan"), "epochs": 0}
    for epoch in range(config.epochs):
        with torch.no_grad():
            _, _, values = policy(buffer.obs)
            _, _, last_v = policy(buffer.last_obs)
            adv, ret = compute_gae(buffer.reward, values, buffer.done, last_v, config.gamma, config.gae_lambda)
        adv, ret = flat(adv), flat(ret)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8) if adv.numel() > 1 else adv
        perm = torch.randperm(T * N, generator=generator)
        kls = []
        for start in range(0, T * N, config.minibatch_size):
            mb = perm[start : start + config.minibatch_size]
            loss, parts = ppo_loss(
                policy, obs[mb], u[mb], old_logp[mb], adv[mb], ret[mb],
                clip=config.clip, value_coef=config.value_coef, entropy_coef=config.entropy_coef,
            )
            if not torch.isfinite(loss):
                raise TrainingError("non-finite loss during update", stats)
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(policy.parameters(), config.max_grad_norm)
            optimizer.step()
            stats.update({k: float(v.detach()) for k, v in parts.items()})
            kls.append(float(parts["kl"]))
        stats["kl"] = float(np.mean(kls))
        stats["epochs"] = epoch + 1
        if config.target_kl and stats["kl"] > config.target_kl:
            break
    return stats


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    policy: PolicyNet  # best-by-rolling-success snapshot
    final_policy: PolicyNet
    curves: list[dict]
    best_success: float
    env_config: EnvConfig
    train_config: TrainConfig


CURVE_COLUMNS = ["env_steps", "success_rate", "mean_episode_len", "policy_loss", "value_loss", "kl", "entropy"]


def train(config: TrainConfig, env_config: EnvConfig | None = None, *, checkpoint_path=None, log=None) -> TrainResult:
    """Alternate collection and updates; keep the best rolling-success snapshot."""
    env_config = env_config or EnvConfig()
    torch.manual_seed(config.seed)
    seeds = [np.random.SeedSequence([config.seed, i]).generate_state(2).tolist() for i in range(config.n_envs)]
    venv = VecRadioEnv(env_config, seeds, phase1_init=config.phase1_init, auto_reset=True)
    policy = PolicyNet(
        env_config.obs_width,
        hidden=config.hidden,
        action_cap=env_config.arm.increment_cap,
        init_log_std=config.init_log_std,
        normalize_obs=config.normalize_obs,
    )
    optimizer = torch.optim.Adam(policy.parameters(), lr=config.lr, eps=1e-5)
    scaler = RewardScaler(config.n_envs, config.gamma) if config.normalize_reward else None
    collector = Collector(venv, seed=config.seed, reward_scaler=scaler)
    gen = torch.Generator().manual_seed(config.seed + 1)
    window: deque = deque(maxlen=config.success_window)
    curves: list[dict] = []
    best, best_state = -1.0, copy.deepcopy(policy.state_dict())
    n_updates = max(1, config.total_steps // (config.n_envs * config.rollout_steps))
    for it in range(n_updates):
        frac = 1.0 - it / n_updates
        for g in optimizer.param_groups:
            g["lr"] = config.lr * frac
        buf = collect_rollouts(policy, collector, config.rollout_steps)
        window.extend(buf.episodes)
        stats = update(policy, optimizer, buf, config, gen)
        rate = float(np.mean([s for _, s, _ in window])) if window else 0.0
        length = float(np.mean([n for n, _, _ in window])) if window else float(env_config.horizon)
        row = {"env_steps": collector.env_steps, "success_rate": rate, "mean_episode_len": length}
        row.update({k: stats[k] for k in ("policy_loss", "value_loss", "kl", "entropy")})
        curves.append(row)
        if log is not None:
            log(row)
        if len(window) == window.maxlen and rate > best:
            best, best_state = rate, copy.deepcopy(policy.state_dict())
    final = copy.deepcopy(policy)
    if best < 0.0:  # window never filled; keep the last policy
        best_state, best = policy.state_dict(), rate
    policy.load_state_dict(best_state)
    if checkpoint_path is not None:
        save_checkpoint(policy, checkpoint_path)
    return TrainResult(policy, final, curves, max(best, 0.0), env_config, config)


def write_curves_csv(path, curves: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(CURVE_COLUMNS) + "\n")
        for row in curves:
            fh.write(",".join(repr(float(row[c])) if c != "env_steps" else str(int(row[c])) for c in CURVE_COLUMNS) + "\n")


# -- checkpoints ------------------------------------------------------------------
# Layout: magic (8 bytes) | version (uint32 LE) | header length (uint32 LE) |
# UTF-8 JSON header {config, dtype, tensors: [[name, shape], ...]} |
# all tensors flattened in header order, little-endian, in the header's dtype.


def checkpoint_bytes(policy: PolicyNet) -> bytes:
    state = policy.state_dict()
    tensors = [(k, list(v.shape), str(v.dtype).replace("torch.", "")) for k, v in state.items()]
    header = json.dumps({"config": policy.config_dict(), "tensors": tensors}, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    out.write(header)
    for k, _, dt in tensors:
        arr = state[k].detach().cpu().numpy()
        out.write(arr.astype(np.dtype(dt).newbyteorder("<"), copy=False).tobytes(order="C"))
    return out.getvalue()


def save_checkpoint(policy: PolicyNet, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(policy))


def load_checkpoint(path) -> PolicyNet:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a policy checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen])
    cfg = header["config"]
    policy = PolicyNet(cfg["obs_dim"], cfg["act_dim"], tuple(cfg["hidden"]), action_cap=cfg["action_cap"], normalize_obs=cfg["normalize_obs"])
    offset = 16 + hlen
    state = {}
    for name, shape, dt in header["tensors"]:
        dtype = np.dtype(dt).newbyteorder("<")
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=offset).reshape(shape)
        offset += n * dtype.itemsize
        state[name] = torch.from_numpy(arr.astype(np.dtype(dt)))
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameters")
    policy.load_state_dict(state)
    return policy
