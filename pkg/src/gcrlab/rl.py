"""Policy trainers: Reinforce, PPO and PPO-Exploration.

Per-step reward is the critic's conversion probability of the item placed at
that step (or the oracle's expected label in ``reward_mode="oracle"``).
Returns and advantages follow the backward recursion

    R_t = r_t + gamma * R_{t+1},    A_t = R_t + c * ||D_t||_2

so the diversity bonus enters the advantage of its own step only.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .critic import CriticConfig, calibrate, fsc_forward
from .data import CandidateBatch
from .env import Oracle
from .policy import PolicyConfig, Prepared, rollout_batch, step_log_probs
from .tensor import NumericError, ParamStore

ALGORITHMS = ("reinforce", "reinforce-real", "ppo", "ppo-exploration")


@dataclass
class TrainConfig:
    gamma: float = 1.0
    c: float = 1.0
    clip_eps: float = 0.2
    m: int = 64
    epochs_per_batch: int = 4
    reward_mode: str = "model"
    lr: float = 1e-3
    n_batches: int = 150
    baseline: bool = False
    reward_scale: str = "none"
    eval_contexts: int = 128
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")
        if self.c < 0:
            raise ValueError("bonus factor c must be >= 0")
        if not 0 < self.clip_eps < 1 and not math.isinf(self.clip_eps):
            raise ValueError("clip_eps must be in (0, 1)")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.reward_mode not in ("model", "oracle"):
            raise ValueError("reward_mode is 'model' or 'oracle'")
        if self.reward_scale not in ("none", "std"):
            raise ValueError("reward_scale is 'none' or 'std'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrajectoryStep:
    context: int          # row of the candidate batch
    prefix: tuple[int, ...]
    action: int
    reward: float
    d_norm: float
    ret: float
    adv: float
    behavior_prob: float


@dataclass
class Buffer:
    """m episodes of k steps each, stored as [m, k] arrays."""

    cands: CandidateBatch
    slates: np.ndarray
    rewards: np.ndarray
    d_norms: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray
    behavior_probs: np.ndarray

    def __len__(self) -> int:
        return self.slates.size

    def steps(self) -> list[TrajectoryStep]:
        m, k = self.slates.shape
        return [TrajectoryStep(i, tuple(int(a) for a in self.slates[i, :t]), int(self.slates[i, t]),
                               float(self.rewards[i, t]), float(self.d_norms[i, t]),
                               float(self.returns[i, t]), float(self.advantages[i, t]),
                               float(self.behavior_probs[i, t]))
                for i in range(m) for t in range(k)]


def returns_and_advantages(rewards: np.ndarray, d_norms: np.ndarray, gamma: float,
                           c: float) -> tuple[np.ndarray, np.ndarray]:
    """Backward recursion over the last axis (the k steps of an episode)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    R = np.zeros_like(rewards)
    nxt = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        nxt = rewards[..., t] + gamma * nxt
        R[..., t] = nxt
    return R, R + c * np.asarray(d_norms, dtype=np.float64)


@torch.no_grad()
def critic_rewards(critic: ParamStore, critic_cfg: CriticConfig, cands: CandidateBatch,
                   slates: np.ndarray) -> np.ndarray:
    """Calibrated critic item probabilities of each generated slate, [B, k]."""
    p = fsc_forward(critic, critic_cfg, cands.context, cands.items.gather(slates)).item_probs.numpy()
    return calibrate(p, critic.meta.get("calibration_shift", 0.0))


@torch.no_grad()
def critic_slate_scores(critic: ParamStore, critic_cfg: CriticConfig, cands: CandidateBatch,
                        slates: np.ndarray, batch: int = 1024) -> np.ndarray:
    out = []
    for s in range(0, len(slates), batch):
        idx = np.arange(s, min(len(slates), s + batch))
        sub = cands.take(idx)
        p = critic_rewards(critic, critic_cfg, sub, slates[idx])
        out.append(-np.expm1(np.log1p(-p).sum(1)))
    return np.concatenate(out) if out else np.zeros(0)


def oracle_rewards(oracle: Oracle, cands: CandidateBatch, slates: np.ndarray,
                   propensity: np.ndarray) -> np.ndarray:
    """Expected atc-or-pay indicator of each placed item under the oracle."""
    rows = np.arange(len(slates))[:, None]
    items = cands.items.gather(slates)
    p = propensity[rows, slates] * oracle.slate_modifiers(items.ids[..., 2], items.ids[..., 1], items.price)
    return oracle.expected_binary(np.clip(p, 1e-6, 1 - 1e-6))


def collect_batch(policy: ParamStore, policy_cfg: PolicyConfig, cands: CandidateBatch, k: int,
                  config: TrainConfig, rng: np.random.Generator,
                  reward_fn: Callable[[CandidateBatch, np.ndarray], np.ndarray]) -> Buffer:
    """Roll out one sampled slate per context and attach returns/advantages."""
    ro = rollout_batch(policy, policy_cfg, cands, k, "sample", rng)
    r = np.asarray(reward_fn(cands, ro.slates), dtype=np.float64)
    if config.reward_scale == "std" and r.size > 1:
        # puts immediate rewards in unit scale so c is measured against them
        sd = float(r.std())
        if sd > 0:
            r = r / sd
    R, A = returns_and_advantages(r, ro.d_norms, config.gamma, config.c)
    if config.baseline:
        A = A - A.mean(axis=0, keepdims=True)  # per-step batch mean
    return Buffer(cands, ro.slates, r, ro.d_norms, R, A, ro.probs)


def _check_params(params: ParamStore) -> None:
    if not params.all_finite():
        raise NumericError("policy parameters became non-finite")


def _check_grads(params: ParamStore) -> None:
    for name, t in params.entries.items():
        if t.grad is not None and not torch.isfinite(t.grad).all():
            raise NumericError(f"non-finite gradient for {name}")


def reinforce_loss(buffer: Buffer, params: ParamStore, config: PolicyConfig, weights: np.ndarray,
                   prep: Prepared | None = None) -> torch.Tensor:
    logp = step_log_probs(params, config, buffer.cands, buffer.slates, prep)
    return -(torch.as_tensor(weights, dtype=logp.dtype) * logp).mean()


def reinforce_update(buffer: Buffer, params: ParamStore, config: PolicyConfig,
                     optimizer: torch.optim.Optimizer, use_advantage: bool = False,
                     baseline: bool = False) -> float:
    """One ascent step on mean_t R_t log pi(a_t|s_t) (or A_t with ``use_advantage``).

    ``baseline`` subtracts the per-step batch mean of R_t first.
    """
    if len(buffer) == 0:
        raise ValueError("empty buffer")
    w = buffer.advantages if use_advantage else buffer.returns
    if baseline and not use_advantage:
        w = w - w.mean(axis=0, keepdims=True)
    loss = reinforce_loss(buffer, params, config, w)
    optimizer.zero_grad()
    loss.backward()
    _check_grads(params)
    optimizer.step()
    params.bump()
    _check_params(params)
    return -loss.item()


def clipped_surrogate(logp_new: torch.Tensor, behavior_probs: np.ndarray, advantages: np.ndarray,
                      eps: float) -> torch.Tensor:
    """mean of min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)."""
    ratio = torch.exp(logp_new - torch.log(torch.as_tensor(behavior_probs, dtype=logp_new.dtype)))
    if not torch.isfinite(ratio).all():
        raise NumericError("probability ratio is not finite")
    A = torch.as_tensor(advantages, dtype=logp_new.dtype)
    unclipped = ratio * A
    if math.isinf(eps):
        return unclipped.mean()
    clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * A
    return torch.minimum(unclipped, clipped).mean()


def ppo_update(buffer: Buffer, params: ParamStore, config: PolicyConfig, train: TrainConfig,
               optimizer: torch.optim.Optimizer) -> float:
    """``epochs_per_batch`` full-buffer ascent steps on the clipped surrogate.

    The buffer's behaviour probabilities play the role of the old policy;
    the ratio is recomputed against ``params`` on every pass.
    """
    if len(buffer) == 0:
        raise ValueError("empty buffer")
    value = float("nan")
    for _ in range(train.epochs_per_batch):
        logp = step_log_probs(params, config, buffer.cands, buffer.slates)
        surr = clipped_surrogate(logp, buffer.behavior_probs, buffer.advantages, train.clip_eps)
        optimizer.zero_grad()
        (-surr).backward()
        _check_grads(params)
        optimizer.step()
        params.bump()
        _check_params(params)
        value = surr.item()
    return value


def logged_buffer(policy: ParamStore, policy_cfg: PolicyConfig, cands: CandidateBatch,
                  slates: np.ndarray, labels: np.ndarray, config: TrainConfig) -> Buffer:
    """Buffer built from logged slates, rewarded with their logged atc/pay labels."""
    r = (np.asarray(labels) >= 2).astype(np.float64)
    zeros = np.zeros_like(r)
    R, A = returns_and_advantages(r, zeros, config.gamma, 0.0)
    with torch.no_grad():
        probs = torch.exp(step_log_probs(policy, policy_cfg, cands, slates)).numpy()
    return Buffer(cands, np.asarray(slates), r, zeros, R, A, probs)


# training loop --------------------------------------------------------------

def slate_entropy_rows(values: np.ndarray) -> np.ndarray:
    out = np.zeros(len(values))
    for i, row in enumerate(values):
        _, cnt = np.unique(row, return_counts=True)
        p = cnt / cnt.sum()
        out[i] = float(-(p * np.log(p)).sum())
    return out


@dataclass
class CurveRow:
    batch: int
    mean_slate_score: float
    mean_entropy: float
    mean_bonus: float


@dataclass
class TrainResult:
    params: ParamStore
    curve: list[CurveRow] = field(default_factory=list)


def train_policy(algorithm: str, cands: CandidateBatch, critic: ParamStore, critic_cfg: CriticConfig,
                 policy_cfg: PolicyConfig, config: TrainConfig, k: int, init: ParamStore,
                 eval_cands: CandidateBatch | None = None, oracle: Oracle | None = None,
                 propensity: np.ndarray | None = None, logged: tuple | None = None,
                 log: Callable[[str], None] | None = None) -> TrainResult:
    """Train a policy for ``config.n_batches`` batches of ``config.m`` contexts.

    ``reinforce-real`` learns from ``logged = (cands, slates, labels)`` only.
    ``ppo`` is ``ppo-exploration`` with the bonus switched off.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if algorithm == "ppo":
        config = TrainConfig(**{**config.to_dict(), "c": 0.0})
    params = init
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(params.tensors(), lr=config.lr)
    result = TrainResult(params)
    if config.reward_mode == "oracle" and algorithm != "reinforce-real":
        if oracle is None or propensity is None:
            raise ValueError("oracle rewards need the oracle and candidate propensities")

    def reward_for(idx):
        if config.reward_mode == "oracle":
            return lambda cb, slates: oracle_rewards(oracle, cb, slates, propensity[idx])
        return lambda cb, slates: critic_rewards(critic, critic_cfg, cb, slates)

    source = logged[0] if algorithm == "reinforce-real" else cands
    N = len(source)
    order = rng.permutation(N)
    cursor = 0
    for b in range(config.n_batches):
        if cursor + config.m > N:
            order, cursor = rng.permutation(N), 0
        idx = order[cursor:cursor + config.m]
        cursor += config.m
        if algorithm == "reinforce-real":
            _, slates, labels = logged
            buf = logged_buffer(params, policy_cfg, source.take(idx), slates[idx], labels[idx], config)
            # logged actions were not drawn from the policy, so a batch-mean baseline
            # would only push mass away from whatever the logger showed most
            reinforce_update(buf, params, policy_cfg, optimizer)
        else:
            buf = collect_batch(params, policy_cfg, cands.take(idx), k, config, rng, reward_for(idx))
            if algorithm == "reinforce":
                reinforce_update(buf, params, policy_cfg, optimizer, baseline=config.baseline)
            else:
                ppo_update(buf, params, policy_cfg, config, optimizer)
        if eval_cands is not None:
            result.curve.append(evaluate_greedy(params, policy_cfg, critic, critic_cfg, eval_cands, k, b, buf))
            if log and (b + 1) % 25 == 0:
                row = result.curve[-1]
                log(f"{algorithm} batch {b + 1}: slate score {row.mean_slate_score:.4f} "
                    f"entropy {row.mean_entropy:.3f} bonus {row.mean_bonus:.3f}")
    return result


def evaluate_greedy(params: ParamStore, policy_cfg: PolicyConfig, critic: ParamStore,
                    critic_cfg: CriticConfig, cands: CandidateBatch, k: int, b: int, buf: Buffer) -> CurveRow:
    ro = rollout_batch(params, policy_cfg, cands, k, "greedy")
    score = critic_slate_scores(critic, critic_cfg, cands, ro.slates)
    brands = cands.items.gather(ro.slates).ids[..., 2]
    return CurveRow(b, float(score.mean()), float(slate_entropy_rows(brands).mean()),
                    float(buf.d_norms.mean()))
