"""Training loop with a banded entropy-coefficient controller.

Each global step samples rollout groups under the current policy, optimizes
the clipped surrogate plus the clamped entropy bonus for a few mini-epochs,
measures the clamped entropy of the visited states, and nudges the bonus
coefficient up when that entropy falls below its band and down when it rises
above, projecting into a fixed coefficient box. The named variants (no bonus,
full-entropy bonus, clamped bonus, clamped bonus with the adaptive
coefficient) all run this one loop and differ only in configuration.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .softmax_policy import ClampConfig, GradientTable, SoftmaxPolicy, entropy_report
from .surrogates import ClipConfig, aent_objective, grpo_advantages
from .token_mdp import TokenMdp, sample_batch

VARIANTS = ("none", "entropy", "clamped", "clamped_adaptive")

# Stream tag for the per-step query draw, clear of trajectory indices.
_QUERY_STREAM = 1 << 40


@dataclass
class CoefficientScheduler:
    """Banded controller state for the entropy-bonus coefficient.

    Below the entropy band the coefficient rises by beta times the deficit,
    above it falls by beta times the excess, and the result is projected into
    [lambda_low, lambda_high]. An equal-endpoint box pins the coefficient
    (how the fixed-coefficient variants are expressed). Updates before
    warmup_steps leave the coefficient unchanged.
    """

    lam: float = 2e-3
    beta: float = 2e-3
    h_low: float = 0.15
    h_high: float = 0.24
    lambda_low: float = 6e-4
    lambda_high: float = 9e-3
    warmup_steps: int = 0

    def __post_init__(self) -> None:
        if not self.h_low < self.h_high:
            raise ValueError("entropy band must satisfy h_low < h_high")
        if not self.lambda_low <= self.lambda_high:
            raise ValueError("coefficient box must satisfy lambda_low <= lambda_high")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be nonnegative")


def update_lambda(sched: CoefficientScheduler, h_measured: float, step: int) -> float:
    """One controller update; pure (the caller stores the result).

    lam' = Proj_box[lam - beta * min(h - h_low, 0) + beta * min(h_high - h, 0)]
    so only one correction is active outside the band and none inside it.
    """
    if step < sched.warmup_steps:
        return sched.lam
    raw = (
        sched.lam
        - sched.beta * min(h_measured - sched.h_low, 0.0)
        + sched.beta * min(sched.h_high - h_measured, 0.0)
    )
    return min(max(raw, sched.lambda_low), sched.lambda_high)


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run depends on, seeds included."""

    global_steps: int = 2000
    queries_per_batch: int = 1
    rollouts_per_query: int = 64
    mini_epochs: int = 1
    learn_rate: float = 0.02
    optimizer: str = "sgd"  # or "adaptive_moments"
    normalization: str = "mean_std"
    aggregation: str = "token_mean"
    clip: ClipConfig = field(default_factory=ClipConfig)
    clamp: ClampConfig = field(default_factory=ClampConfig)
    scheduler: CoefficientScheduler = field(default_factory=CoefficientScheduler)
    seed: int = 0
    # Recompute the retained set from the live policy each evaluation
    # (default) or freeze it per state at sampling time.
    freeze_clamped_set: bool = False
    # EMA coefficient on the measured entropy fed to the controller; 0 = raw.
    h_smoothing: float = 0.0

    def __post_init__(self) -> None:
        if self.optimizer not in ("sgd", "adaptive_moments"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.h_smoothing < 1.0:
            raise ValueError("h_smoothing must lie in [0, 1)")
        if self.global_steps < 1 or self.rollouts_per_query < 1:
            raise ValueError("need at least one step and one rollout")
        if self.mini_epochs < 1 or self.queries_per_batch < 1:
            raise ValueError("need at least one mini-epoch and one query")


@dataclass
class StepRecord:
    """Per-step log line: sampled return, entropies of the visited states
    under the post-update policy, the coefficient used this step, and the
    norm of the last applied gradient."""

    step: int
    mean_return: float
    entropy_token_mean: float
    entropy_traj_sum: float
    clamped_entropy: float
    lam: float
    grad_norm: float
    wall_time: float


class TrainingAborted(RuntimeError):
    """Raised when a step produces a non-finite gradient; carries the records
    accumulated so far for diagnosis."""

    def __init__(self, step: int, records: list[StepRecord]):
        super().__init__(f"non-finite gradient at step {step}")
        self.step = step
        self.records = records


class _SgdAscent:
    def __init__(self, learn_rate: float):
        self.learn_rate = learn_rate

    def step(self, policy: SoftmaxPolicy, grad: GradientTable) -> None:
        grad.apply_ascent(policy, self.learn_rate)


class _AdaptiveMomentsAscent:
    """Adam-style ascent on the touched logit rows (beta1=0.9, beta2=0.999)."""

    def __init__(self, learn_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.learn_rate = learn_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, policy: SoftmaxPolicy, grad: GradientTable) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for state, g in grad.items():
            m = self.m.get(state)
            if m is None:
                m = np.zeros_like(g)
                self.m[state] = m
                self.v[state] = np.zeros_like(g)
            v = self.v[state]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            policy.add_to_logits(
                state,
                self.learn_rate * (m / b1c) / (np.sqrt(v / b2c) + self.eps),
            )


def train(
    mdp: TokenMdp, policy: SoftmaxPolicy, cfg: TrainConfig
) -> tuple[SoftmaxPolicy, list[StepRecord]]:
    """Run the full loop and return the trained policy (the input policy is
    copied, not mutated) plus one record per global step.

    Reproducibility: trajectory i of step k draws from a stream seeded by
    (cfg.seed, k, i) and the query draw from (cfg.seed, k, 2**40), so runs
    are bit-identical across processes and parallelism choices.
    """
    policy = policy.copy()
    sched = replace(cfg.scheduler)
    opt = (
        _SgdAscent(cfg.learn_rate)
        if cfg.optimizer == "sgd"
        else _AdaptiveMomentsAscent(cfg.learn_rate)
    )
    records: list[StepRecord] = []
    h_smoothed: Optional[float] = None
    for k in range(cfg.global_steps):
        t0 = time.perf_counter()
        qrng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, k, _QUERY_STREAM))
        )
        picks = qrng.integers(0, len(mdp.queries), cfg.queries_per_batch)
        queries = [mdp.queries[int(i)] for i in picks]
        batch = sample_batch(
            mdp, policy, queries, cfg.rollouts_per_query, (cfg.seed, k)
        )
        advantages = grpo_advantages(batch.grouped_returns(), cfg.normalization)
        frozen = None
        if cfg.freeze_clamped_set:
            frozen = {
                s: policy.clamped_set(s, cfg.clamp)
                for s in set(batch.visited_states())
            }
        ev = None
        for _ in range(cfg.mini_epochs):
            ev = aent_objective(
                policy, batch, advantages, cfg.clip, cfg.clamp,
                sched.lam, cfg.aggregation, frozen,
            )
            if not ev.gradient.is_finite():
                raise TrainingAborted(k, records)
            opt.step(policy, ev.gradient)
        report = entropy_report(policy, batch.visited_states(), cfg.clamp)
        if h_smoothed is None or cfg.h_smoothing == 0.0:
            h_smoothed = report.clamped_entropy
        else:
            h_smoothed = (
                cfg.h_smoothing * h_smoothed
                + (1.0 - cfg.h_smoothing) * report.clamped_entropy
            )
        records.append(
            StepRecord(
                step=k,
                mean_return=float(batch.returns().mean()),
                entropy_token_mean=report.full_entropy,
                entropy_traj_sum=report.full_entropy * mdp.horizon,
                clamped_entropy=report.clamped_entropy,
                lam=sched.lam,
                grad_norm=ev.gradient.norm(),
                wall_time=time.perf_counter() - t0,
            )
        )
        sched.lam = update_lambda(sched, h_smoothed, k)
    return policy, records


def variant_config(variant: str, cfg: TrainConfig) -> TrainConfig:
    """Specialize a base config to one named variant.

    none: coefficient pinned at 0. entropy: full-distribution bonus (p = 0)
    at the base coefficient. clamped: clamped bonus at the base coefficient.
    clamped_adaptive: clamped bonus with the banded controller as configured.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    sched = cfg.scheduler
    if variant == "none":
        pinned = replace(sched, lam=0.0, lambda_low=0.0, lambda_high=0.0)
        return replace(cfg, scheduler=pinned)
    if variant == "entropy":
        pinned = replace(sched, lambda_low=sched.lam, lambda_high=sched.lam)
        return replace(
            cfg, scheduler=pinned, clamp=ClampConfig(p=0.0, mode=cfg.clamp.mode)
        )
    if variant == "clamped":
        pinned = replace(sched, lambda_low=sched.lam, lambda_high=sched.lam)
        return replace(cfg, scheduler=pinned)
    return cfg


def run_variant(
    mdp: TokenMdp, policy: SoftmaxPolicy, variant: str, cfg: TrainConfig
) -> list[StepRecord]:
    """Train one variant and return its records."""
    _, records = train(mdp, policy, variant_config(variant, cfg))
    return records
