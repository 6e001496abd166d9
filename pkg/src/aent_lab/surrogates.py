"""Batch surrogate objectives over sampled trajectories.

Group-relative advantages, the clipped importance-ratio policy objective, the
clamped entropy bonus measured on visited states, and their weighted
combination, each returning both a value and an exact logit gradient table.
Plain score-function estimators (return-weighted and entropy) are included to
cross-check the exact oracles on sampled data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .softmax_policy import (
    ClampConfig,
    GradientTable,
    SoftmaxPolicy,
    TokenState,
    log_softmax,
)
from .token_mdp import TrajectoryBatch

# Variance floor added to the group standard deviation before dividing.
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class ClipConfig:
    """Importance-ratio clipping band [1 - eps_low, 1 + eps_high]."""

    eps_low: float = 0.2
    eps_high: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 <= self.eps_low < 1.0:
            raise ValueError("eps_low must lie in [0, 1)")
        if self.eps_high < 0.0:
            raise ValueError("eps_high must be nonnegative")


@dataclass
class AdvantageBatch:
    """Per-trajectory scalar advantages, broadcast to every step of the
    trajectory; aligned with the batch's trajectory order."""

    values: np.ndarray
    group_size: int
    normalization: str


@dataclass
class SurrogateEval:
    """Value and exact logit gradient of a batch surrogate; the entropy bonus
    parts are recorded separately (unscaled by the coefficient)."""

    value: float
    gradient: GradientTable
    entropy_bonus_value: float = 0.0
    entropy_bonus_gradient: Optional[GradientTable] = None
    excluded_steps: int = 0


def grpo_advantages(
    grouped_returns: Sequence[np.ndarray], normalization: str = "mean_std"
) -> AdvantageBatch:
    """Group-relative advantages: each trajectory's return minus its group
    mean, optionally divided by the group standard deviation (population,
    floored). Groups of identical returns give exactly zero advantages."""
    if normalization not in ("mean_only", "mean_std"):
        raise ValueError(f"unknown normalization {normalization!r}")
    sizes = {len(g) for g in grouped_returns}
    if not grouped_returns or len(sizes) != 1:
        raise ValueError("need equally sized, nonempty groups")
    group_size = sizes.pop()
    if group_size < 1:
        raise ValueError("empty group")
    if normalization == "mean_std" and group_size < 2:
        raise ValueError("degenerate group: mean_std needs at least 2 rollouts")
    out = []
    for g in grouped_returns:
        g = np.asarray(g, dtype=np.float64)
        centered = g - g.mean()
        if normalization == "mean_std":
            centered = centered / (g.std() + STD_FLOOR)
        out.append(centered)
    return AdvantageBatch(np.concatenate(out), group_size, normalization)


def _scatter_score_gradient(
    policy: SoftmaxPolicy,
    per_state: dict[TokenState, tuple[list[int], list[float]]],
    scale: float,
) -> GradientTable:
    """Accumulate sum_i c_i * grad log pi(a_i | s) per state, scaled.

    Uses grad log pi(a|s) = e_a - pi(.|s), so a state's row is one scatter of
    the coefficients minus their total times the state's distribution.
    """
    table = GradientTable(policy.action_count)
    for state, (acts, coeffs) in per_state.items():
        c = np.asarray(coeffs, dtype=np.float64)
        row = np.zeros(policy.action_count, dtype=np.float64)
        np.add.at(row, np.asarray(acts, dtype=np.int64), c)
        row -= c.sum() * policy.probs(state)
        row *= scale
        table.add(state, row)
    return table


def ppo_clip_objective(
    policy: SoftmaxPolicy,
    batch: TrajectoryBatch,
    advantages: AdvantageBatch,
    clip: ClipConfig = ClipConfig(),
    aggregation: str = "token_mean",
) -> SurrogateEval:
    """Clipped-ratio surrogate against the batch's stored behavior log-probs.

    Per step: min(rho * adv, clip(rho) * adv) with rho = pi_theta / pi_b; the
    advantage and behavior policy are constants, so the gradient flows only
    where the unclipped branch attains the min. Steps with a non-finite ratio
    (behavior probability underflow) are excluded and counted. Aggregation is
    the mean over steps ("token_mean") or the per-trajectory sum averaged over
    trajectories ("traj_sum").
    """
    if aggregation not in ("token_mean", "traj_sum"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    if advantages.values.shape[0] != len(batch.trajectories):
        raise ValueError("advantage count must match trajectory count")
    lo, hi = 1.0 - clip.eps_low, 1.0 + clip.eps_high
    logp_cache: dict[TokenState, np.ndarray] = {}
    per_state: dict[TokenState, tuple[list[int], list[float]]] = {}
    total = 0.0
    included = 0
    excluded = 0
    for j, traj in enumerate(batch.trajectories):
        adv_j = float(advantages.values[j])
        for t, (state, action) in enumerate(zip(traj.states(), traj.actions)):
            logp = logp_cache.get(state)
            if logp is None:
                logp = policy.log_probs(state)
                logp_cache[state] = logp
            log_rho = float(logp[action]) - float(traj.behavior_logprobs[t])
            # math.exp raises OverflowError past ~709 instead of returning
            # inf; such steps are excluded like any non-finite ratio.
            rho = math.exp(log_rho) if log_rho < 709.0 else math.inf
            if not math.isfinite(rho):
                excluded += 1
                continue
            unclipped = rho * adv_j
            clipped = min(max(rho, lo), hi) * adv_j
            if unclipped <= clipped:
                total += unclipped
                coeff = rho * adv_j
            else:
                total += clipped
                coeff = 0.0
            included += 1
            entry = per_state.setdefault(state, ([], []))
            entry[0].append(action)
            entry[1].append(coeff)
    denom = included if aggregation == "token_mean" else len(batch.trajectories)
    if denom == 0:
        return SurrogateEval(0.0, GradientTable(policy.action_count),
                             excluded_steps=excluded)
    gradient = _scatter_score_gradient(policy, per_state, 1.0 / denom)
    return SurrogateEval(total / denom, gradient, excluded_steps=excluded)


def clamped_entropy_bonus(
    policy: SoftmaxPolicy,
    batch: TrajectoryBatch,
    clamp: ClampConfig,
    aggregation: str = "token_mean",
    frozen_sets: Optional[dict[TokenState, np.ndarray]] = None,
) -> tuple[float, GradientTable]:
    """Clamped entropy averaged over the batch's visited states (multiplicity
    respected), with its exact logit gradient.

    The retained set is recomputed from the current policy at each call by
    default; passing frozen_sets (state -> retained indices, e.g. computed at
    sampling time) holds the sets fixed instead.
    """
    if aggregation not in ("token_mean", "traj_sum"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    counts: dict[TokenState, int] = {}
    for state in batch.visited_states():
        counts[state] = counts.get(state, 0) + 1
    total_steps = sum(counts.values())
    scale_denom = total_steps if aggregation == "token_mean" else len(batch.trajectories)
    table = GradientTable(policy.action_count)
    value = 0.0
    for state, count in counts.items():
        if frozen_sets is not None:
            idx = frozen_sets[state]
            sub_logits = policy.logits(state)[idx]
            logq = log_softmax(sub_logits)
            q = np.exp(logq)
        else:
            idx, q, logq = policy._clamped_dist(state, clamp)
        h_state = float(-np.dot(q, logq))
        comp = -q * (logq + h_state)
        row = np.zeros(policy.action_count, dtype=np.float64)
        if idx is None:
            row[:] = comp
        else:
            row[idx] = comp
        weight = count / scale_denom
        value += weight * h_state
        table.add(state, weight * row)
    return value, table


def aent_objective(
    policy: SoftmaxPolicy,
    batch: TrajectoryBatch,
    advantages: AdvantageBatch,
    clip: ClipConfig,
    clamp: ClampConfig,
    lam: float,
    aggregation: str = "token_mean",
    frozen_sets: Optional[dict[TokenState, np.ndarray]] = None,
) -> SurrogateEval:
    """Clipped policy surrogate plus lam times the clamped entropy bonus."""
    po = ppo_clip_objective(policy, batch, advantages, clip, aggregation)
    bonus_value, bonus_grad = clamped_entropy_bonus(
        policy, batch, clamp, aggregation, frozen_sets
    )
    gradient = po.gradient.copy()
    gradient.add_scaled(bonus_grad, lam)
    return SurrogateEval(
        value=po.value + lam * bonus_value,
        gradient=gradient,
        entropy_bonus_value=bonus_value,
        entropy_bonus_gradient=bonus_grad,
        excluded_steps=po.excluded_steps,
    )


def reinforce_gradient_estimate(
    policy: SoftmaxPolicy, batch: TrajectoryBatch
) -> GradientTable:
    """Score-function estimate of the value gradient from an on-policy batch:
    the trajectory mean of sum_t grad log pi(a_t|s_t) * reward-to-go_t."""
    per_state: dict[TokenState, tuple[list[int], list[float]]] = {}
    for traj in batch.trajectories:
        to_go = np.cumsum(traj.rewards[::-1])[::-1]
        for t, (state, action) in enumerate(zip(traj.states(), traj.actions)):
            entry = per_state.setdefault(state, ([], []))
            entry[0].append(action)
            entry[1].append(float(to_go[t]))
    return _scatter_score_gradient(policy, per_state, 1.0 / len(batch.trajectories))


def sampled_entropy_gradient_estimate(
    policy: SoftmaxPolicy, batch: TrajectoryBatch
) -> GradientTable:
    """Score-function estimate of the trajectory-entropy gradient from an
    on-policy batch: minus the trajectory mean of
    sum_t grad log pi(a_t|s_t) * sum_{i >= t} log pi(a_i|s_i)."""
    logp_cache: dict[TokenState, np.ndarray] = {}
    per_state: dict[TokenState, tuple[list[int], list[float]]] = {}
    for traj in batch.trajectories:
        states = traj.states()
        logps = np.empty(len(states))
        for t, (state, action) in enumerate(zip(states, traj.actions)):
            logp = logp_cache.get(state)
            if logp is None:
                logp = policy.log_probs(state)
                logp_cache[state] = logp
            logps[t] = logp[action]
        suffix = np.cumsum(logps[::-1])[::-1]
        for t, (state, action) in enumerate(zip(states, traj.actions)):
            entry = per_state.setdefault(state, ([], []))
            entry[0].append(action)
            entry[1].append(-float(suffix[t]))
    return _scatter_score_gradient(policy, per_state, 1.0 / len(batch.trajectories))
