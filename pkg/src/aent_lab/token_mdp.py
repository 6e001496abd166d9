"""Finite-horizon token MDPs: deterministic prefix trees with per-step rewards.

States are (query, action-prefix) pairs; taking action a appends the token a,
so every state is reachable at exactly one step and the reachable set under a
query is a depth-H tree. The module provides trajectory sampling against a
behavior policy, the synthetic sparse-optimality task builder, and an exact
enumeration engine (values, advantages, state distributions, entropies, and
logit gradients computed in closed form) for instances small enough to expand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .softmax_policy import (
    GradientTable,
    SoftmaxPolicy,
    TokenState,
    log_softmax,
    softmax,
)


class EnumerationLimitError(ValueError):
    """Raised when an exact computation would expand more than
    enumeration_limit action sequences; the oracles are only for small
    instances."""


class TokenMdp:
    """Deterministic token-concatenation MDP with bounded per-step rewards.

    reward_row(state) must return the length-action_count vector of rewards
    for taking each action at that state, all values inside [0, 1].
    """

    def __init__(
        self,
        action_count: int,
        horizon: int,
        queries: Sequence[int],
        reward_row: Callable[[TokenState], np.ndarray],
        enumeration_limit: int = 10**6,
    ):
        if action_count < 2:
            raise ValueError("need at least two actions")
        if horizon < 1:
            raise ValueError("horizon must be positive")
        qs = [int(q) for q in queries]
        if not qs or len(set(qs)) != len(qs):
            raise ValueError("queries must be non-empty and distinct")
        self.action_count = int(action_count)
        self.horizon = int(horizon)
        self.queries = qs
        self._positions = {q: i for i, q in enumerate(qs)}
        self.reward_row = reward_row
        self.enumeration_limit = int(enumeration_limit)

    def query_position(self, query: int) -> int:
        try:
            return self._positions[query]
        except KeyError:
            raise ValueError(f"unknown query {query!r}") from None

    def root_state(self, query: int) -> TokenState:
        self.query_position(query)
        return TokenState(int(query), ())

    def reward_values(self, state: TokenState) -> np.ndarray:
        """Reward vector at a state, validated into [0, 1]."""
        r = np.asarray(self.reward_row(state), dtype=np.float64)
        if r.shape != (self.action_count,):
            raise ValueError("reward row has wrong shape")
        if not (np.all(r >= 0.0) and np.all(r <= 1.0)):
            raise ValueError("rewards must lie in [0, 1]")
        return r

    @classmethod
    def from_action_rewards(
        cls,
        action_rewards: np.ndarray,
        horizon: int = 1,
        queries: Sequence[int] = (0,),
        enumeration_limit: int = 10**6,
    ) -> "TokenMdp":
        """MDP whose reward depends only on the action taken (same vector at
        every state)."""
        vec = np.asarray(action_rewards, dtype=np.float64).copy()
        mdp = cls(vec.shape[0], horizon, queries, lambda state: vec, enumeration_limit)
        mdp.action_rewards = vec
        return mdp


# -- trajectories ------------------------------------------------------------


@dataclass
class Trajectory:
    """One rollout: the action tokens plus per-step behavior log-probs and
    rewards (all length horizon)."""

    query_index: int
    actions: tuple[int, ...]
    behavior_logprobs: np.ndarray
    rewards: np.ndarray

    def __post_init__(self) -> None:
        self.behavior_logprobs = np.asarray(self.behavior_logprobs, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        n = len(self.actions)
        if self.behavior_logprobs.shape != (n,) or self.rewards.shape != (n,):
            raise ValueError("per-step arrays must match the action count")
        if np.any(self.behavior_logprobs > 0.0):
            raise ValueError("log-probabilities cannot be positive")

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())

    def states(self) -> list[TokenState]:
        """Visited states s_0 .. s_{H-1} (the states actions were taken at)."""
        out = []
        s = TokenState(self.query_index, ())
        for a in self.actions:
            out.append(s)
            s = s.child(a)
        return out


@dataclass
class TrajectoryBatch:
    """Query-major batch: group_size consecutive rollouts per sampled query."""

    trajectories: list[Trajectory]
    group_size: int

    def __post_init__(self) -> None:
        if self.group_size < 1 or len(self.trajectories) % self.group_size != 0:
            raise ValueError("batch size must be a multiple of group_size")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def total_steps(self) -> int:
        return sum(t.horizon for t in self.trajectories)

    def returns(self) -> np.ndarray:
        return np.asarray([t.total_return for t in self.trajectories])

    def grouped_returns(self) -> list[np.ndarray]:
        r = self.returns()
        return [
            r[i : i + self.group_size] for i in range(0, len(r), self.group_size)
        ]

    def visited_states(self) -> list[TokenState]:
        """All visited states with multiplicity (the empirical token measure)."""
        out = []
        for t in self.trajectories:
            out.extend(t.states())
        return out


def _sample_action(cdf: np.ndarray, u: float) -> int:
    a = int(np.searchsorted(cdf, u, side="right"))
    return min(a, cdf.shape[0] - 1)


def rollout(
    mdp: TokenMdp,
    behavior: SoftmaxPolicy,
    query: int,
    rng: np.random.Generator,
) -> Trajectory:
    """Sample one trajectory from the behavior policy, storing its per-step
    log-probs for later importance ratios. Consumes exactly one uniform draw
    per step."""
    state = mdp.root_state(query)
    actions: list[int] = []
    logprobs = np.empty(mdp.horizon)
    rewards = np.empty(mdp.horizon)
    for t in range(mdp.horizon):
        p = behavior.probs(state)
        logp = behavior.log_probs(state)
        a = _sample_action(np.cumsum(p), rng.random())
        actions.append(a)
        logprobs[t] = logp[a]
        rewards[t] = mdp.reward_values(state)[a]
        state = state.child(a)
    return Trajectory(query, tuple(actions), logprobs, rewards)


def sample_batch(
    mdp: TokenMdp,
    behavior: SoftmaxPolicy,
    queries: Sequence[int],
    rollouts_per_query: int,
    seed_key: Sequence[int],
) -> TrajectoryBatch:
    """Sample rollouts_per_query trajectories per query, query-major.

    Trajectory i draws from its own stream seeded by (*seed_key, i), so the
    batch is reproducible and identical to running `rollout` per trajectory
    with those streams, regardless of how the work is interleaved. Shared
    per-state softmax/CDF work is done once per step.
    """
    order = [q for q in queries for _ in range(rollouts_per_query)]
    n = len(order)
    base = tuple(int(x) for x in seed_key)
    streams = [
        np.random.default_rng(np.random.SeedSequence(base + (i,))) for i in range(n)
    ]
    states = [mdp.root_state(q) for q in order]
    actions = [[] for _ in range(n)]
    logprobs = np.empty((n, mdp.horizon))
    rewards = np.empty((n, mdp.horizon))
    for t in range(mdp.horizon):
        cache: dict[TokenState, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        for i in range(n):
            s = states[i]
            entry = cache.get(s)
            if entry is None:
                p = behavior.probs(s)
                entry = (np.cumsum(p), behavior.log_probs(s), mdp.reward_values(s))
                cache[s] = entry
            cdf, logp, rew = entry
            a = _sample_action(cdf, streams[i].random())
            actions[i].append(a)
            logprobs[i, t] = logp[a]
            rewards[i, t] = rew[a]
            states[i] = s.child(a)
    trajs = [
        Trajectory(order[i], tuple(actions[i]), logprobs[i], rewards[i])
        for i in range(n)
    ]
    return TrajectoryBatch(trajs, rollouts_per_query)


# -- synthetic sparse-optimality task ----------------------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Single-query bandit-style task: a few optimal actions, a larger pool of
    mildly rewarded ones, and a mass of zero-reward actions, with the initial
    logits of an "elevated" subset shifted up to mimic a pre-trained policy."""

    n_optimal: int
    action_count: int = 100_000
    n_suboptimal: int = 500
    reward_optimal: float = 1.0
    reward_suboptimal: float = 0.2
    reward_other: float = 0.0
    horizon: int = 1
    elevated_init_mean: float = 1.0
    base_init_mean: float = 0.0
    init_stddev: float = 1.0
    # "rewarded": elevated-init set = optimal + suboptimal actions.
    # "disjoint": elevated set = optimal + fresh draws from unrewarded actions.
    elevated_set: str = "rewarded"

    def __post_init__(self) -> None:
        if self.n_optimal < 1:
            raise ValueError("need at least one optimal action")
        if self.n_optimal + 2 * self.n_suboptimal > self.action_count:
            raise ValueError("action space too small for the requested sets")
        for r in (self.reward_optimal, self.reward_suboptimal, self.reward_other):
            if not 0.0 <= r <= 1.0:
                raise ValueError("rewards must lie in [0, 1]")
        if not self.reward_optimal > self.reward_suboptimal >= self.reward_other:
            raise ValueError("rewards must be ordered optimal > suboptimal >= other")
        if self.elevated_set not in ("rewarded", "disjoint"):
            raise ValueError(f"unknown elevated_set {self.elevated_set!r}")


class GaussianRowInit:
    """Deterministic per-state logit initializer: elevated actions ~
    N(elevated_mean, std), the rest ~ N(base_mean, std). Each state gets its
    own substream keyed by (seed, query, prefix), so creation order never
    matters. Picklable for worker processes."""

    def __init__(self, spec: SyntheticTaskSpec, elevated: np.ndarray, seed: int):
        self.spec = spec
        self.elevated = np.asarray(elevated, dtype=np.int64)
        self.seed = int(seed)

    def __call__(self, state: TokenState) -> np.ndarray:
        key = (self.seed, state.query_index, state.depth) + state.actions
        rng = np.random.default_rng(np.random.SeedSequence(key))
        row = rng.normal(self.spec.base_init_mean, self.spec.init_stddev,
                         self.spec.action_count)
        row[self.elevated] = rng.normal(self.spec.elevated_init_mean,
                                        self.spec.init_stddev,
                                        self.elevated.shape[0])
        return row


def build_synthetic_task(
    spec: SyntheticTaskSpec, seed: int
) -> tuple[TokenMdp, SoftmaxPolicy]:
    """Materialize the task and its initial policy, deterministically in seed."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0)))
    sel = rng.choice(spec.action_count, spec.n_optimal + spec.n_suboptimal,
                     replace=False)
    optimal = np.sort(sel[: spec.n_optimal])
    suboptimal = np.sort(sel[spec.n_optimal :])
    rewards = np.full(spec.action_count, spec.reward_other, dtype=np.float64)
    rewards[suboptimal] = spec.reward_suboptimal
    rewards[optimal] = spec.reward_optimal
    if spec.elevated_set == "rewarded":
        elevated = np.concatenate([optimal, suboptimal])
    else:
        unrewarded = np.flatnonzero(rewards == spec.reward_other)
        extra = rng.choice(unrewarded, spec.n_suboptimal, replace=False)
        elevated = np.concatenate([optimal, np.sort(extra)])
    mdp = TokenMdp.from_action_rewards(rewards, spec.horizon, queries=[0])
    policy = SoftmaxPolicy(
        spec.action_count, row_init=GaussianRowInit(spec, elevated, seed)
    )
    return mdp, policy


# -- exact enumeration engine -------------------------------------------------


class EnumeratedTree:
    """Dense per-depth expansion of the reachable tree for a query set.

    Depth-t states are laid out query-major with the action prefix read as a
    base-|A| integer, so the children of flat state i are the contiguous block
    i*|A| .. i*|A|+|A|-1 at depth t+1. All exact quantities (state
    distributions, value/advantage tables, entropies, analytic and
    finite-difference logit gradients) are computed on these arrays.
    """

    def __init__(
        self,
        mdp: TokenMdp,
        policy: SoftmaxPolicy,
        queries: Optional[Sequence[int]] = None,
    ):
        if mdp.action_count**mdp.horizon > mdp.enumeration_limit:
            raise EnumerationLimitError(
                "instance expands past enumeration_limit; exact oracles are "
                "only for small instances"
            )
        self.mdp = mdp
        self.queries = list(mdp.queries) if queries is None else [int(q) for q in queries]
        for q in self.queries:
            mdp.query_position(q)
        a = mdp.action_count
        self.states: list[list[TokenState]] = []
        self.rewards: list[np.ndarray] = []
        self.logits: list[np.ndarray] = []
        level = [TokenState(q, ()) for q in self.queries]
        for t in range(mdp.horizon):
            self.states.append(level)
            self.rewards.append(np.stack([mdp.reward_values(s) for s in level]))
            self.logits.append(np.stack([policy._row(s).copy() for s in level]))
            if t + 1 < mdp.horizon:
                level = [s.child(b) for s in level for b in range(a)]
        self._probs: Optional[list[np.ndarray]] = None
        self._logps: Optional[list[np.ndarray]] = None

    @property
    def horizon(self) -> int:
        return self.mdp.horizon

    def n_states(self, t: int) -> int:
        return len(self.states[t])

    def mark_dirty(self) -> None:
        """Call after mutating self.logits so distributions are recomputed."""
        self._probs = None
        self._logps = None

    def probs(self) -> list[np.ndarray]:
        if self._probs is None:
            self._probs = [softmax(l) for l in self.logits]
        return self._probs

    def log_probs(self) -> list[np.ndarray]:
        if self._logps is None:
            self._logps = [log_softmax(l) for l in self.logits]
        return self._logps

    # -- distributions over states ------------------------------------------

    def root_weights(self, query: Optional[int] = None) -> np.ndarray:
        w = np.zeros(len(self.queries))
        if query is None:
            w[:] = 1.0 / len(self.queries)
        else:
            w[self.queries.index(int(query))] = 1.0
        return w

    def state_distribution(self, root_weights: np.ndarray) -> list[np.ndarray]:
        """d_t over depth-t states; each level sums to sum(root_weights)."""
        probs = self.probs()
        dists = [np.asarray(root_weights, dtype=np.float64)]
        for t in range(self.horizon - 1):
            dists.append((dists[t][:, None] * probs[t]).reshape(-1))
        return dists

    # -- values, advantages, gradients ----------------------------------------

    def value_arrays(
        self, lam: float = 0.0, rewards: Optional[list[np.ndarray]] = None
    ) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
        """Backward induction under the current policy.

        Returns (v, q, adv) per depth, where q[t][s, a] = r(s, a) + v[t+1] at
        the child, v is the lam-regularized state value (per-step entropy
        bonus -lam*log pi), and adv[t][s, a] = q - lam*log pi(a|s) - v[t][s],
        whose pi-weighted row sums are zero.
        """
        rew = self.rewards if rewards is None else rewards
        probs, logps = self.probs(), self.log_probs()
        h = self.horizon
        v: list[np.ndarray] = [None] * h
        q: list[np.ndarray] = [None] * h
        adv: list[np.ndarray] = [None] * h
        v_next = np.zeros(self.n_states(h - 1) * self.mdp.action_count)
        for t in range(h - 1, -1, -1):
            qt = rew[t] + v_next.reshape(self.n_states(t), self.mdp.action_count)
            shifted = qt - lam * logps[t] if lam else qt
            vt = np.sum(probs[t] * shifted, axis=1)
            q[t], v[t], adv[t] = qt, vt, shifted - vt[:, None]
            v_next = vt
        return v, q, adv

    def objective(self, lam: float, root_weights: np.ndarray) -> float:
        """Root-weighted lam-regularized value: the dataset objective when
        root_weights is uniform over queries."""
        v, _, _ = self.value_arrays(lam)
        return float(np.dot(root_weights, v[0]))

    def entropy(self, root_weights: np.ndarray) -> float:
        """Expected summed per-state entropy along trajectories (the
        trajectory-entropy functional)."""
        probs, logps = self.probs(), self.log_probs()
        dists = self.state_distribution(root_weights)
        total = 0.0
        for t in range(self.horizon):
            row_ent = -np.sum(probs[t] * logps[t], axis=1)
            total += float(np.dot(dists[t], row_ent))
        return total

    def analytic_gradient(
        self,
        lam: float = 0.0,
        rewards: Optional[list[np.ndarray]] = None,
        root_weights: Optional[np.ndarray] = None,
    ) -> list[np.ndarray]:
        """Exact logit gradient of the root-weighted regularized value:
        g[t][s, a] = d_t(s) * pi(a|s) * adv_t(s, a)."""
        if root_weights is None:
            root_weights = self.root_weights()
        _, _, adv = self.value_arrays(lam, rewards)
        probs = self.probs()
        dists = self.state_distribution(root_weights)
        return [
            dists[t][:, None] * probs[t] * adv[t] for t in range(self.horizon)
        ]

    def entropy_gradient(
        self, root_weights: Optional[np.ndarray] = None
    ) -> list[np.ndarray]:
        """Exact gradient of entropy(): the policy gradient of the auxiliary
        MDP whose per-step reward is -log pi(a|s)."""
        return self.analytic_gradient(
            0.0, rewards=[-lp for lp in self.log_probs()], root_weights=root_weights
        )

    def fd_gradient(self, fn, step: float = 1e-5) -> list[np.ndarray]:
        """Central finite differences of a scalar fn() of this tree's logits,
        taken in every logit entry. fn is called with the tree mutated in
        place (e.g. lambda: tree.objective(lam, w))."""
        out = []
        for t in range(self.horizon):
            g = np.zeros_like(self.logits[t])
            for i in range(g.shape[0]):
                for a in range(g.shape[1]):
                    orig = self.logits[t][i, a]
                    self.logits[t][i, a] = orig + step
                    self.mark_dirty()
                    hi = fn()
                    self.logits[t][i, a] = orig - step
                    self.mark_dirty()
                    lo = fn()
                    self.logits[t][i, a] = orig
                    g[i, a] = (hi - lo) / (2.0 * step)
            out.append(g)
        self.mark_dirty()
        return out

    # -- per-sequence enumeration ---------------------------------------------

    def path_returns(self, query: int) -> np.ndarray:
        """Total return of every length-H action sequence from the query, in
        base-|A| sequence order."""
        pos = self.queries.index(int(query))
        a = self.mdp.action_count
        ret = np.zeros(1)
        for t in range(self.horizon):
            block = self.rewards[t][pos * a**t : (pos + 1) * a**t]
            ret = (ret[:, None] + block).reshape(-1)
        return ret

    def path_log_probs(self, query: int) -> np.ndarray:
        """Log-probability of every length-H action sequence from the query."""
        pos = self.queries.index(int(query))
        a = self.mdp.action_count
        logps = self.log_probs()
        lp = np.zeros(1)
        for t in range(self.horizon):
            block = logps[t][pos * a**t : (pos + 1) * a**t]
            lp = (lp[:, None] + block).reshape(-1)
        return lp

    # -- conversions -----------------------------------------------------------

    def to_table(self, arrays: list[np.ndarray]) -> GradientTable:
        table = GradientTable(self.mdp.action_count)
        for t in range(self.horizon):
            for i, s in enumerate(self.states[t]):
                table.add(s, arrays[t][i])
        return table

    @staticmethod
    def flat_norm(arrays: list[np.ndarray]) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in arrays))

    def write_logits_to(self, policy: SoftmaxPolicy) -> None:
        for t in range(self.horizon):
            for i, s in enumerate(self.states[t]):
                policy.set_logits(s, self.logits[t][i])


def exact_value(mdp: TokenMdp, policy: SoftmaxPolicy, query: int) -> float:
    """Exact expected return from one query under the policy."""
    tree = EnumeratedTree(mdp, policy, queries=[query])
    return tree.objective(0.0, tree.root_weights(query))


def exact_dataset_value(mdp: TokenMdp, policy: SoftmaxPolicy) -> float:
    """Exact expected return with the query drawn uniformly from the set."""
    tree = EnumeratedTree(mdp, policy)
    return tree.objective(0.0, tree.root_weights())


def exact_state_distribution(
    mdp: TokenMdp, policy: SoftmaxPolicy, query: int
) -> dict[tuple[int, TokenState], float]:
    """Visitation probabilities {(t, state): P_t(state | query)}. Keys exist
    only at a state's own depth (each state is reachable at exactly one step);
    every depth sums to one."""
    tree = EnumeratedTree(mdp, policy, queries=[query])
    dists = tree.state_distribution(tree.root_weights(query))
    out: dict[tuple[int, TokenState], float] = {}
    for t in range(tree.horizon):
        for i, s in enumerate(tree.states[t]):
            out[(t, s)] = float(dists[t][i])
    return out
