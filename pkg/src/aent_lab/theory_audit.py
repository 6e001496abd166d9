"""Exact oracles and inequality checks for small token MDPs.

Everything here is computed in closed form on the enumerated tree: value,
advantage, and visitation tables; the exact logit gradients of the value and
of the trajectory entropy; the soft (entropy-regularized) optimal policy; and
the performance bounds that tie gradient norms to entropies and suboptimality
gaps. Checks return named inequality records with their slack so harnesses
can report pass/fail per instance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .softmax_policy import GradientTable, SoftmaxPolicy, TokenState
from .token_mdp import EnumeratedTree, EnumerationLimitError, TokenMdp

# Soft-optimal visitation below this floor counts a state as unreachable and
# excludes it from the constant's minimum.
REACH_FLOOR = 1e-300

# Return ties within this tolerance join the optimal-response set.
OPTIMAL_TIE_TOL = 1e-9


@dataclass
class InequalityCheck:
    """One named check: lhs <= rhs (kind "le") or lhs == rhs (kind "eq"),
    judged by slack = rhs - lhs against the tolerance."""

    name: str
    lhs: float
    rhs: float
    tolerance: float
    kind: str = "le"
    vacuous: bool = False
    note: str = ""

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        if self.vacuous:
            return True
        if self.kind == "eq":
            return abs(self.slack) <= self.tolerance
        return self.slack >= -self.tolerance


@dataclass
class BoundReport:
    """Everything the performance bounds say about one (instance, query)."""

    query: int
    lam: float
    grad_norm: float
    entropy: float
    suboptimality: float
    c_factor: float
    c_lambda: float
    c_d: float
    optimal_set_size: int
    bias_term: float
    inequalities: list[InequalityCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.inequalities)


class ValueTables:
    """Per-depth value/advantage/visitation arrays with state-keyed access."""

    def __init__(
        self,
        lam: float,
        states: list[list[TokenState]],
        v: list[np.ndarray],
        q: list[np.ndarray],
        advantage: list[np.ndarray],
        state_probs: list[np.ndarray],
    ):
        self.lam = lam
        self.states = states
        self.v = v
        self.q = q
        self.advantage = advantage
        self.state_probs = state_probs
        self._pos: dict[TokenState, tuple[int, int]] = {
            s: (t, i) for t, level in enumerate(states) for i, s in enumerate(level)
        }

    def _locate(self, state: TokenState) -> tuple[int, int]:
        try:
            return self._pos[state]
        except KeyError:
            raise ValueError(f"state {state} is not in the enumerated tree") from None

    def value(self, state: TokenState) -> float:
        t, i = self._locate(state)
        return float(self.v[t][i])

    def q_value(self, state: TokenState, action: int) -> float:
        t, i = self._locate(state)
        return float(self.q[t][i, action])

    def adv(self, state: TokenState, action: int) -> float:
        t, i = self._locate(state)
        return float(self.advantage[t][i, action])

    def state_prob(self, state: TokenState) -> float:
        t, i = self._locate(state)
        return float(self.state_probs[t][i])


def compute_value_tables(
    mdp: TokenMdp,
    policy: SoftmaxPolicy,
    lam: float = 0.0,
    query: Optional[int] = None,
) -> ValueTables:
    """Exact tables under the policy; visitation uses the uniform query
    mixture unless one query is singled out."""
    tree = EnumeratedTree(mdp, policy)
    w = tree.root_weights(query)
    v, q, adv = tree.value_arrays(lam)
    return ValueTables(lam, tree.states, v, q, adv, tree.state_distribution(w))


def exact_policy_gradient(
    mdp: TokenMdp, policy: SoftmaxPolicy, lam: float = 0.0
) -> GradientTable:
    """Exact logit gradient of the (lam-regularized) dataset value."""
    tree = EnumeratedTree(mdp, policy)
    return tree.to_table(tree.analytic_gradient(lam))


def exact_entropy_and_grad(
    mdp: TokenMdp, policy: SoftmaxPolicy
) -> tuple[float, GradientTable]:
    """Exact trajectory entropy of the dataset and its logit gradient (the
    policy gradient of the auxiliary tree whose reward is -log pi)."""
    tree = EnumeratedTree(mdp, policy)
    w = tree.root_weights()
    return tree.entropy(w), tree.to_table(tree.entropy_gradient(w))


def finite_difference_gradient(
    mdp: TokenMdp, policy: SoftmaxPolicy, lam: float = 0.0, step: float = 1e-5
) -> GradientTable:
    """Central-difference gradient of the dataset objective, for oracle
    cross-checks."""
    tree = EnumeratedTree(mdp, policy)
    w = tree.root_weights()
    return tree.to_table(tree.fd_gradient(lambda: tree.objective(lam, w), step))


def gradient_relative_error(a: GradientTable, b: GradientTable) -> float:
    """max over logits of |a - b| / max(1, |a|)."""
    worst = 0.0
    for state in set(a.states()) | set(b.states()):
        ra = a.row(state)
        rb = b.row(state)
        err = np.abs(ra - rb) / np.maximum(1.0, np.abs(ra))
        worst = max(worst, float(err.max()))
    return worst


# -- optimal responses ---------------------------------------------------------


def _digits(flat: int, base: int, length: int) -> tuple[int, ...]:
    out = [0] * length
    for t in range(length - 1, -1, -1):
        out[t] = flat % base
        flat //= base
    return tuple(out)


def _path_return_array(mdp: TokenMdp, query: int) -> np.ndarray:
    """Total return of every length-H action sequence, in base-|A| order."""
    if mdp.action_count**mdp.horizon > mdp.enumeration_limit:
        raise EnumerationLimitError("instance expands past enumeration_limit")
    level = [mdp.root_state(query)]
    ret = np.zeros(1)
    for t in range(mdp.horizon):
        rew = np.stack([mdp.reward_values(s) for s in level])
        ret = (ret[:, None] + rew).reshape(-1)
        if t + 1 < mdp.horizon:
            level = [s.child(b) for s in level for b in range(mdp.action_count)]
    return ret


def _optimal_indices(mdp: TokenMdp, query: int) -> tuple[np.ndarray, float]:
    ret = _path_return_array(mdp, query)
    v_star = float(ret.max())
    return np.flatnonzero(ret >= v_star - OPTIMAL_TIE_TOL), v_star


def optimal_response_set(
    mdp: TokenMdp, query: int
) -> tuple[list[tuple[int, ...]], float]:
    """All action sequences achieving the maximal total return from the query
    (ties within 1e-9), plus that value."""
    idx, v_star = _optimal_indices(mdp, query)
    seqs = [_digits(int(i), mdp.action_count, mdp.horizon) for i in idx]
    return seqs, v_star


# -- bound checks ---------------------------------------------------------------


def check_gradient_entropy_bound(
    mdp: TokenMdp, policy: SoftmaxPolicy
) -> InequalityCheck:
    """Gradient-entropy bound: ||grad V(D)|| <= 2 * entropy(policy)."""
    tree = EnumeratedTree(mdp, policy)
    w = tree.root_weights()
    lhs = tree.flat_norm(tree.analytic_gradient(0.0, root_weights=w))
    rhs = 2.0 * tree.entropy(w)
    return InequalityCheck("gradient_entropy_bound", lhs, rhs, tolerance=1e-9)


def check_stationary_suboptimality(
    mdp: TokenMdp, policy: SoftmaxPolicy, query: int
) -> InequalityCheck:
    """Stationarity bound: V* - V^pi <= ||grad V(D)|| / C^pi(s0), where C is
    the best optimal-sequence probability under pi over sqrt(H) * |D|."""
    tree = EnumeratedTree(mdp, policy)
    eps = tree.flat_norm(tree.analytic_gradient(0.0))
    idx, v_star = _optimal_indices(mdp, query)
    best_logp = float(tree.path_log_probs(query)[idx].max())
    c = math.exp(best_logp) / (math.sqrt(mdp.horizon) * len(mdp.queries))
    v_pi = float(tree.value_arrays(0.0)[0][0][tree.queries.index(query)])
    lhs = v_star - v_pi
    if c <= 0.0:
        return InequalityCheck(
            "stationary_suboptimality", lhs, math.inf, 1e-7,
            vacuous=True, note="optimal-sequence probability underflowed",
        )
    return InequalityCheck("stationary_suboptimality", lhs, eps / c, tolerance=1e-7)


def _soft_optimal_arrays(
    tree: EnumeratedTree, lam: float
) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """(v*, q*, pi*) per depth for the lam-soft-optimal policy, by backward
    induction with the log-sum-exp softening (max-subtracted)."""
    h = tree.horizon
    v: list[np.ndarray] = [None] * h
    q: list[np.ndarray] = [None] * h
    p: list[np.ndarray] = [None] * h
    a = tree.mdp.action_count
    v_next = np.zeros(tree.n_states(h - 1) * a)
    for t in range(h - 1, -1, -1):
        qt = tree.rewards[t] + v_next.reshape(tree.n_states(t), a)
        m = qt.max(axis=1, keepdims=True)
        e = np.exp((qt - m) / lam)
        z = e.sum(axis=1, keepdims=True)
        p[t] = e / z
        v[t] = (lam * np.log(z) + m)[:, 0]
        q[t] = qt
        v_next = v[t]
    return v, q, p


def soft_optimal_policy(
    mdp: TokenMdp, lam: float
) -> tuple[SoftmaxPolicy, ValueTables]:
    """The exact maximizer of the lam-entropy-regularized value: at each state
    pi*(a|s) proportional to exp(Q*_lam(s,a) / lam). Returned tables hold the
    soft values and the visitation under pi* (uniform query mixture)."""
    if lam <= 0.0:
        raise ValueError("soft optimum needs lam > 0")
    uniform = SoftmaxPolicy(mdp.action_count)
    tree = EnumeratedTree(mdp, uniform)
    v, q, p = _soft_optimal_arrays(tree, lam)
    policy = SoftmaxPolicy(mdp.action_count)
    for t in range(tree.horizon):
        for i, s in enumerate(tree.states[t]):
            policy.set_logits(s, q[t][i] / lam)
    adv = [q[t] - lam * np.log(np.maximum(p[t], REACH_FLOOR)) - v[t][:, None]
           for t in range(tree.horizon)]
    dists = [tree.root_weights()]
    for t in range(tree.horizon - 1):
        dists.append((dists[t][:, None] * p[t]).reshape(-1))
    return policy, ValueTables(lam, tree.states, v, q, adv, dists)


def check_regularized_stationary_bound(
    mdp: TokenMdp, policy: SoftmaxPolicy, query: int, lam: float
) -> InequalityCheck:
    """Regularized stationarity bound:
    V* - V^pi <= ||grad V_lam(D)||^2 / (2 lam C_lam) + entropy bias."""
    if lam <= 0.0:
        raise ValueError("the regularized bound needs lam > 0")
    tree = EnumeratedTree(mdp, policy)
    a, h = mdp.action_count, mdp.horizon
    pos = tree.queries.index(query)
    eps = tree.flat_norm(tree.analytic_gradient(lam))
    probs = tree.probs()
    d_theta = tree.state_distribution(tree.root_weights())
    _, _, p_star = _soft_optimal_arrays(tree, lam)
    d_star = [tree.root_weights(query)]
    for t in range(h - 1):
        d_star.append((d_star[t][:, None] * p_star[t]).reshape(-1))
    n_reachable = sum(a**t for t in range(h))
    c_d = 1.0 / math.sqrt(n_reachable)
    c_lambda = math.inf
    for t in range(h):
        lo, hi_ = pos * a**t, (pos + 1) * a**t
        ds = d_star[t][lo:hi_]
        reach = ds > REACH_FLOOR
        if not np.any(reach):
            continue
        min_pi = probs[t][lo:hi_].min(axis=1)
        ratio = (d_theta[t][lo:hi_] * min_pi) ** 2 / ds
        c_lambda = min(c_lambda, float(ratio[reach].min()))
    c_lambda = c_d**2 * c_lambda
    idx, v_star = _optimal_indices(mdp, query)
    bias = lam * (h * math.log(a) - math.log(idx.size))
    v_pi = float(tree.value_arrays(0.0)[0][0][pos])
    lhs = v_star - v_pi
    if c_lambda <= 0.0 or not math.isfinite(c_lambda):
        return InequalityCheck(
            "regularized_stationary", lhs, math.inf, 1e-7,
            vacuous=True, note="visitation constant underflowed",
        )
    rhs = eps**2 / (2.0 * lam * c_lambda) + bias
    return InequalityCheck("regularized_stationary", lhs, rhs, tolerance=1e-7)


def check_performance_difference(
    mdp: TokenMdp, policy_a: SoftmaxPolicy, policy_b: SoftmaxPolicy, query: int
) -> InequalityCheck:
    """Exact identity: V^a(s0) - V^b(s0) equals the a-visitation expectation
    of b's advantages."""
    tree_a = EnumeratedTree(mdp, policy_a, queries=[query])
    tree_b = EnumeratedTree(mdp, policy_b, queries=[query])
    w = tree_a.root_weights(query)
    va = tree_a.value_arrays(0.0)[0]
    _, _, adv_b = tree_b.value_arrays(0.0)
    vb = tree_b.value_arrays(0.0)[0]
    d_a = tree_a.state_distribution(w)
    rhs = 0.0
    for t in range(tree_a.horizon):
        rhs += float(np.dot(d_a[t], np.sum(tree_a.probs()[t] * adv_b[t], axis=1)))
    lhs = float(va[0][0] - vb[0][0])
    return InequalityCheck(
        "performance_difference", lhs, rhs, tolerance=1e-9, kind="eq"
    )


def check_advantage_centering(
    mdp: TokenMdp, policy: SoftmaxPolicy, lam: float = 0.0
) -> InequalityCheck:
    """At every state the pi-expectation of the (regularized) advantage is
    zero; reports the worst absolute row sum."""
    tree = EnumeratedTree(mdp, policy)
    _, _, adv = tree.value_arrays(lam)
    probs = tree.probs()
    worst = 0.0
    for t in range(tree.horizon):
        worst = max(worst, float(np.abs(np.sum(probs[t] * adv[t], axis=1)).max()))
    return InequalityCheck(
        "advantage_centering", worst, 0.0, tolerance=1e-10, kind="eq"
    )


# -- instance generation and aggregation ---------------------------------------


class TreeTableRewards:
    """Reward lookup into dense per-depth tables laid out like the enumerated
    tree (query-major, prefix as a base-|A| integer). Picklable."""

    def __init__(self, tables: list[np.ndarray], action_count: int,
                 positions: dict[int, int]):
        self.tables = tables
        self.action_count = action_count
        self.positions = positions

    def __call__(self, state: TokenState) -> np.ndarray:
        i = self.positions[state.query_index]
        for tok in state.actions:
            i = i * self.action_count + tok
        return self.tables[state.depth][i]


def random_instance(
    rng: np.random.Generator,
    max_actions: int = 6,
    max_horizon: int = 3,
    max_queries: int = 3,
) -> tuple[TokenMdp, SoftmaxPolicy]:
    """A small random MDP (uniform [0,1] rewards on every reachable edge) and
    a random softmax policy over its reachable states."""
    a = int(rng.integers(2, max_actions + 1))
    h = int(rng.integers(1, max_horizon + 1))
    n_q = int(rng.integers(1, max_queries + 1))
    queries = list(range(n_q))
    tables = [rng.random((n_q * a**t, a)) for t in range(h)]
    reward_row = TreeTableRewards(tables, a, {q: q for q in queries})
    mdp = TokenMdp(a, h, queries, reward_row)
    scale = float(rng.uniform(0.3, 2.0))
    policy = SoftmaxPolicy(a)
    level = [mdp.root_state(q) for q in queries]
    for t in range(h):
        for s in level:
            policy.set_logits(s, rng.normal(0.0, scale, a))
        if t + 1 < h:
            level = [s.child(b) for s in level for b in range(a)]
    return mdp, policy


def exact_gradient_ascent(
    mdp: TokenMdp,
    policy: SoftmaxPolicy,
    lam: float,
    steps: int,
    learn_rate: float,
) -> SoftmaxPolicy:
    """Run plain gradient ascent on the exact (lam-regularized) dataset value
    and return the resulting policy; the input policy is untouched."""
    tree = EnumeratedTree(mdp, policy)
    for _ in range(steps):
        grads = tree.analytic_gradient(lam)
        for t in range(tree.horizon):
            tree.logits[t] += learn_rate * grads[t]
        tree.mark_dirty()
    result = policy.copy()
    tree.write_logits_to(result)
    return result


def bound_report(
    mdp: TokenMdp, policy: SoftmaxPolicy, query: int, lam: float
) -> BoundReport:
    """Full bound story for one query: both suboptimality bounds, the
    gradient-entropy bound, and all the constants they use."""
    tree = EnumeratedTree(mdp, policy)
    w = tree.root_weights()
    pos = tree.queries.index(query)
    grad_norm = tree.flat_norm(tree.analytic_gradient(0.0))
    entropy = tree.entropy(w)
    idx, v_star = _optimal_indices(mdp, query)
    v_pi = float(tree.value_arrays(0.0)[0][0][pos])
    best_logp = float(tree.path_log_probs(query)[idx].max())
    c_factor = math.exp(best_logp) / (math.sqrt(mdp.horizon) * len(mdp.queries))
    grad_check = check_gradient_entropy_bound(mdp, policy)
    subopt_check = check_stationary_suboptimality(mdp, policy, query)
    reg_check = check_regularized_stationary_bound(mdp, policy, query, lam)
    n_reachable = sum(mdp.action_count**t for t in range(mdp.horizon))
    c_d = 1.0 / math.sqrt(n_reachable)
    bias = lam * (mdp.horizon * math.log(mdp.action_count) - math.log(idx.size))
    # back the constant out of the reported bound rather than recomputing it
    eps_lam = tree.flat_norm(tree.analytic_gradient(lam))
    if reg_check.vacuous or reg_check.rhs == math.inf:
        c_lambda = 0.0
    else:
        c_lambda = eps_lam**2 / (2.0 * lam * (reg_check.rhs - bias)) \
            if reg_check.rhs > bias else math.inf
    return BoundReport(
        query=query,
        lam=lam,
        grad_norm=grad_norm,
        entropy=entropy,
        suboptimality=v_star - v_pi,
        c_factor=c_factor,
        c_lambda=c_lambda,
        c_d=c_d,
        optimal_set_size=int(idx.size),
        bias_term=bias,
        inequalities=[grad_check, subopt_check, reg_check],
    )


def audit_instance(
    mdp: TokenMdp,
    policy: SoftmaxPolicy,
    lam: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    fd_step: float = 1e-5,
    include_fd: bool = True,
) -> list[InequalityCheck]:
    """Run every check on one instance: gradient oracles against finite
    differences, the advantage-centering identity, both suboptimality bounds
    per query, the gradient-entropy bound, and (given an rng for the second
    policy) the performance-difference identity."""
    checks: list[InequalityCheck] = []
    if include_fd:
        for check_lam, tag in ((0.0, "lam0"), (lam, "lam")):
            analytic = exact_policy_gradient(mdp, policy, check_lam)
            fd = finite_difference_gradient(mdp, policy, check_lam, fd_step)
            checks.append(InequalityCheck(
                f"policy_gradient_vs_fd[{tag}]",
                gradient_relative_error(analytic, fd), 1e-5, tolerance=0.0,
            ))
        tree = EnumeratedTree(mdp, policy)
        w = tree.root_weights()
        ent_fd = tree.to_table(tree.fd_gradient(lambda: tree.entropy(w), fd_step))
        _, ent_grad = exact_entropy_and_grad(mdp, policy)
        checks.append(InequalityCheck(
            "entropy_gradient_vs_fd",
            gradient_relative_error(ent_grad, ent_fd), 1e-5, tolerance=0.0,
        ))
    checks.append(check_gradient_entropy_bound(mdp, policy))
    checks.append(check_advantage_centering(mdp, policy, 0.0))
    checks.append(check_advantage_centering(mdp, policy, lam))
    for q in mdp.queries:
        sub = check_stationary_suboptimality(mdp, policy, q)
        sub.name = f"stationary_suboptimality[q{q}]"
        checks.append(sub)
        p2 = check_regularized_stationary_bound(mdp, policy, q, lam)
        p2.name = f"regularized_stationary[q{q}]"
        checks.append(p2)
    if rng is not None:
        other = _random_policy_for(mdp, rng)
        for q in mdp.queries:
            pd = check_performance_difference(mdp, policy, other, q)
            pd.name = f"performance_difference[q{q}]"
            checks.append(pd)
    return checks


def _random_policy_for(
    mdp: TokenMdp, rng: np.random.Generator, scale: Optional[float] = None
) -> SoftmaxPolicy:
    """Random logits on every state reachable from the mdp's queries."""
    if scale is None:
        scale = float(rng.uniform(0.3, 2.0))
    policy = SoftmaxPolicy(mdp.action_count)
    level = [mdp.root_state(q) for q in mdp.queries]
    for t in range(mdp.horizon):
        for s in level:
            policy.set_logits(s, rng.normal(0.0, scale, mdp.action_count))
        if t + 1 < mdp.horizon:
            level = [s.child(b) for s in level for b in range(mdp.action_count)]
    return policy
