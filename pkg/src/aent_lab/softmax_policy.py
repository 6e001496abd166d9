"""Tabular softmax policies over token states, with clamped-entropy machinery.

A policy keeps one float64 logit row per visited state and turns rows into
distributions with a max-subtracted softmax. The clamped variants restrict a
state's distribution to its highest-probability actions (a count fraction by
default, a probability-mass nucleus as an ablation) and renormalize; entropy
and its exact logit gradient are available for both the full and the clamped
distribution. Rows are created on demand so a policy over an exponentially
large state space only materializes the states it touches.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

# Floor applied inside log() so that 0 * log 0 contributes exactly 0.
PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class TokenState:
    """A root query plus the tuple of action tokens emitted so far."""

    query_index: int
    actions: tuple[int, ...] = ()

    @property
    def depth(self) -> int:
        return len(self.actions)

    def child(self, action: int) -> "TokenState":
        return TokenState(self.query_index, self.actions + (int(action),))


@dataclass(frozen=True)
class ClampConfig:
    """Which actions a state's clamped distribution retains.

    mode "count" keeps the ceil((1 - p) * |A|) highest-probability actions;
    mode "mass" keeps the smallest high-probability prefix whose total mass
    reaches (1 - p). Probability ties always break toward the lower action
    index. p = 0 retains everything in either mode.
    """

    p: float = 0.0
    mode: str = "count"

    def __post_init__(self) -> None:
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"clamp fraction p must lie in [0, 1), got {self.p}")
        if self.mode not in ("count", "mass"):
            raise ValueError(f"unknown clamp mode {self.mode!r}")

    def retained_count(self, action_count: int) -> int:
        # round() guards the float product so exact rationals like
        # 0.02 * 100000 come out as 2000, not 2001.
        k = math.ceil(round((1.0 - self.p) * action_count, 9))
        return min(max(k, 1), action_count)


@dataclass
class EntropyReport:
    """Token-mean entropies of a batch of states under one policy."""

    full_entropy: float
    clamped_entropy: float
    retained_count: int
    state_count: int
    per_state: Optional[list[tuple[float, float]]] = None  # (full, clamped)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy_from_probs(probs: np.ndarray) -> float:
    return float(-np.sum(probs * np.log(np.maximum(probs, PROB_FLOOR))))


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest-probability entries, ordered by descending
    probability with ties broken toward the lower index. Deterministic."""
    n = probs.shape[0]
    if k >= n:
        return np.lexsort((np.arange(n), -probs))
    part = np.argpartition(-probs, k - 1)[:k]
    threshold = probs[part].min()
    above = np.flatnonzero(probs > threshold)
    ties = np.flatnonzero(probs == threshold)[: k - above.size]
    order = np.lexsort((above, -probs[above]))
    return np.concatenate([above[order], ties])


def mass_prefix_indices(probs: np.ndarray, mass: float) -> np.ndarray:
    """Smallest descending-probability prefix with cumulative mass >= mass."""
    n = probs.shape[0]
    order = np.lexsort((np.arange(n), -probs))
    cum = np.cumsum(probs[order])
    m = int(np.searchsorted(cum, mass - 1e-12)) + 1
    return order[: min(m, n)]


class SoftmaxPolicy:
    """Growable table of logit rows keyed by token state.

    `row_init(state) -> array of length action_count` seeds a row the first
    time a state is touched; the default seeds zeros (a uniform policy). The
    initializer must be deterministic per state for runs to be reproducible.
    """

    def __init__(
        self,
        action_count: int,
        row_init: Optional[Callable[[TokenState], np.ndarray]] = None,
    ):
        if action_count < 2:
            raise ValueError("need at least two actions")
        self.action_count = int(action_count)
        self._index: dict[TokenState, int] = {}
        self._logits = np.zeros((4, self.action_count), dtype=np.float64)
        self._row_init = row_init

    # -- row bookkeeping ---------------------------------------------------

    def __contains__(self, state: TokenState) -> bool:
        return state in self._index

    def __len__(self) -> int:
        return len(self._index)

    def states(self) -> list[TokenState]:
        """Visited states in registration order (the checkpoint row order)."""
        return list(self._index)

    def _row(self, state: TokenState) -> np.ndarray:
        i = self._index.get(state)
        if i is None:
            i = len(self._index)
            if i == self._logits.shape[0]:
                grown = np.zeros((2 * i, self.action_count), dtype=np.float64)
                grown[:i] = self._logits
                self._logits = grown
            if self._row_init is not None:
                row = np.asarray(self._row_init(state), dtype=np.float64)
                if row.shape != (self.action_count,):
                    raise ValueError("row_init returned a wrong-shaped row")
                self._logits[i] = row
            else:
                self._logits[i] = 0.0
            self._index[state] = i
        return self._logits[i]

    def logits(self, state: TokenState) -> np.ndarray:
        return self._row(state).copy()

    def set_logits(self, state: TokenState, values: np.ndarray) -> None:
        row = np.asarray(values, dtype=np.float64)
        if row.shape != (self.action_count,):
            raise ValueError("logit row has wrong shape")
        self._row(state)[:] = row

    def add_to_logits(self, state: TokenState, delta: np.ndarray) -> None:
        self._row(state)[:] += delta

    def copy(self) -> "SoftmaxPolicy":
        dup = SoftmaxPolicy(self.action_count, self._row_init)
        dup._index = dict(self._index)
        dup._logits = self._logits[: len(self._index)].copy()
        if dup._logits.shape[0] == 0:
            dup._logits = np.zeros((4, self.action_count), dtype=np.float64)
        return dup

    # -- distributions -----------------------------------------------------

    def probs(self, state: TokenState) -> np.ndarray:
        return softmax(self._row(state))

    def log_probs(self, state: TokenState) -> np.ndarray:
        return log_softmax(self._row(state))

    def clamped_set(self, state: TokenState, clamp: ClampConfig) -> np.ndarray:
        """Retained action indices, ordered by descending probability (ties
        toward the lower index)."""
        p = self.probs(state)
        if clamp.mode == "mass":
            return mass_prefix_indices(p, 1.0 - clamp.p)
        return top_k_indices(p, clamp.retained_count(self.action_count))

    def _clamped_dist(self, state: TokenState, clamp: ClampConfig):
        """(indices or None, renormalized probs, their logs); None means all
        actions are retained and the full distribution applies unchanged."""
        row = self._row(state)
        if clamp.mode == "count":
            k = clamp.retained_count(self.action_count)
            if k >= self.action_count:
                return None, softmax(row), log_softmax(row)
            idx = top_k_indices(softmax(row), k)
        else:
            idx = mass_prefix_indices(softmax(row), 1.0 - clamp.p)
            if idx.size == self.action_count:
                return None, softmax(row), log_softmax(row)
        sub = row[idx]
        return idx, softmax(sub), log_softmax(sub)

    def clamped_probs(self, state: TokenState, clamp: ClampConfig) -> np.ndarray:
        """Full-length distribution: renormalized on the retained set, zero off
        it."""
        idx, q, _ = self._clamped_dist(state, clamp)
        if idx is None:
            return q
        out = np.zeros(self.action_count, dtype=np.float64)
        out[idx] = q
        return out

    # -- entropies and gradients --------------------------------------------

    def state_entropy(self, state: TokenState) -> float:
        return entropy_from_probs(self.probs(state))

    def clamped_state_entropy(self, state: TokenState, clamp: ClampConfig) -> float:
        _, q, _ = self._clamped_dist(state, clamp)
        return entropy_from_probs(q)

    def grad_log_prob(self, state: TokenState, action: int) -> np.ndarray:
        """d log pi(action | state) / d logits(state): one-hot minus probs."""
        g = -self.probs(state)
        g[action] += 1.0
        return g

    def clamped_entropy_grad(self, state: TokenState, clamp: ClampConfig) -> np.ndarray:
        """Exact gradient of the state's clamped entropy w.r.t. its logits.

        Retained action a gets -q_a (log q_a + H), others 0 (the retained set
        is held fixed, i.e. selection is not differentiated through).
        Components sum to zero.
        """
        idx, q, logq = self._clamped_dist(state, clamp)
        h = float(-np.dot(q, logq))
        comp = -q * (logq + h)
        if idx is None:
            return comp
        g = np.zeros(self.action_count, dtype=np.float64)
        g[idx] = comp
        return g


def entropy_report(
    policy: SoftmaxPolicy,
    states: Iterable[TokenState],
    clamp: ClampConfig,
    include_per_state: bool = False,
) -> EntropyReport:
    """Token-mean full and clamped entropy over the given states (repeats
    count with multiplicity, matching the empirical visitation measure)."""
    ordered = list(states)
    if not ordered:
        raise ValueError("entropy report needs at least one state")
    # Entropies depend only on the state's logit row, so compute each
    # distinct state once and weight by its visit count.
    counts = Counter(ordered)
    unique_pairs = {
        s: (policy.state_entropy(s), policy.clamped_state_entropy(s, clamp))
        for s in counts
    }
    total = len(ordered)
    full = sum(c * unique_pairs[s][0] for s, c in counts.items()) / total
    clamped = sum(c * unique_pairs[s][1] for s, c in counts.items()) / total
    return EntropyReport(
        full_entropy=float(full),
        clamped_entropy=float(clamped),
        retained_count=clamp.retained_count(policy.action_count),
        state_count=total,
        per_state=[unique_pairs[s] for s in ordered] if include_per_state else None,
    )


class GradientTable:
    """Sparse gradient over logit rows, keyed by token state."""

    def __init__(self, action_count: int):
        self.action_count = int(action_count)
        self._rows: dict[TokenState, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._rows)

    def __contains__(self, state: TokenState) -> bool:
        return state in self._rows

    def row(self, state: TokenState) -> np.ndarray:
        r = self._rows.get(state)
        if r is None:
            r = np.zeros(self.action_count, dtype=np.float64)
            self._rows[state] = r
        return r

    def add(self, state: TokenState, values: np.ndarray) -> None:
        self.row(state)[:] += values

    def add_scaled(self, other: "GradientTable", scale: float) -> None:
        for state, values in other.items():
            self.row(state)[:] += scale * values

    def scale(self, factor: float) -> "GradientTable":
        for r in self._rows.values():
            r *= factor
        return self

    def items(self):
        return self._rows.items()

    def states(self) -> list[TokenState]:
        return list(self._rows)

    def norm(self) -> float:
        total = 0.0
        for r in self._rows.values():
            total += float(np.dot(r, r))
        return math.sqrt(total)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(r)) for r in self._rows.values())

    def max_abs_difference(self, other: "GradientTable") -> float:
        worst = 0.0
        for state in set(self._rows) | set(other._rows):
            a = self._rows.get(state)
            b = other._rows.get(state)
            if a is None:
                worst = max(worst, float(np.abs(b).max(initial=0.0)))
            elif b is None:
                worst = max(worst, float(np.abs(a).max(initial=0.0)))
            else:
                worst = max(worst, float(np.abs(a - b).max(initial=0.0)))
        return worst

    def apply_ascent(self, policy: SoftmaxPolicy, step_size: float) -> None:
        for state, values in self._rows.items():
            policy.add_to_logits(state, step_size * values)

    def copy(self) -> "GradientTable":
        dup = GradientTable(self.action_count)
        dup._rows = {s: r.copy() for s, r in self._rows.items()}
        return dup


def save_checkpoint(policy: SoftmaxPolicy, path: str) -> None:
    """Binary logit snapshot: int64 header [action_count, state_count], then
    the visited rows as row-major float64 in registration order."""
    n = len(policy)
    with open(path, "wb") as f:
        np.asarray([policy.action_count, n], dtype=np.int64).tofile(f)
        policy._logits[:n].tofile(f)


def read_checkpoint(path: str) -> tuple[int, np.ndarray]:
    """(action_count, logit rows) from a checkpoint file, bit-exact."""
    with open(path, "rb") as f:
        header = np.fromfile(f, dtype=np.int64, count=2)
        if header.size != 2:
            raise ValueError("truncated checkpoint header")
        action_count, n = (int(header[0]), int(header[1]))
        rows = np.fromfile(f, dtype=np.float64, count=action_count * n)
    if rows.size != action_count * n:
        raise ValueError("truncated checkpoint payload")
    return action_count, rows.reshape(n, action_count)
