"""Expected-rate matrices, stable and optimal matchings, gap statistics, regret."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment


class MatchingError(ValueError):
    pass


class TieError(MatchingError):
    """Two entries of a row (or column) are equal, so preferences are not strict."""


class ConfigurationError(MatchingError):
    pass


def _find_tie(values: np.ndarray) -> Optional[tuple[int, int]]:
    order = np.argsort(values, kind="stable")
    v = values[order]
    eq = np.flatnonzero(v[1:] == v[:-1])
    if eq.size:
        a, b = order[eq[0]], order[eq[0] + 1]
        return int(min(a, b)), int(max(a, b))
    return None


def check_distinct(U: np.ndarray) -> None:
    for i, row in enumerate(U):
        tie = _find_tie(row)
        if tie:
            raise TieError(f"user {i} rates channels {tie[0]} and {tie[1]} equally ({row[tie[0]]})")
    for k, col in enumerate(U.T):
        tie = _find_tie(col)
        if tie:
            raise TieError(f"channel {k} is rated equally ({col[tie[0]]}) by users {tie[0]} and {tie[1]}")


def jitter(U, seed: int = 0, scale: float = 1e-9) -> np.ndarray:
    """Break ties with a seeded perturbation of size scale times the smallest
    nonzero difference between entries (or times the largest entry if all are equal)."""
    U = np.asarray(U, float)
    vals = np.unique(U)
    diffs = np.diff(vals)
    ref = diffs.min() if diffs.size else (abs(vals[0]) or 1.0)
    rng = np.random.default_rng(seed)
    return U + scale * ref * rng.random(U.shape)


@dataclass(frozen=True, eq=False)
class RateMatrix:
    """M x K matrix of expected rates with per-user preference orders and gaps."""

    entries: np.ndarray
    preferences: np.ndarray = field(init=False, repr=False)
    user_gaps: np.ndarray = field(init=False, repr=False)
    delta_min: float = field(init=False)

    def __post_init__(self):
        U = np.array(self.entries, dtype=float)
        if U.ndim != 2 or U.size == 0:
            raise MatchingError(f"rate matrix must be a non-empty 2-D array, got shape {U.shape}")
        if not np.all(np.isfinite(U)) or np.any(U < 0):
            raise MatchingError("rate matrix entries must be finite and non-negative")
        check_distinct(U)
        U.setflags(write=False)
        prefs = np.argsort(-U, axis=1, kind="stable")
        prefs.setflags(write=False)
        gaps, dmin = gap_stats(U)
        object.__setattr__(self, "entries", U)
        object.__setattr__(self, "preferences", prefs)
        object.__setattr__(self, "user_gaps", gaps)
        object.__setattr__(self, "delta_min", dmin)

    @property
    def shape(self):
        return self.entries.shape

    @property
    def users(self) -> int:
        return self.entries.shape[0]

    @property
    def channels(self) -> int:
        return self.entries.shape[1]

    def top_m(self, user: int) -> np.ndarray:
        """Channels in the user's best-M set, best first."""
        return self.preferences[user, : self.users]


@dataclass(frozen=True, eq=False)
class Matching:
    """Injective user -> channel assignment."""

    assignment: np.ndarray
    value: float

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=int)
        if len(set(a.tolist())) != a.size:
            raise MatchingError(f"assignment {a.tolist()} is not injective")
        object.__setattr__(self, "assignment", a)

    def inverse(self, channels: int) -> np.ndarray:
        """Channel -> user map with -1 for unoccupied channels."""
        inv = np.full(channels, -1)
        inv[self.assignment] = np.arange(self.assignment.size)
        return inv

    def as_dict(self) -> dict:
        return {i: int(k) for i, k in enumerate(self.assignment)}

    def __eq__(self, other):
        return isinstance(other, Matching) and np.array_equal(self.assignment, other.assignment)

    def __hash__(self):
        return hash(tuple(self.assignment.tolist()))


def _as_array(U) -> np.ndarray:
    return U.entries if isinstance(U, RateMatrix) else np.asarray(U, float)


def _check_shape(U: np.ndarray) -> None:
    M, K = U.shape
    if M > K:
        raise ConfigurationError(f"{M} users but only {K} channels")


def matching_value(U, assignment) -> float:
    U = _as_array(U)
    a = np.asarray(assignment, int)
    return float(U[np.arange(a.size), a].sum())


def preference_order(U, user: int) -> np.ndarray:
    """Channels sorted by the user's expected rate, best first."""
    row = _as_array(U)[user]
    tie = _find_tie(row)
    if tie:
        raise TieError(f"user {user} rates channels {tie[0]} and {tie[1]} equally")
    return np.argsort(-row, kind="stable")


def stable_matching(U) -> Matching:
    """User-proposing deferred acceptance (Gale-Shapley).

    Channels prefer users with a higher rate on them. With strict
    preferences on both sides the result is the unique stable matching
    when preferences are aligned by the same matrix.
    """
    A = _as_array(U)
    _check_shape(A)
    check_distinct(A)
    M, K = A.shape
    prefs = np.argsort(-A, axis=1, kind="stable")
    nxt = np.zeros(M, dtype=int)
    holder = np.full(K, -1)
    free = list(range(M))
    while free:
        i = free.pop()
        k = prefs[i, nxt[i]]
        nxt[i] += 1
        j = holder[k]
        if j < 0:
            holder[k] = i
        elif A[i, k] > A[j, k]:
            holder[k] = i
            free.append(j)
        else:
            free.append(i)
    assign = np.empty(M, dtype=int)
    for k in range(K):
        if holder[k] >= 0:
            assign[holder[k]] = k
    return Matching(assign, matching_value(A, assign))


def is_stable(U, assignment) -> bool:
    """Audit: no user prefers a channel whose occupant is weaker there."""
    return not blocking_pairs(U, assignment)


def blocking_pairs(U, assignment) -> list[tuple[int, int]]:
    A = _as_array(U)
    a = np.asarray(assignment, int)
    M, K = A.shape
    occ = np.full(K, -1)
    occ[a] = np.arange(M)
    out = []
    for i in range(M):
        for k in range(K):
            if k == a[i] or A[i, k] <= A[i, a[i]]:
                continue
            j = occ[k]
            if j < 0 or A[j, k] < A[i, k]:
                out.append((i, k))
    return out


def optimal_assignment(U) -> Matching:
    """Maximum-weight injective assignment of users to channels."""
    A = _as_array(U)
    _check_shape(A)
    rows, cols = linear_sum_assignment(A, maximize=True)
    assign = np.empty(A.shape[0], dtype=int)
    assign[rows] = cols
    return Matching(assign, matching_value(A, assign))


def all_assignment_values(U) -> np.ndarray:
    """Values of every injective assignment, sorted descending (small M, K only)."""
    A = _as_array(U)
    M, K = A.shape
    vals = [A[np.arange(M), list(p)].sum() for p in itertools.permutations(range(K), M)]
    return np.sort(np.array(vals))[::-1]


def second_best_value(U) -> float:
    """Value of the best assignment other than the optimal one.

    Murty partitioning: every other assignment first departs from the optimum
    at some user i, so for each i fix users before i to their optimal
    channels, forbid the optimal edge of i, and re-solve the reduced problem.
    Equals the optimum when the optimum is not unique.
    """
    A = _as_array(U)
    _check_shape(A)
    M, K = A.shape
    best = optimal_assignment(A).assignment
    penalty = 1e6 * (1.0 + np.abs(A).max())
    out = -np.inf
    for i in range(M):
        chans = np.setdiff1d(np.arange(K), best[:i])
        if chans.size == 1:
            continue
        W = A[np.ix_(np.arange(i, M), chans)].copy()
        forbid = np.flatnonzero(chans == best[i])[0]
        W[0, forbid] -= penalty
        rows, cols = linear_sum_assignment(W, maximize=True)
        if rows[0] == 0 and cols[0] == forbid:
            continue
        fixed = float(A[np.arange(i), best[:i]].sum())
        out = max(out, fixed + float(W[rows, cols].sum()))
    if not np.isfinite(out):
        raise MatchingError("only one assignment exists; no second-best value")
    return out


def optimality_gap(U) -> float:
    """Optimal assignment value minus the second-best assignment value."""
    return optimal_assignment(U).value - second_best_value(U)


def gap_stats(U) -> tuple[np.ndarray, float]:
    """(Delta_i per user, Delta_min): smallest distance between two entries of a row."""
    A = _as_array(U)
    if A.shape[1] < 2:
        gaps = np.full(A.shape[0], np.inf)
        return gaps, math.inf
    s = np.sort(A, axis=1)
    gaps = np.diff(s, axis=1).min(axis=1)
    return gaps, float(gaps.min())


def regret(realized, U, stable: Matching, t: int) -> float:
    """t times the stable value minus the realized aggregate over slots 1..t.

    `realized` is the per-slot aggregate rate (length >= t) or its cumulative
    sum; pass a scalar to give the aggregate directly.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    r = np.asarray(realized, float)
    if r.ndim == 0:
        total = float(r)
    else:
        if r.size < t:
            raise ValueError(f"realized rates cover {r.size} slots, need {t}")
        total = float(r[:t].sum())
    return t * stable.value - total
