"""Deterministic exploration-rate coefficients from true means, and the
logarithmic regret upper bound evaluated numerically."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .csma import BackoffCodec, run_allocation
from .matching import optimality_gap


class InfeasibleBoundError(ValueError):
    """epsilon is too large for the bound's margins."""


def contention_sets(U) -> list:
    """T_k from an allocation run on exact means at fine backoff resolution."""
    U = np.asarray(U, float)
    codec = BackoffCodec(float(U.max()) * (1 + 1e-9) or 1.0, 2**40)
    return run_allocation(U, codec, np.random.default_rng(0)).contention


def _contended(T_k, i) -> bool:
    return i in T_k and len(T_k) >= 2


def deterministic_coefficients(U, L: float, contention=None) -> np.ndarray:
    """D_{i,k}: row coefficient, maxed with the column coefficient for
    channels in the user's best-M set on which it met a rival."""
    U = np.asarray(U, float)
    M, K = U.shape
    T = contention_sets(U) if contention is None else contention
    D = np.empty((M, K))
    for i in range(M):
        order = np.argsort(-U[i], kind="stable")
        best = set(order[:M].tolist())
        ref = U[i, order[M - 1]]
        for k in range(K):
            if k in best:
                others = np.delete(U[i], k)
                row = 4 * L / np.min((U[i, k] - others) ** 2) if others.size else math.inf
            else:
                row = 4 * L / (U[i, k] - ref) ** 2
            D[i, k] = row
            if k in best and _contended(T[k], i):
                rival = max(U[j, k] for j in T[k] if j != i)
                D[i, k] = max(row, 4 * L / (U[i, k] - rival) ** 2)
    return D


def uniform_coefficients(U, L: float) -> np.ndarray:
    """Every entry equals 4L over the squared optimal-minus-second-best assignment gap."""
    U = np.asarray(U, float)
    return np.full(U.shape, 4 * L / optimality_gap(U) ** 2)


@dataclass
class BoundTerms:
    t: float
    exploration_transient: float
    exploration_suboptimal: float
    allocation_transient: float
    allocation_suboptimal: float
    exploitation: float
    A: np.ndarray
    G: np.ndarray

    @property
    def total(self) -> float:
        return (
            self.exploration_transient
            + self.exploration_suboptimal
            + self.allocation_transient
            + self.allocation_suboptimal
            + self.exploitation
        )


def _margins(U, epsilon, contention):
    """Squared separation used for G_i and D^(max): the row gap, min'd with
    the column gap when the user contends on the channel."""
    M, K = U.shape
    sq = np.empty((M, K))
    row_sq = np.empty((M, K))
    for i in range(M):
        for k in range(K):
            others = np.delete(U[i], k)
            row_sq[i, k] = np.min((U[i, k] - others) ** 2) if others.size else math.inf
            sq[i, k] = row_sq[i, k]
            if _contended(contention[k], i):
                col = max(U[j, k] for j in range(M) if j != i)
                sq[i, k] = min(sq[i, k], (U[i, k] - col) ** 2)
    return row_sq, sq


def check_feasible(U, epsilon: float) -> None:
    U = np.asarray(U, float)
    M, K = U.shape
    for i in range(M):
        for k in range(K):
            others = np.delete(U[i], k)
            if others.size and np.min((U[i, k] - others) ** 2) - 2 * epsilon <= 0:
                raise InfeasibleBoundError(
                    f"epsilon={epsilon:g} too large: row denominator min_l (mu[{i},{k}] - mu[{i},l])^2 - 2*epsilon "
                    f"= {np.min((U[i, k] - others) ** 2) - 2 * epsilon:.6g} <= 0 for user {i}, channel {k}; "
                    f"use epsilon < {np.min((U[i, k] - others) ** 2) / 2:.6g}"
                )


def bound_terms(scenario, t: float, epsilon: Optional[float] = None) -> BoundTerms:
    """Each additive term of the regret bound at time t (natural log)."""
    if t < 2:
        raise ValueError("the bound needs t >= 2")
    U = scenario.rates.entries
    M, K = U.shape
    p = scenario.params
    eps = p.epsilon if epsilon is None else epsilon
    check_feasible(U, eps)
    b = scenario.bounds
    L = p.L
    I = 7.0 * eps**2 / (48.0 * (b.r_max + 2.0) ** 2 * L)
    dmin = scenario.rates.delta_min
    T = contention_sets(U)
    _, sq = _margins(U, eps, T)
    G = sq - 2 * eps > dmin**2
    with np.errstate(divide="ignore"):
        Dmax = 4 * L / (sq - 2 * eps)
    A = np.where(G, np.maximum(2 / I, Dmax), max(2 / I, 4 * L / dmin**2))

    S = scenario.stable.assignment
    inv = scenario.stable.inverse(K)
    mu_S = U[np.arange(M), S]
    occ = np.array([U[inv[k], k] if inv[k] >= 0 else 0.0 for k in range(K)])
    lt = math.log(t)
    n = np.floor(np.log(3 * A * lt + 1) / math.log(4)) + 1
    N = float(n.sum())
    weight = mu_S[:, None] + occ[None, :] - U
    term2 = float(np.sum((4 * A * lt + 1 + b.M_max_pair * n) * weight))
    sum_S = float(mu_S.sum())
    exploit = (b.A_max + (M * M * K + M * K) * 6 * b.X_max / b.pi_min * sum_S) * math.ceil(
        math.log(1.5 * t + 1) / math.log(4)
    )
    return BoundTerms(
        t=t,
        exploration_transient=b.A_max * N,
        exploration_suboptimal=term2,
        allocation_transient=M * M * b.A_max * N,
        allocation_suboptimal=2 * math.e * math.log(M + 1) * N * sum_S,
        exploitation=exploit,
        A=A,
        G=G,
    )


def theorem1_bound(scenario, t: float, epsilon: Optional[float] = None) -> float:
    """Upper bound on regret at time t, O(1) term dropped."""
    return bound_terms(scenario, t, epsilon).total
