"""Per-user DSSL logic: DE-only statistics, exploration epochs, adaptive
exploration-rate coefficients, and the exploit-or-explore decision."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class LearnerParams:
    """Learning constants shared by all users.

    `rate_floor` keeps the 2/I term in the exploration condition; turning it
    off is a diagnostic knob only. `fixed_coefficient`, when set, replaces the
    adaptive coefficient for every channel (the uniform-exploration baseline).
    """

    L: float
    epsilon: float
    delta_lb: float
    r_max: float
    rate_floor: bool = True
    fixed_coefficient: Optional[float] = None

    def __post_init__(self):
        if not (self.L > 0 and self.epsilon > 0 and self.delta_lb > 0 and self.r_max >= 0):
            raise ValueError("L, epsilon and delta_lb must be positive and r_max non-negative")
        if not math.isfinite(self.floor):
            raise ValueError("2/I is not finite")

    @property
    def I(self) -> float:
        return 7.0 * self.epsilon**2 / (48.0 * (self.r_max + 2.0) ** 2 * self.L)

    @property
    def floor(self) -> float:
        """The 2/I term of the exploration condition (0 when disabled)."""
        return 2.0 / self.I if self.rate_floor else 0.0

    @classmethod
    def with_floor(cls, target: float, epsilon: float, delta_lb: float, r_max: float, **kw) -> "LearnerParams":
        """Choose L so that 2/I equals `target`."""
        L = 7.0 * epsilon**2 * target / (96.0 * (r_max + 2.0) ** 2)
        return cls(L=L, epsilon=epsilon, delta_lb=delta_lb, r_max=r_max, **kw)


@dataclass
class EpochPlan:
    channel: int
    target: Optional[int]  # state that ends the RE; None means no RE
    de_length: int
    epoch: int  # 1-based epoch number


@dataclass
class LearnerState:
    user: int
    users: int
    channels: int
    de_sum: np.ndarray = field(init=False)
    de_count: np.ndarray = field(init=False)
    n_O: np.ndarray = field(init=False)
    gamma: np.ndarray = field(init=False)
    rival: np.ndarray = field(init=False)
    n_I: int = 0  # completed exploitation phases
    phase: str = "init"
    channel: int = -1

    def __post_init__(self):
        K = self.channels
        self.de_sum = np.zeros(K)
        self.de_count = np.zeros(K, dtype=np.int64)
        self.n_O = np.zeros(K, dtype=np.int64)
        self.gamma = np.full(K, -1, dtype=np.int64)
        self.rival = np.full(K, np.nan)

    @property
    def means(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.de_count > 0, self.de_sum / np.maximum(self.de_count, 1), np.nan)

    def top_m(self) -> np.ndarray:
        """Estimated best-M channels, best first."""
        return np.argsort(-self.means, kind="stable")[: self.users]

    def record_de(self, channel: int, states, rates) -> None:
        rates = np.asarray(rates, float)
        if rates.size == 0:
            return
        self.de_sum[channel] += float(rates.sum())
        self.de_count[channel] += rates.size
        self.gamma[channel] = int(np.asarray(states)[-1])

    def update_rivals(self, rival_row) -> None:
        r = np.asarray(rival_row, float)
        seen = ~np.isnan(r)
        self.rival[seen] = r[seen]


def _require_samples(state: LearnerState):
    if np.any(state.de_count == 0):
        missing = np.flatnonzero(state.de_count == 0).tolist()
        raise ValueError(f"user {state.user} has no samples on channels {missing}")


def _coef(params: LearnerParams, sq_gap: float) -> float:
    return 4.0 * params.L / max(params.delta_lb**2, sq_gap - params.epsilon)


def adaptive_row_coefficient(state: LearnerState, params: LearnerParams, k: int) -> float:
    _require_samples(state)
    s = state.means
    top = state.top_m()
    if k in top:
        others = np.delete(s, k)
        sq = float(np.min((s[k] - others) ** 2)) if others.size else math.inf
    else:
        sq = float((s[k] - s[top[-1]]) ** 2)
    if math.isinf(sq):
        return 4.0 * params.L / params.delta_lb**2
    return _coef(params, sq)


def adaptive_column_coefficient(state: LearnerState, params: LearnerParams, k: int) -> float:
    r = state.rival[k]
    if np.isnan(r) or state.de_count[k] == 0:
        return 4.0 * params.L / params.delta_lb**2
    return _coef(params, float((state.means[k] - r) ** 2))


def adaptive_coefficient(state: LearnerState, params: LearnerParams, k: int) -> float:
    """Max of row and column coefficients; the column term only counts for
    channels in the estimated top-M set on which a rival was observed."""
    if params.fixed_coefficient is not None:
        return float(params.fixed_coefficient)
    row = adaptive_row_coefficient(state, params, k)
    if k in state.top_m() and not np.isnan(state.rival[k]):
        return max(row, adaptive_column_coefficient(state, params, k))
    return row


def exploration_condition(state: LearnerState, params: LearnerParams, k: int, t: float, coefficient=None) -> bool:
    """True when channel k has enough DE samples to keep exploiting at time t."""
    if t < 1:
        raise ValueError("t must be >= 1")
    D = adaptive_coefficient(state, params, k) if coefficient is None else coefficient
    return bool(state.de_count[k] > max(D, params.floor) * math.log(t))


def begin_exploration(state: LearnerState, k: int) -> EpochPlan:
    n = int(state.n_O[k])
    target = None if n == 0 else int(state.gamma[k])
    return EpochPlan(channel=k, target=target, de_length=4**n, epoch=n + 1)


def complete_exploration(state: LearnerState, plan: EpochPlan, states, rates) -> None:
    state.record_de(plan.channel, states, rates)
    state.n_O[plan.channel] += 1


def exploitation_length(n: int) -> int:
    """Length of the n-th exploitation phase (1-based)."""
    return 2 * 4 ** (n - 1)


@dataclass
class Decision:
    action: str  # "explore" | "ready"
    channel: Optional[int]
    coefficients: list
    passed: list


def phase_decision(state: LearnerState, params: LearnerParams, t: float) -> Decision:
    """Evaluate the condition on every channel; explore the lowest-index
    failing channel, otherwise report readiness to exploit."""
    coefs = [adaptive_coefficient(state, params, k) for k in range(state.channels)]
    passed = [exploration_condition(state, params, k, t, c) for k, c in enumerate(coefs)]
    for k, ok in enumerate(passed):
        if not ok:
            return Decision("explore", k, coefs, passed)
    return Decision("ready", None, coefs, passed)
