"""Finite-state Markov channels: stationary and spectral quantities, sampling,
and FSMC construction from a fading-gain distribution."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, optimize, signal
from scipy.sparse.csgraph import connected_components

STOCHASTIC_TOL = 1e-12


class ChannelError(ValueError):
    """Base class for channel construction and model errors."""


class TransitionMatrixError(ChannelError):
    """The transition matrix is not square, non-negative and row-stochastic."""


class ChainStructureError(ChannelError):
    """The chain is reducible or periodic, or has no spectral gap."""


class QuantizerError(ChannelError):
    pass


def validate_transition(transition) -> np.ndarray:
    P = np.array(transition, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
        raise TransitionMatrixError(f"transition must be a non-empty square matrix, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise TransitionMatrixError("transition has non-finite entries")
    if np.any(P < 0):
        r, c = np.argwhere(P < 0)[0]
        raise TransitionMatrixError(f"negative transition probability at ({r}, {c}): {P[r, c]}")
    sums = P.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > STOCHASTIC_TOL)
    if bad.size:
        r = bad[0]
        raise TransitionMatrixError(f"row {r} sums to {sums[r]!r}, not 1")
    return P


def chain_period(P: np.ndarray) -> int:
    """Period of an irreducible chain (gcd of level differences along edges)."""
    n = P.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    queue = [0]
    g = 0
    while queue:
        u = queue.pop(0)
        for v in np.flatnonzero(P[u] > 0):
            if level[v] < 0:
                level[v] = level[u] + 1
                queue.append(v)
            else:
                g = math.gcd(g, int(level[u] + 1 - level[v]))
    return g


def check_ergodic(P: np.ndarray) -> None:
    n = P.shape[0]
    if n == 1:
        return
    ncomp, labels = connected_components(P > 0, directed=True, connection="strong")
    if ncomp > 1:
        groups = [np.flatnonzero(labels == c).tolist() for c in range(ncomp)]
        raise ChainStructureError(f"chain is reducible: communicating classes {groups}")
    d = chain_period(P)
    if d != 1:
        raise ChainStructureError(f"chain is periodic with period {d}")


def stationary_distribution(transition) -> np.ndarray:
    """Stationary vector of an irreducible aperiodic chain.

    Solved densely from (P^T - I) pi = 0 with one equation replaced by the
    normalisation sum(pi) = 1.
    """
    P = validate_transition(transition)
    check_ergodic(P)
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def spectral_gap(transition, stationary: Optional[np.ndarray] = None) -> tuple[float, float]:
    """Return (lambda_2, 1 - lambda_2).

    lambda_2 is the square root of the second eigenvalue of the multiplicative
    reversibilization, i.e. the second singular value of
    D^{1/2} P D^{-1/2} with D = diag(pi). For reversible chains this is the
    second-largest eigenvalue modulus of P.
    """
    P = validate_transition(transition)
    if P.shape[0] == 1:
        return 0.0, 1.0
    pi = stationary_distribution(P) if stationary is None else np.asarray(stationary, float)
    root = np.sqrt(pi)
    S = root[:, None] * P / root[None, :]
    try:
        sv = np.linalg.svd(S, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise ChainStructureError(f"singular value decomposition failed: {exc}") from exc
    lam = float(min(max(sv[1], 0.0), 1.0))
    gap = 1.0 - lam
    if gap <= 1e-12:
        raise ChainStructureError(
            f"reversibilized chain has no spectral gap (second singular value {sv[1]:.6g})"
        )
    return lam, gap


def mean_hitting_times(transition) -> np.ndarray:
    """Matrix H with H[x, y] = expected steps to first reach y from x (H[y, y] = 0)."""
    P = validate_transition(transition)
    n = P.shape[0]
    H = np.zeros((n, n))
    for y in range(n):
        keep = [x for x in range(n) if x != y]
        if not keep:
            continue
        Q = P[np.ix_(keep, keep)]
        try:
            h = np.linalg.solve(np.eye(n - 1) - Q, np.ones(n - 1))
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"hitting-time system for target {y} is singular") from exc
        H[keep, y] = h
    return H


@dataclass(frozen=True, eq=False)
class MarkovChannel:
    """One user-channel pair: rate values per state and the transition matrix.

    Derived quantities are computed once at construction.
    """

    states: np.ndarray
    transition: np.ndarray
    stationary: np.ndarray = field(init=False, repr=False)
    second_eigenvalue: float = field(init=False)
    eigen_gap: float = field(init=False)
    hitting: np.ndarray = field(init=False, repr=False)
    mean_rate: float = field(init=False)

    def __post_init__(self):
        states = np.array(self.states, dtype=float).reshape(-1)
        P = validate_transition(self.transition)
        if states.size != P.shape[0]:
            raise ChannelError(f"{states.size} state rates for a {P.shape[0]}-state transition matrix")
        if not np.all(np.isfinite(states)) or np.any(states < 0):
            raise ChannelError("state rates must be finite and non-negative")
        pi = stationary_distribution(P)
        lam, gap = spectral_gap(P, pi)
        states.setflags(write=False)
        P.setflags(write=False)
        pi.setflags(write=False)
        H = mean_hitting_times(P)
        H.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "stationary", pi)
        object.__setattr__(self, "second_eigenvalue", lam)
        object.__setattr__(self, "eigen_gap", gap)
        object.__setattr__(self, "hitting", H)
        object.__setattr__(self, "mean_rate", float(states @ pi))

    @classmethod
    def gilbert_elliott(cls, p01: float, p10: float, r1: float = 1.0, r0: float = 0.0) -> "MarkovChannel":
        """Two-state good/bad channel; state 0 is bad (rate r0), state 1 good (rate r1)."""
        return cls([r0, r1], [[1 - p01, p01], [p10, 1 - p10]])

    @property
    def n_states(self) -> int:
        return self.states.size

    @property
    def max_hitting_time(self) -> float:
        return float(self.hitting.max()) if self.n_states > 1 else 0.0

    def step(self, state: int, rng: np.random.Generator) -> int:
        return step(self, state, rng)

    def sample_path(self, length: int, rng: np.random.Generator, start: Optional[int] = None) -> np.ndarray:
        return sample_path(self, length, rng, start)


def step(channel: MarkovChannel, state: int, rng: np.random.Generator) -> int:
    """Draw the next state from row `state` of the transition matrix."""
    if not 0 <= state < channel.n_states:
        raise IndexError(f"state {state} out of range for a {channel.n_states}-state channel")
    cum = np.cumsum(channel.transition[state])
    nxt = int(np.searchsorted(cum, rng.random(), side="right"))
    return min(nxt, channel.n_states - 1)


def sample_path(
    channel: MarkovChannel, length: int, rng: np.random.Generator, start: Optional[int] = None
) -> np.ndarray:
    """State indices x_0..x_{length-1}; x_0 drawn from the stationary law unless given."""
    n = channel.n_states
    path = np.empty(length, dtype=np.int16)
    if length == 0:
        return path
    if start is None:
        start = int(rng.choice(n, p=channel.stationary))
    if n == 1:
        path[:] = 0
        return path
    # successor table: where the chain goes from each state at each step
    cum = np.cumsum(channel.transition, axis=1)
    cum[:, -1] = 1.0
    u = rng.random((length - 1, 1))
    succ = np.empty((length - 1, n), dtype=np.int16)
    for x in range(n):
        succ[:, x] = np.searchsorted(cum[x], u[:, 0], side="right")
    flat = succ.ravel().tolist()
    out = [0] * length
    x = int(start)
    out[0] = x
    base = 0
    for t in range(1, length):
        x = flat[base + x]
        out[t] = x
        base += n
    path[:] = out
    return path


@dataclass(frozen=True)
class FadingQuantizer:
    """Equal-probability partition of a channel-gain range into N states."""

    n_states: int
    thresholds: np.ndarray  # tau_0 < ... < tau_N, tau_N = inf
    rates: np.ndarray

    def classify(self, gains) -> np.ndarray:
        return np.searchsorted(self.thresholds[1:-1], np.asarray(gains, float), side="right").astype(np.int16)


def quantize_fading(
    dist=None,
    n_states: int = 2,
    *,
    cdf: Optional[Callable[[float], float]] = None,
    ppf: Optional[Callable[[float], float]] = None,
    lower: float = 0.0,
    rates: Optional[Sequence[float]] = None,
) -> FadingQuantizer:
    """Partition a gain distribution into `n_states` equiprobable intervals.

    Accepts a frozen scipy distribution, or a bare `ppf` and/or `cdf`.
    Thresholds are ppf(n/N); each state's rate defaults to the conditional
    mean of its interval, computed by quadrature.
    """
    N = int(n_states)
    if N < 2:
        raise QuantizerError("need at least 2 states")
    if dist is not None:
        cdf = cdf or dist.cdf
        ppf = ppf or dist.ppf
        lower = float(dist.support()[0])
    if cdf is None and ppf is None:
        raise QuantizerError("supply a distribution, a cdf or an inverse cdf")

    levels = np.arange(1, N) / N
    if ppf is not None:
        inner = np.array([float(ppf(q)) for q in levels])
    else:
        inner = np.array([_invert_cdf(cdf, q, lower) for q in levels])
    taus = np.concatenate([[lower], inner, [np.inf]])
    for n in range(N):
        if not taus[n] < taus[n + 1]:
            raise QuantizerError(
                f"CDF is flat over [{taus[n]}, {taus[n + 1]}]: levels {n}/{N} and {n + 1}/{N} are not separable"
            )
    if cdf is not None:
        for n, (tau, q) in enumerate(zip(inner, levels), start=1):
            h = 1e-6 * max(1.0, abs(tau))
            if min(abs(cdf(tau + h) - q), abs(q - cdf(tau - h))) <= 1e-15:
                raise QuantizerError(f"CDF is flat around tau_{n} = {tau} (level {q}); threshold is not unique")

    if rates is None:
        rates = np.array([_interval_mean(taus[n], taus[n + 1], n, N, cdf, ppf) for n in range(N)])
    else:
        rates = np.asarray(rates, float)
        if rates.size != N:
            raise QuantizerError(f"{rates.size} explicit rates for {N} states")
    return FadingQuantizer(N, taus, rates)


def _invert_cdf(cdf, q, lower):
    hi = max(1.0, lower + 1.0)
    while cdf(hi) < q:
        hi *= 2.0
        if hi > 1e300:
            raise QuantizerError(f"cannot bracket the {q} quantile")
    return optimize.brentq(lambda x: cdf(x) - q, lower, hi, xtol=1e-14, rtol=1e-14, maxiter=500)


def _interval_mean(a, b, n, N, cdf, ppf):
    if ppf is not None:
        val, _ = integrate.quad(ppf, n / N, (n + 1) / N, limit=200, epsabs=1e-13, epsrel=1e-12)
        return val * N
    # E[X | a <= X < b] = a + int_a^b (F(b) - F(x)) dx / (F(b) - F(a))
    Fb = 1.0 if np.isinf(b) else cdf(b)
    val, _ = integrate.quad(lambda x: Fb - cdf(x), a, b, limit=200)
    return a + val / (Fb - cdf(a))


def gauss_markov_rayleigh_trace(
    length: int, scale: float, correlation: float, rng: np.random.Generator
) -> np.ndarray:
    """Rayleigh-distributed gain trace with first-order (AR(1)) time correlation.

    The complex Gaussian tap follows h[t+1] = rho h[t] + sqrt(1 - rho^2) w[t],
    started in stationarity, so |h| has the Rayleigh(scale) marginal.
    """
    if not 0.0 <= correlation < 1.0:
        raise ValueError("correlation must lie in [0, 1)")
    rho = float(correlation)
    w = rng.normal(scale=scale, size=(2, length))
    h_prev = rng.normal(scale=scale, size=(2, 1))  # stationary h[-1]
    h, _ = signal.lfilter([math.sqrt(1.0 - rho**2)], [1.0, -rho], w, axis=1, zi=rho * h_prev)
    return np.hypot(h[0], h[1])


def estimate_transitions(trace, quantizer: FadingQuantizer, min_factor: int = 100) -> MarkovChannel:
    """Row-normalised transition counts of a quantized gain trace."""
    trace = np.asarray(trace, float)
    N = quantizer.n_states
    if trace.size < min_factor * N * N:
        raise ValueError(f"trace of length {trace.size} is shorter than {min_factor}*N^2 = {min_factor * N * N}")
    s = quantizer.classify(trace)
    visited = np.bincount(s, minlength=N)
    missing = np.flatnonzero(visited == 0).tolist()
    if missing:
        raise ValueError(f"states never visited by the trace: {missing}")
    counts = np.zeros((N, N))
    np.add.at(counts, (s[:-1], s[1:]), 1.0)
    rows = counts.sum(axis=1)
    dead = np.flatnonzero(rows == 0).tolist()
    if dead:
        raise ValueError(f"states never left within the trace: {dead}")
    return MarkovChannel(quantizer.rates, counts / rows[:, None])


@dataclass(frozen=True)
class SystemBounds:
    pi_min: float
    pi_hat_max: float
    X_max: int
    x_max: float
    r_max: float
    lambda_max: float
    lambda_bar_min: float
    M_max_pair: np.ndarray = field(repr=False)
    M_max: float
    A_max: float
    L: float


def compute_bounds(channels) -> SystemBounds:
    """System-wide constants over an M x K bank of channels."""
    flat = [ch for row in channels for ch in row]
    if not flat:
        raise ValueError("empty channel bank")
    pis = [ch.stationary for ch in flat]
    pi_min = min(float(p.min()) for p in pis)
    pi_hat_max = max(float(np.maximum(p, 1 - p).max()) for p in pis)
    X_max = max(ch.n_states for ch in flat)
    x_max = max(float(ch.states.max()) for ch in flat)
    r_max = max(float(ch.states.sum()) for ch in flat)
    lambda_max = max(ch.second_eigenvalue for ch in flat)
    lambda_bar_min = 1.0 - lambda_max
    M_pair = np.array([[ch.max_hitting_time for ch in row] for row in channels])
    A_max = max(float(ch.states.sum() / ch.stationary.min()) for ch in flat)
    L = 28.0 * x_max**2 * r_max**2 * pi_hat_max**2 / lambda_bar_min
    return SystemBounds(
        pi_min=pi_min,
        pi_hat_max=pi_hat_max,
        X_max=X_max,
        x_max=x_max,
        r_max=r_max,
        lambda_max=lambda_max,
        lambda_bar_min=lambda_bar_min,
        M_max_pair=M_pair,
        M_max=float(M_pair.max()),
        A_max=A_max,
        L=L,
    )
