"""Time-slotted multi-user simulation: restless channel evolution, collision
semantics, DSSL and baseline policies, regret traces and Monte Carlo runs."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .csma import BackoffCodec, run_allocation
from .learner import (
    LearnerParams,
    LearnerState,
    begin_exploration,
    complete_exploration,
    exploitation_length,
    phase_decision,
)
from .markov import SystemBounds, compute_bounds
from .matching import Matching, RateMatrix, optimal_assignment, stable_matching

EXPLORE, ALLOCATE, EXPLOIT = 0, 1, 2
PHASE_NAMES = ("exploration", "allocation", "exploitation")
POLICIES = ("dssl", "uniform-exploration", "oracle-stable", "oracle-optimal", "random-access")
WORKERS_ENV = "DSSL_WORKERS"


class EngineError(RuntimeError):
    pass


class ProtocolViolation(EngineError):
    """A policy chose a channel outside 0..K-1."""


class LivelockError(EngineError):
    """No allocation happened within the configured slot budget."""


@dataclass(frozen=True, eq=False)
class Scenario:
    """An M x K channel bank with learning constants and run settings."""

    channels: tuple
    params: LearnerParams
    codec: BackoffCodec
    horizon: int = 10_000
    runs: int = 10
    seed: int = 0
    checkpoints: Optional[tuple] = None
    policy: str = "dssl"
    name: str = ""
    livelock_budget: int = 1_000_000
    rates: RateMatrix = field(init=False, repr=False)
    bounds: SystemBounds = field(init=False, repr=False)
    stable: Matching = field(init=False, repr=False)
    optimal: Matching = field(init=False, repr=False)

    def __post_init__(self):
        bank = tuple(tuple(row) for row in self.channels)
        if not bank or not bank[0]:
            raise ValueError("empty channel bank")
        K = len(bank[0])
        if any(len(row) != K for row in bank):
            raise ValueError("channel bank rows have different lengths")
        if len(bank) > K:
            raise ValueError(f"{len(bank)} users but only {K} channels")
        object.__setattr__(self, "channels", bank)
        U = RateMatrix(np.array([[ch.mean_rate for ch in row] for row in bank]))
        object.__setattr__(self, "rates", U)
        object.__setattr__(self, "bounds", compute_bounds(bank))
        object.__setattr__(self, "stable", stable_matching(U))
        object.__setattr__(self, "optimal", optimal_assignment(U))

    @property
    def M(self) -> int:
        return len(self.channels)

    @property
    def K(self) -> int:
        return len(self.channels[0])

    def with_params(self, **kw) -> "Scenario":
        from dataclasses import replace

        return replace(self, params=replace(self.params, **kw))


@dataclass
class RegretTrace:
    """Cumulative quantities at checkpoint times t (1-based slot counts)."""

    checkpoints: np.ndarray
    stable_value: float
    aggregate: np.ndarray  # cumulative realized aggregate rate
    per_user: np.ndarray  # M x C cumulative realized rate per user
    phase_slots: np.ndarray  # M x 3 x C slot counts per phase
    extras: dict = field(default_factory=dict)

    @property
    def regret(self) -> np.ndarray:
        return self.checkpoints * self.stable_value - self.aggregate

    def at(self, t: int) -> int:
        idx = np.flatnonzero(self.checkpoints == t)
        if not idx.size:
            raise KeyError(f"{t} is not a checkpoint")
        return int(idx[0])

    def user_rates(self, t0: int, t1: int) -> np.ndarray:
        """Per-user average realized rate over slots t0+1..t1 (both checkpoints)."""
        a, b = self.at(t0), self.at(t1)
        return (self.per_user[:, b] - self.per_user[:, a]) / (t1 - t0)


def default_checkpoints(horizon: int) -> np.ndarray:
    pts = [2**j for j in range(int(math.log2(horizon)) + 1)]
    if pts[-1] != horizon:
        pts.append(horizon)
    return np.array(pts, dtype=np.int64)


def _seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def channel_trajectories(scenario: Scenario, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """(M, K, T) state indices; every chain moves every slot from a stationary start."""
    M, K = scenario.M, scenario.K
    out = np.empty((M, K, horizon), dtype=np.int16)
    for i in range(M):
        for k in range(K):
            out[i, k] = scenario.channels[i][k].sample_path(horizon, rng)
    return out


def _value_table(scenario: Scenario) -> np.ndarray:
    X = scenario.bounds.X_max
    V = np.zeros((scenario.M, scenario.K, X))
    for i, row in enumerate(scenario.channels):
        for k, ch in enumerate(row):
            V[i, k, : ch.n_states] = ch.states
    return V


@dataclass
class OpenLoopPolicy:
    """A policy whose choices do not depend on observations.

    `choose(scenario, horizon, rng)` returns a (T, M) integer array.
    """

    name: str
    choose: Callable[[Scenario, int, np.random.Generator], np.ndarray]


def _fixed(assign):
    return lambda sc, T, rng: np.broadcast_to(np.asarray(assign, int), (T, sc.M))


def fixed_channel_policy(channel) -> OpenLoopPolicy:
    """Every user (or user i, if a list is given) stays on one channel forever."""
    return OpenLoopPolicy(f"fixed-{channel}", lambda sc, T, rng: np.broadcast_to(np.asarray(channel, int), (T, sc.M)))


def resolve_policy(policy, scenario: Scenario):
    if isinstance(policy, OpenLoopPolicy):
        return policy
    if policy in ("dssl", "uniform-exploration"):
        return policy
    if policy == "oracle-stable":
        return OpenLoopPolicy(policy, _fixed(scenario.stable.assignment))
    if policy == "oracle-optimal":
        return OpenLoopPolicy(policy, _fixed(scenario.optimal.assignment))
    if policy == "random-access":
        return OpenLoopPolicy(policy, lambda sc, T, rng: rng.integers(0, sc.K, size=(T, sc.M)))
    raise ValueError(f"unknown policy {policy!r}; expected one of {', '.join(POLICIES)}")


def uniform_coefficient(scenario: Scenario) -> float:
    """4L divided by the squared gap between the best and second-best assignment values."""
    from .matching import optimality_gap

    gap = optimality_gap(scenario.rates)
    if gap <= 0:
        raise ValueError("optimal assignment is not unique; the uniform coefficient is undefined")
    return 4.0 * scenario.params.L / gap**2


def _trace(scenario, T, checkpoints, per_user, phase, extras) -> RegretTrace:
    cps = np.asarray(checkpoints, dtype=np.int64)
    if cps.size and (cps.min() < 1 or cps.max() > T):
        raise ValueError(f"checkpoints must lie in [1, {T}]")
    cum_user = np.cumsum(per_user, axis=1)
    idx = cps - 1
    slots = np.stack([np.cumsum(phase == p, axis=1)[:, idx] for p in range(3)], axis=1)
    user_cp = cum_user[:, idx]
    return RegretTrace(cps, scenario.stable.value, user_cp.sum(axis=0), user_cp, slots, extras)


def run_episode(
    scenario: Scenario,
    policy=None,
    horizon: Optional[int] = None,
    seed=None,
    *,
    checkpoints=None,
    record_events: bool = True,
    record_paths: bool = False,
    record_states: bool = False,
):
    """Simulate one run; returns (RegretTrace, event list)."""
    policy = scenario.policy if policy is None else policy
    T = int(scenario.horizon if horizon is None else horizon)
    if T < 1:
        raise ValueError("horizon must be >= 1")
    seed = scenario.seed if seed is None else seed
    cps = default_checkpoints(T) if checkpoints is None else np.asarray(checkpoints, dtype=np.int64)
    ss = _seed_sequence(seed)
    ch_ss, alloc_ss, pol_ss = ss.spawn(3)
    traj = channel_trajectories(scenario, T, np.random.default_rng(ch_ss))
    V = _value_table(scenario)
    pol = resolve_policy(policy, scenario)
    if isinstance(pol, OpenLoopPolicy):
        per_user, phase, extras, events = _run_open_loop(scenario, pol, T, traj, V, np.random.default_rng(pol_ss))
    else:
        params = scenario.params
        if pol == "uniform-exploration":
            from dataclasses import replace

            params = replace(params, fixed_coefficient=uniform_coefficient(scenario))
        sim = _DSSLRun(scenario, params, T, traj, V, np.random.default_rng(alloc_ss), record_events, record_paths)
        sim.run()
        per_user, phase, extras, events = sim.per_user, sim.phase, sim.extras(), sim.events
    if record_states:
        extras["states"] = traj
    return _trace(scenario, T, cps, per_user, phase, extras), events


def _run_open_loop(scenario, pol, T, traj, V, rng):
    M, K = scenario.M, scenario.K
    c = np.asarray(pol.choose(scenario, T, rng))
    if c.shape != (T, M):
        raise ProtocolViolation(f"policy {pol.name} returned shape {c.shape}, expected {(T, M)}")
    bad = np.argwhere((c < 0) | (c >= K))
    if bad.size:
        t, i = bad[0]
        raise ProtocolViolation(f"policy {pol.name} chose channel {c[t, i]} for user {i} at slot {t + 1}; K = {K}")
    slots = np.arange(T)
    per_user = np.empty((M, T))
    collided = np.zeros((T, M), dtype=bool)
    for i in range(M):
        per_user[i] = V[i, c[:, i], traj[i, c[:, i], slots]]
        for j in range(i + 1, M):
            same = c[:, i] == c[:, j]
            collided[:, i] |= same
            collided[:, j] |= same
    per_user[collided.T] = 0.0
    phase = np.full((M, T), EXPLOIT, dtype=np.int8)
    return per_user, phase, {"policy": pol.name}, []


@dataclass
class _Agent:
    learner: LearnerState
    mode: str = "init"  # explore | exploit | wait
    channel: int = -1
    end: float = 0
    plan: object = None
    de_start: int = 0
    started: int = 0


class _DSSLRun:
    """Event-driven DSSL simulation over pre-generated channel trajectories.

    Time advances from one phase boundary to the next; between boundaries
    every user's channel is fixed, so rewards are accumulated per segment.
    """

    def __init__(self, sc: Scenario, params: LearnerParams, T, traj, V, rng, record_events, record_paths):
        self.sc, self.params, self.T, self.traj, self.V, self.rng = sc, params, T, traj, V, rng
        self.M, self.K = sc.M, sc.K
        self.per_user = np.zeros((self.M, T))
        self.phase = np.full((self.M, T), EXPLOIT, dtype=np.int8)
        self.agents = [_Agent(LearnerState(i, self.M, self.K)) for i in range(self.M)]
        self.record_events = record_events
        self.events: list = []
        self.paths = [[[] for _ in range(self.K)] for _ in range(self.M)] if record_paths else None
        self.allocations = 0
        self.s1_rounds: list = []
        self.alloc_slots = 0
        self.last_alloc = 0
        self.pending = False
        self.interrupts = 0

    # ---- bookkeeping
    def log(self, **rec):
        if self.record_events:
            self.events.append(rec)

    def extras(self) -> dict:
        out = {
            "de_counts": np.array([a.learner.de_count for a in self.agents]),
            "n_O": np.array([a.learner.n_O for a in self.agents]),
            "n_I": np.array([a.learner.n_I for a in self.agents]),
            "means": np.array([a.learner.means for a in self.agents]),
            "allocations": self.allocations,
            "s1_rounds": list(self.s1_rounds),
            "interrupts": self.interrupts,
            "final_assignment": np.array([a.channel for a in self.agents]),
        }
        if self.paths is not None:
            out["de_paths"] = [[np.concatenate(p) if p else np.empty(0, np.int16) for p in row] for row in self.paths]
        return out

    def _segment(self, a: int, b: int):
        """Accumulate rewards and phase tags for slots a..b-1."""
        if b <= a:
            return
        users_on: dict[int, list[int]] = {}
        for i, ag in enumerate(self.agents):
            users_on.setdefault(ag.channel, []).append(i)
            if ag.mode == "explore":
                self.phase[i, a:b] = EXPLORE
        for k, users in users_on.items():
            if len(users) == 1:
                i = users[0]
                self.per_user[i, a:b] = self.V[i, k, self.traj[i, k, a:b]]

    # ---- phases
    def _initialize(self) -> int:
        K, T = self.K, self.T
        n = min(K, T)
        for j in range(n):
            for i, ag in enumerate(self.agents):
                k = (i + j) % K
                s = int(self.traj[i, k, j])
                self.per_user[i, j] = self.V[i, k, s]
                self.phase[i, j] = EXPLORE
                if n == K:
                    plan = begin_exploration(ag.learner, k)
                    complete_exploration(ag.learner, plan, [s], [self.V[i, k, s]])
                    if self.paths is not None:
                        self.paths[i][k].append(np.array([s], dtype=np.int16))
        self.log(slot=1, event="initialize", slots=n)
        return n

    def _start_exploration(self, i: int, k: int, now: int):
        ag = self.agents[i]
        plan = begin_exploration(ag.learner, k)
        de_start = now if plan.target is None else self._find_state(i, k, plan.target, now) + 1
        ag.mode, ag.channel, ag.plan, ag.de_start = "explore", k, plan, de_start
        ag.end = de_start + plan.de_length
        ag.started = now
        self.log(slot=now + 1, user=i, event="explore", channel=k, epoch=plan.epoch, re_slots=de_start - now,
                 de_slots=plan.de_length)

    def _find_state(self, i, k, target, start) -> int:
        row = self.traj[i, k]
        w = 64
        s = start
        while s < self.T:
            hit = np.flatnonzero(row[s : s + w] == target)
            if hit.size:
                return s + int(hit[0])
            s += w
            w *= 2
        return self.T  # not reached within the horizon

    def _finish_exploration(self, i: int):
        ag = self.agents[i]
        k, a, b = ag.channel, ag.de_start, int(ag.end)
        states = self.traj[i, k, a:b]
        complete_exploration(ag.learner, ag.plan, states, self.V[i, k, states])
        if self.paths is not None:
            self.paths[i][k].append(states.copy())
        self.log(slot=b + 1, user=i, event="explored", channel=k, de_count=int(ag.learner.de_count[k]))

    def _start_exploit(self, i: int, now: int, counted: bool):
        ag = self.agents[i]
        ag.started = now
        if counted:
            n = ag.learner.n_I + 1
            ag.mode, ag.end = "exploit", now + exploitation_length(n)
            self.log(slot=now + 1, user=i, event="exploit", channel=ag.channel, phase=n)
        else:
            ag.mode, ag.end = "wait", math.inf
            self.log(slot=now + 1, user=i, event="wait", channel=ag.channel)

    def _allocate(self, now: int) -> int:
        means = np.array([ag.learner.means for ag in self.agents])
        cands = [ag.learner.top_m() for ag in self.agents]
        out = run_allocation(means, self.sc.codec, self.rng, cands)
        d = out.duration
        end = min(now + d, self.T)
        self.phase[:, now:end] = ALLOCATE
        self.allocations += 1
        self.s1_rounds.append(out.s1_rounds)
        self.alloc_slots += d
        for i, ag in enumerate(self.agents):
            ag.learner.update_rivals(out.rival[i])
            ag.channel = int(out.assignment[i])
        self.log(slot=now + 1, event="allocation", rounds=d, s1_rounds=out.s1_rounds,
                 assignment=out.assignment.tolist(), de_counts=[ag.learner.de_count.tolist() for ag in self.agents],
                 trace=out.events)
        self.pending = False
        self.last_alloc = now + d
        for i in range(self.M):
            self._start_exploit(i, now + d, counted=True)
        return now + d

    def _decide(self, i: int, now: int):
        ag = self.agents[i]
        d = phase_decision(ag.learner, self.params, now + 1)
        if self.record_events:
            self.log(slot=now + 1, user=i, event="decision", action=d.action, channel=d.channel,
                     coefficients=[float(f"{c:.6g}") for c in d.coefficients], passed=d.passed)
        if d.action == "explore":
            self._start_exploration(i, d.channel, now)
        else:
            self._start_exploit(i, now, counted=not self.pending)

    def interrupt_barrier(self, now: int) -> int:
        """Resolve slot boundary `now`; returns the slot where simulation resumes.

        Finished explorations raise the broadcast interrupt. Every user whose
        activity ended, and on an interrupt every exploiting user, re-checks
        the condition on all channels. Failing users explore; the rest exploit
        (uncounted while an allocation is pending). A joint allocation starts
        once an interrupt is pending and nobody is exploring.
        """
        decide = []
        interrupt = False
        for i, ag in enumerate(self.agents):
            if ag.end != now:
                continue
            if ag.mode == "explore":
                self._finish_exploration(i)
                interrupt = True
            else:
                ag.learner.n_I += 1
            decide.append(i)
        if interrupt:
            self.interrupts += 1
            self.pending = True
            for i, ag in enumerate(self.agents):
                if ag.mode in ("exploit", "wait") and i not in decide:
                    if ag.mode == "exploit":
                        self.log(slot=now + 1, user=i, event="abort", channel=ag.channel)
                    decide.append(i)
        for i in sorted(decide):
            self._decide(i, now)
        if self.pending and not any(ag.mode == "explore" for ag in self.agents):
            return self._allocate(now)
        if self.pending and now - self.last_alloc > self.sc.livelock_budget:
            raise LivelockError(
                f"no allocation for {now - self.last_alloc} slots (budget {self.sc.livelock_budget}); "
                f"exploring users: {[i for i, a in enumerate(self.agents) if a.mode == 'explore']}"
            )
        return now

    def run(self):
        T = self.T
        now = self._initialize()
        if now < self.K or now >= T:
            return
        self.pending = True
        now = self._allocate(now)
        while now < T:
            nxt = min(ag.end for ag in self.agents)
            if not math.isfinite(nxt):
                raise EngineError(f"no agent has a scheduled boundary at slot {now + 1}")
            nxt = int(nxt)
            self._segment(now, min(nxt, T))
            if nxt >= T:
                break
            now = self.interrupt_barrier(nxt)


# ---- Monte Carlo


@dataclass
class MonteCarloResult:
    checkpoints: np.ndarray
    stable_value: float
    runs: int
    regret_mean: np.ndarray
    regret_std: np.ndarray
    regret_ci95: np.ndarray  # half-width
    phase_slots_mean: np.ndarray  # M x 3 x C
    per_user_mean: np.ndarray  # M x C cumulative
    regrets: np.ndarray = field(repr=False)  # runs x C
    extras: list = field(default_factory=list, repr=False)

    def user_rates(self, t0: int, t1: int) -> np.ndarray:
        a = int(np.flatnonzero(self.checkpoints == t0)[0])
        b = int(np.flatnonzero(self.checkpoints == t1)[0])
        return (self.per_user_mean[:, b] - self.per_user_mean[:, a]) / (t1 - t0)


def run_seed(seed: int, r: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(r,))


def _one_run(args):
    scenario, policy, horizon, seed, r, checkpoints, keep = args
    trace, _ = run_episode(scenario, policy, horizon, run_seed(seed, r), checkpoints=checkpoints, record_events=False)
    ex = {k: trace.extras[k] for k in keep if k in trace.extras}
    return trace.regret, trace.phase_slots, trace.per_user, ex


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


def monte_carlo(
    scenario: Scenario,
    runs: Optional[int] = None,
    horizon: Optional[int] = None,
    checkpoints=None,
    *,
    policy=None,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    keep_extras: Sequence[str] = (),
) -> MonteCarloResult:
    """Independent runs with seeds derived from (seed, run index), averaged per checkpoint.

    Results are reduced in run order, so the output does not depend on the
    number of workers.
    """
    runs = scenario.runs if runs is None else int(runs)
    if runs < 2:
        raise ValueError("monte_carlo needs at least 2 runs")
    T = int(scenario.horizon if horizon is None else horizon)
    policy = scenario.policy if policy is None else policy
    seed = scenario.seed if seed is None else seed
    cps = default_checkpoints(T) if checkpoints is None else np.asarray(checkpoints, dtype=np.int64)
    jobs = [(scenario, policy, T, seed, r, cps, tuple(keep_extras)) for r in range(runs)]
    workers = worker_count() if workers is None else max(1, workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_run, jobs, chunksize=max(1, runs // (4 * workers))))
    else:
        results = [_one_run(j) for j in jobs]
    regrets = np.stack([r[0] for r in results])
    mean = regrets.mean(axis=0)
    std = regrets.std(axis=0, ddof=1)
    return MonteCarloResult(
        checkpoints=cps,
        stable_value=scenario.stable.value,
        runs=runs,
        regret_mean=mean,
        regret_std=std,
        regret_ci95=1.96 * std / math.sqrt(runs),
        phase_slots_mean=np.mean([r[1] for r in results], axis=0),
        per_user_mean=np.mean([r[2] for r in results], axis=0),
        regrets=regrets,
        extras=[r[3] for r in results],
    )
