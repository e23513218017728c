"""Opportunistic CSMA allocation: backoff coding of sample means and the
round-based S1/S2 contention that reaches a stable matching."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 2**16


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackoffCodec:
    """Maps a sample mean in [0, s_max] to one of `resolution` backoff slots.

    Larger means get earlier slots.
    """

    s_max: float
    resolution: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        if not self.s_max > 0:
            raise ValueError("s_max must be positive")
        if self.resolution < 1:
            raise ValueError("resolution must be >= 1")

    def encode(self, mean: float) -> int:
        return encode_backoff(mean, self)

    def decode(self, slot: int) -> float:
        return decode_backoff(slot, self)


def encode_backoff(mean: float, codec: BackoffCodec) -> int:
    B = codec.resolution
    slot = math.floor(B * (1.0 - mean / codec.s_max))
    if slot < 0 or slot > B - 1:
        if mean > codec.s_max or mean < 0:
            log.warning("sample mean %.6g outside [0, %.6g]; backoff clamped", mean, codec.s_max)
        slot = min(max(slot, 0), B - 1)
    return int(slot)


def decode_backoff(slot: int, codec: BackoffCodec) -> float:
    if not 0 <= slot < codec.resolution:
        raise ValueError(f"slot {slot} outside [0, {codec.resolution - 1}]")
    return codec.s_max * (1.0 - (slot + 0.5) / codec.resolution)


@dataclass
class AllocationOutcome:
    assignment: np.ndarray  # user -> channel
    rival: np.ndarray  # M x K decoded best-rival means, NaN where unobserved
    duration: int  # S1 plus S2 rounds
    s1_rounds: int
    contention: list  # T_k: users that contended on channel k
    events: list = field(default_factory=list)

    @property
    def matching(self) -> dict:
        return {i: int(k) for i, k in enumerate(self.assignment)}


def run_allocation(means, codec: BackoffCodec, rng=None, candidates=None) -> AllocationOutcome:
    """One allocation phase on M x K sample means.

    Each user proposes down its own ranking of `candidates[i]` (default: its
    best M channels by sample mean). In every S1 round all holders and new
    proposers transmit with their backoff; the earliest slot on a channel
    wins it. Losers hear the winner's backoff. If anybody lost, an S2 round
    follows in which losers transmit again so each winner hears its best
    rival. Backoff ties are broken uniformly at random.
    """
    S = np.asarray(means, float)
    M, K = S.shape
    if M > K:
        raise ProtocolError(f"{M} users but only {K} channels")
    if rng is None:
        rng = np.random.default_rng(0)
    if candidates is None:
        candidates = [np.argsort(-S[i], kind="stable")[:M] for i in range(M)]
    else:
        candidates = [sorted(c, key=lambda k, i=i: -S[i, k]) for i, c in enumerate(candidates)]
    slots = np.array([[codec.encode(x) for x in row] for row in S])

    holder = np.full(K, -1)
    assigned = np.full(M, -1)
    nxt = np.zeros(M, dtype=int)
    rival = np.full((M, K), np.nan)
    contention = [set() for _ in range(K)]
    events = []
    duration = 0
    s1 = 0
    guard = K * M

    def hear(i, k, value):
        rival[i, k] = value if np.isnan(rival[i, k]) else max(rival[i, k], value)

    while np.any(assigned < 0):
        if s1 >= guard:
            raise ProtocolError(f"allocation did not terminate within {guard} S1 rounds")
        s1 += 1
        duration += 1
        bids: dict[int, list[int]] = {}
        for k in range(K):
            if holder[k] >= 0:
                bids.setdefault(k, []).append(int(holder[k]))
        for i in np.flatnonzero(assigned < 0):
            if nxt[i] >= len(candidates[i]):
                raise ProtocolError(f"user {i} was rejected by every candidate channel")
            k = int(candidates[i][nxt[i]])
            nxt[i] += 1
            bids.setdefault(k, []).append(int(i))
        losers: dict[int, list[int]] = {}
        for k in sorted(bids):
            users = sorted(bids[k])
            contention[k].update(users)
            b = np.array([slots[u, k] for u in users])
            best = np.flatnonzero(b == b.min())
            tie = best.size > 1
            w = users[int(rng.choice(best))] if tie else users[int(best[0])]
            events.append(
                {"round": duration, "subphase": "S1", "channel": k, "contenders": users, "winner": w, "tie": tie}
            )
            prev = holder[k]
            if prev >= 0 and prev != w:
                assigned[prev] = -1
            holder[k] = w
            assigned[w] = k
            heard = codec.decode(slots[w, k])
            lost = [u for u in users if u != w]
            for u in lost:
                hear(u, k, heard)
            if lost:
                losers[k] = lost
        if losers:
            duration += 1
            for k in sorted(losers):
                users = losers[k]
                best = min(slots[u, k] for u in users)
                hear(int(holder[k]), k, codec.decode(best))
                events.append(
                    {"round": duration, "subphase": "S2", "channel": k, "contenders": users, "winner": None, "tie": False}
                )
    return AllocationOutcome(assigned.copy(), rival, duration, s1, [sorted(c) for c in contention], events)
