"""Versioned YAML scenario files -> Scenario objects.

Schema (version 1)::

    version: 1
    name: str
    users: M
    channels: K
    channel_bank:            # one of the kinds below
      kind: explicit         # bank: M x K list of {states: [...], transition: [[...]]}
      kind: scaled           # transition: N x N shared; levels: [...] or {fading: rayleigh, scale: s};
                             # means: M x K; states of pair (i,k) = means[i][k] * levels / (pi . levels)
      kind: gilbert_elliott  # p01, p10, r1, r0: K-vectors shared by all users, or M x K
      kind: fading           # family: rayleigh; scale (scalar or M x K); states: N; correlation; trace_length; seed
    rate_matrix:
      jitter_seed: int       # optional seeded tie-breaking perturbation of state rates
    learner:
      epsilon: float         # default 0.25 * delta_lb^2
      delta_lb: float        # default: true Delta_min
      L: float               # override of the computed constant
      exploration_floor: float  # alternative to L: pick L so that 2/I equals this
      rate_floor: bool       # default true
      s_max: float           # backoff range, default x_max
      backoff_resolution: int  # default 65536
    run:
      horizon: int
      runs: int
      seed: int
      policy: str
      checkpoints: [int, ...]  # default powers of 2
      livelock_budget: int
"""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml
from scipy import stats

from .csma import DEFAULT_RESOLUTION, BackoffCodec
from .engine import POLICIES, Scenario
from .learner import LearnerParams
from .markov import ChannelError, MarkovChannel, estimate_transitions, gauss_markov_rayleigh_trace, quantize_fading
from .matching import MatchingError, jitter

SCHEMA_VERSION = 1
TOP_KEYS = {"version", "name", "users", "channels", "channel_bank", "rate_matrix", "learner", "run"}


class ScenarioError(ValueError):
    """A scenario file failed to parse or validate."""


class _Doc:
    """Parsed YAML plus a path -> line index built from the node tree."""

    def __init__(self, text: str, source: str):
        self.source = source
        try:
            node = yaml.compose(text)
            self.data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"line {mark.line + 1}" if mark else "unknown line"
            raise ScenarioError(f"{source}: YAML syntax error at {where}: {getattr(exc, 'problem', exc)}") from exc
        self.lines: dict[tuple, int] = {}
        if node is not None:
            self._index(node, ())

    def _index(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                self._index(v, path + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for j, v in enumerate(node.value):
                self._index(v, path + (j,))

    def fail(self, path, msg):
        p = tuple(path)
        while p and p not in self.lines:
            p = p[:-1]
        line = self.lines.get(p)
        field = ".".join(str(x) for x in path) or "<root>"
        where = f" (line {line})" if line else ""
        raise ScenarioError(f"{self.source}: field '{field}'{where}: {msg}")

    def get(self, path, kind=None, default=Any, required=True):
        cur = self.data
        for key in path:
            if isinstance(cur, dict) and key in cur:
                cur = cur[key]
            elif isinstance(cur, list) and isinstance(key, int) and key < len(cur):
                cur = cur[key]
            else:
                if default is not Any or not required:
                    return None if default is Any else default
                self.fail(path, "missing required field")
        if cur is None and default is not Any:
            return default
        if kind is not None and cur is not None:
            cur = self._coerce(path, cur, kind)
        return cur

    def _coerce(self, path, value, kind):
        if kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                if isinstance(value, float) and value.is_integer():
                    return int(value)
                self.fail(path, f"expected an integer, got {value!r}")
            return value
        if kind == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                self.fail(path, f"expected a number, got {value!r}")
            return float(value)
        if kind == "bool":
            if not isinstance(value, bool):
                self.fail(path, f"expected true/false, got {value!r}")
            return value
        if kind == "str":
            if not isinstance(value, str):
                self.fail(path, f"expected a string, got {value!r}")
            return value
        if kind == "array":
            try:
                arr = np.array(_fractions(value), dtype=float)
            except (TypeError, ValueError, ZeroDivisionError):
                self.fail(path, "expected a numeric array")
            if arr.dtype == object or not np.all(np.isfinite(arr)):
                self.fail(path, "expected a rectangular array of finite numbers")
            return arr
        raise AssertionError(kind)


def _fractions(value):
    """Allow exact rationals written as "a/b" strings."""
    if isinstance(value, list):
        return [_fractions(v) for v in value]
    if isinstance(value, str):
        return float(Fraction(value.strip()))
    return value


def _shape(doc, path, arr, shape):
    if arr.shape != shape:
        doc.fail(path, f"expected shape {shape}, got {arr.shape}")


def _per_pair(doc, path, M, K):
    arr = doc.get(path, "array")
    if arr.ndim == 0:
        return np.full((M, K), float(arr))
    if arr.ndim == 1:
        if arr.size != K:
            doc.fail(path, f"expected {K} values (one per channel) or an {M}x{K} matrix, got {arr.size}")
        return np.tile(arr, (M, 1))
    _shape(doc, path, arr, (M, K))
    return arr


def _levels(doc, path, N):
    raw = doc.get(path)
    if isinstance(raw, dict):
        fam = doc.get(path + ("fading",), "str")
        if fam != "rayleigh":
            doc.fail(path + ("fading",), f"unsupported fading family {fam!r}; only 'rayleigh'")
        scale = doc.get(path + ("scale",), "float", 1.0)
        return quantize_fading(stats.rayleigh(scale=scale), N).rates
    arr = doc.get(path, "array")
    if arr.shape != (N,):
        doc.fail(path, f"expected {N} levels to match the transition matrix")
    return arr


def _build(doc, path, fn, *args):
    try:
        return fn(*args)
    except (ChannelError, MatchingError, ValueError) as exc:
        doc.fail(path, str(exc))


def _bank(doc: _Doc, M: int, K: int):
    base = ("channel_bank",)
    kind = doc.get(base + ("kind",), "str")
    if kind == "explicit":
        rows = doc.get(base + ("bank",))
        if not isinstance(rows, list) or len(rows) != M:
            doc.fail(base + ("bank",), f"expected {M} rows of {K} channels")
        bank = []
        for i in range(M):
            row = doc.get(base + ("bank", i))
            if not isinstance(row, list) or len(row) != K:
                doc.fail(base + ("bank", i), f"expected {K} channels")
            out = []
            for k in range(K):
                p = base + ("bank", i, k)
                states = doc.get(p + ("states",), "array")
                trans = doc.get(p + ("transition",), "array")
                out.append(_build(doc, p, MarkovChannel, states, trans))
            bank.append(out)
        return bank
    if kind == "scaled":
        P = doc.get(base + ("transition",), "array")
        if P.ndim != 2:
            doc.fail(base + ("transition",), "expected a square matrix")
        levels = _levels(doc, base + ("levels",), P.shape[0])
        means = doc.get(base + ("means",), "array")
        _shape(doc, base + ("means",), means, (M, K))
        proto = _build(doc, base + ("transition",), MarkovChannel, levels, P)
        scale = float(proto.stationary @ levels)
        return [
            [_build(doc, base + ("means", i, k), MarkovChannel, means[i, k] * levels / scale, P) for k in range(K)]
            for i in range(M)
        ]
    if kind == "gilbert_elliott":
        vals = {f: _per_pair(doc, base + (f,), M, K) for f in ("p01", "p10", "r1", "r0")}
        return [
            [
                _build(doc, base + ("p01",), MarkovChannel.gilbert_elliott, *(vals[f][i, k] for f in ("p01", "p10", "r1", "r0")))
                for k in range(K)
            ]
            for i in range(M)
        ]
    if kind == "fading":
        fam = doc.get(base + ("family",), "str")
        if fam != "rayleigh":
            doc.fail(base + ("family",), f"unsupported fading family {fam!r}; only 'rayleigh'")
        N = doc.get(base + ("states",), "int")
        rho = doc.get(base + ("correlation",), "float")
        length = doc.get(base + ("trace_length",), "int", 100_000)
        seed = doc.get(base + ("seed",), "int", 0)
        scale = _per_pair(doc, base + ("scale",), M, K)
        rng = np.random.default_rng(seed)
        bank = []
        for i in range(M):
            row = []
            for k in range(K):
                q = _build(doc, base + ("states",), quantize_fading, stats.rayleigh(scale=scale[i, k]), N)
                trace = _build(doc, base + ("correlation",), gauss_markov_rayleigh_trace, length, scale[i, k], rho, rng)
                row.append(_build(doc, base + ("trace_length",), estimate_transitions, trace, q))
            bank.append(row)
        return bank
    doc.fail(base + ("kind",), f"unknown channel bank kind {kind!r}")


def _jitter_bank(bank, seed):
    U = np.array([[ch.mean_rate for ch in row] for row in bank])
    J = jitter(U, seed)
    return [
        [MarkovChannel(ch.states * (J[i, k] / U[i, k] if U[i, k] > 0 else 1.0), ch.transition) for k, ch in enumerate(row)]
        for i, row in enumerate(bank)
    ]


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    doc = _Doc(text, source)
    if not isinstance(doc.data, dict):
        raise ScenarioError(f"{source}: expected a mapping at the top level")
    extra = set(doc.data) - TOP_KEYS
    if extra:
        doc.fail((sorted(extra)[0],), f"unknown field; allowed: {', '.join(sorted(TOP_KEYS))}")
    version = doc.get(("version",), "int")
    if version != SCHEMA_VERSION:
        doc.fail(("version",), f"unsupported version {version}; this build reads version {SCHEMA_VERSION}")
    M = doc.get(("users",), "int")
    K = doc.get(("channels",), "int")
    if M < 1 or K < M:
        doc.fail(("channels",), f"need 1 <= users <= channels, got users={M}, channels={K}")
    bank = _bank(doc, M, K)
    js = doc.get(("rate_matrix", "jitter_seed"), "int", None)
    if js is not None:
        bank = _jitter_bank(bank, js)

    from .markov import compute_bounds
    from .matching import RateMatrix

    U = _build(doc, ("channel_bank",), RateMatrix, np.array([[ch.mean_rate for ch in row] for row in bank]))
    bounds = compute_bounds(bank)
    lp = ("learner",)
    delta = doc.get(lp + ("delta_lb",), "float", U.delta_min)
    eps = doc.get(lp + ("epsilon",), "float", 0.25 * delta**2)
    L = doc.get(lp + ("L",), "float", None)
    target = doc.get(lp + ("exploration_floor",), "float", None)
    if L is not None and target is not None:
        doc.fail(lp + ("exploration_floor",), "give either L or exploration_floor, not both")
    rate_floor = doc.get(lp + ("rate_floor",), "bool", True)
    if delta <= 0:
        doc.fail(lp + ("delta_lb",), "must be positive")
    if eps <= 0:
        doc.fail(lp + ("epsilon",), "must be positive")
    if target is not None:
        if target <= 0:
            doc.fail(lp + ("exploration_floor",), "must be positive")
        params = LearnerParams.with_floor(target, eps, delta, bounds.r_max, rate_floor=rate_floor)
    else:
        if L is not None and L <= 0:
            doc.fail(lp + ("L",), "must be positive")
        params = LearnerParams(bounds.L if L is None else L, eps, delta, bounds.r_max, rate_floor=rate_floor)
    s_max = doc.get(lp + ("s_max",), "float", bounds.x_max)
    res = doc.get(lp + ("backoff_resolution",), "int", DEFAULT_RESOLUTION)
    codec = _build(doc, lp + ("s_max",), BackoffCodec, s_max, res)

    rp = ("run",)
    horizon = doc.get(rp + ("horizon",), "int", 10_000)
    runs = doc.get(rp + ("runs",), "int", 10)
    seed = doc.get(rp + ("seed",), "int", 0)
    policy = doc.get(rp + ("policy",), "str", "dssl")
    if policy not in POLICIES:
        doc.fail(rp + ("policy",), f"unknown policy {policy!r}; expected one of {', '.join(POLICIES)}")
    if horizon < 1:
        doc.fail(rp + ("horizon",), "must be >= 1")
    if runs < 1:
        doc.fail(rp + ("runs",), "must be >= 1")
    cps = doc.get(rp + ("checkpoints",), "array", None)
    if cps is not None:
        cps = tuple(int(c) for c in np.atleast_1d(cps))
    budget = doc.get(rp + ("livelock_budget",), "int", 1_000_000)
    name = doc.get(("name",), "str", Path(source).stem)
    return _build(
        doc, ("channel_bank",), Scenario, bank, params, codec, horizon, runs, seed, cps, policy, name, budget
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from exc
    return parse_scenario(text, str(path))
