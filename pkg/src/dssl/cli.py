"""Command line entry point: run experiments, print coefficient tables,
evaluate the regret bound.

Exit codes: 0 success, 1 unexpected failure, 2 usage or scenario error,
3 livelock guard tripped, 4 bound infeasible for the configured epsilon.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bound import InfeasibleBoundError, deterministic_coefficients, theorem1_bound, uniform_coefficients
from .engine import POLICIES, EngineError, LivelockError, default_checkpoints, monte_carlo, run_episode, run_seed
from .scenario import ScenarioError, load_scenario

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_LIVELOCK, EXIT_INFEASIBLE = 0, 1, 2, 3, 4
CSV_COLUMNS = ("t", "regret_mean", "regret_std", "exploration_slots", "allocation_slots", "exploitation_slots")

log = logging.getLogger("dssl")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def write_trace_csv(path, checkpoints, mean, std, phase_slots):
    """phase_slots: M x 3 x C, averaged over users in the output."""
    per_user = np.asarray(phase_slots).mean(axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for j, t in enumerate(checkpoints):
            w.writerow([int(t), repr(float(mean[j])), repr(float(std[j]))] + [repr(float(x)) for x in per_user[:, j]])


def write_events(path, events):
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e, default=_json_default, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    policy = args.policy or sc.policy
    runs = sc.runs if args.runs is None else args.runs
    T = sc.horizon if args.horizon is None else args.horizon
    seed = sc.seed if args.seed is None else args.seed
    if runs < 1 or T < 1:
        raise ScenarioError("--runs and --horizon must be >= 1")
    cps = np.asarray(sc.checkpoints, dtype=np.int64) if sc.checkpoints else default_checkpoints(T)
    cps = cps[cps <= T]
    if cps.size == 0 or cps[-1] != T:
        cps = np.append(cps, T)
    first, events = run_episode(sc, policy, T, run_seed(seed, 0), checkpoints=cps, record_events=True)
    if runs >= 2:
        mc = monte_carlo(sc, runs, T, cps, policy=policy, seed=seed)
        mean, std, slots = mc.regret_mean, mc.regret_std, mc.phase_slots_mean
    else:
        mean, std, slots = first.regret, np.full(cps.size, np.nan), first.phase_slots
    out = Path(args.out)
    write_trace_csv(out, cps, mean, std, slots)
    ev_path = Path(args.events) if args.events else out.with_suffix(".events.jsonl")
    write_events(ev_path, events)
    print(f"wrote {out} ({cps.size} checkpoints, {runs} runs) and {ev_path} ({len(events)} events)")
    return EXIT_OK


def _fmt_matrix(A, width=9):
    return ["".join(f"{x:{width}.1f}" for x in row) for row in A]


def cmd_tables(args) -> int:
    sc = load_scenario(args.scenario)
    U, L = sc.rates.entries, sc.params.L
    D = deterministic_coefficients(U, L)
    B = uniform_coefficients(U, L)
    left, right = _fmt_matrix(D), _fmt_matrix(B)
    w = max(len(s) for s in left)
    print(f"L = {L:g}")
    print(f"{'DSSL D[i,k]':<{w}}   uniform baseline")
    for a, b in zip(left, right):
        print(f"{a:<{w}}   {b}")
    return EXIT_OK


def cmd_bound(args) -> int:
    sc = load_scenario(args.scenario)
    rows = [(t, theorem1_bound(sc, t)) for t in args.t]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(("t", "bound"))
        for t, v in rows:
            w.writerow((int(t) if float(t).is_integer() else t, repr(float(v))))
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dssl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a policy and write a regret trace CSV")
    r.add_argument("--scenario", required=True)
    r.add_argument("--policy", choices=POLICIES)
    r.add_argument("--runs", type=int)
    r.add_argument("--horizon", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True, help="CSV output path")
    r.add_argument("--events", help="event log path (default: <out>.events.jsonl)")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("tables", help="print DSSL and uniform exploration coefficients")
    t.add_argument("--scenario", required=True)
    t.set_defaults(func=cmd_tables)

    b = sub.add_parser("bound", help="evaluate the regret upper bound")
    b.add_argument("--scenario", required=True)
    b.add_argument("--t", type=float, nargs="+", required=True)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bound)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LivelockError as exc:
        print(f"livelock: {exc}", file=sys.stderr)
        return EXIT_LIVELOCK
    except InfeasibleBoundError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (EngineError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
