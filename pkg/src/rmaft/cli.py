"""Command-line front end: rmaft {sim,pcf,daly,placement,dump-logs}.

Exit codes: 0 ok, 1 an invariant or assertion failed, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from .checkpointing import daly_interval
from .errors import InfeasiblePlacement, ScenarioError
from .harness import Scenario, build, run_scenario
from .topology import (PcfQuery, ch_groups, load_profile, make_taware_placement, p_cf,
                       validate_taware)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def fmt(x: float) -> str:
    return format(x, ".9g")


def _threads() -> int:
    env = os.environ.get("RMAFT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"RMAFT_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def load_scenario(path: str) -> Scenario:
    try:
        with open(path) as fp:
            text = fp.read()
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        return Scenario.from_json(obj)
    except ScenarioError as exc:
        raise UsageError(f"{path}: {exc}") from None


@contextlib.contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fp:
            yield fp


def _writer(fp):
    return csv.writer(fp, lineterminator="\n")


# -- subcommands -----------------------------------------------------------------


def cmd_sim(args) -> int:
    base = load_scenario(args.scenario)
    first = base.seed if args.seed is None else args.seed
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    seeds = [(first + i) & ((1 << 64) - 1) for i in range(args.trials)]

    def one(seed):
        try:
            return seed, run_scenario(base.with_seed(seed), check_oracle=True)
        except ScenarioError as exc:
            return seed, exc

    with ThreadPoolExecutor(max_workers=min(_threads(), len(seeds))) as pool:
        results = list(pool.map(one, seeds))
    for seed, rep in results:
        if isinstance(rep, ScenarioError):
            raise UsageError(f"seed {seed}: {rep}")
    failed = 0
    with _output(args.out) as fp:
        w = _writer(fp)
        w.writerow(["seed", "digest", "fallbacks", "cf", "event_count"])
        for seed, rep in results:
            w.writerow([seed, rep.digest, rep.fallbacks, int(rep.cf), rep.event_count])
            if not rep.ok:
                failed += 1
                print(f"seed {seed}: invariant violated: {rep.dumps()}", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def _parse_levels(spec: str, hier) -> list[tuple[str, int]]:
    out = []
    names = [lv.name.lower() for lv in hier.levels]
    for item in spec.split(","):
        item = item.strip().lower()
        if not item:
            continue
        if item in ("none", "no-topo", "0"):
            out.append(("none", 0))
            continue
        if item.isdigit():
            k = int(item)
            if not 0 <= k <= hier.h:
                raise UsageError(f"topology level {k} outside [0, {hier.h}]")
            out.append((names[k - 1] if k else "none", k))
            continue
        hits = [i for i, nm in enumerate(names) if nm == item or nm.rstrip("s") == item.rstrip("s")
                or nm.rstrip("es") == item.rstrip("es")]
        if not hits:
            raise UsageError(f"unknown topology level {item!r}; have {names}")
        out.append((names[hits[0]], hits[0] + 1))
    if not out:
        raise UsageError("no topology levels given")
    return out


def _parse_fractions(spec: str) -> list[float]:
    try:
        vals = [float(x) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --ch-fraction list {spec!r}") from None
    if not vals:
        raise UsageError("no checksum fractions given")
    return vals


def cmd_pcf(args) -> int:
    try:
        hier = load_profile(args.machine)
    except (OSError, ValueError) as exc:
        raise UsageError(f"machine profile {args.machine!r}: {exc}") from None
    levels = _parse_levels(args.topo_level, hier)
    rows = []
    for frac in _parse_fractions(args.ch_fraction):
        try:
            g = ch_groups(args.n_procs, frac)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        for name, k in levels:
            try:
                q = PcfQuery(args.n_procs, g, k, hier)
            except ValueError as exc:
                raise UsageError(f"fraction {frac}: {exc}") from None
            rows.append([name, fmt(frac), fmt(p_cf(q))])
    with _output(args.out) as fp:
        w = _writer(fp)
        w.writerow(["topo_level", "ch_fraction", "p_cf"])
        w.writerows(rows)
    return EXIT_OK


def cmd_daly(args) -> int:
    try:
        print(fmt(daly_interval(args.delta, args.mtbf)))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return EXIT_OK


def cmd_placement(args) -> int:
    try:
        hier = load_profile(args.machine)
    except (OSError, ValueError) as exc:
        raise UsageError(f"machine profile {args.machine!r}: {exc}") from None
    if args.groups < 1 or args.n_procs % args.groups:
        raise UsageError(f"{args.n_procs} processes do not split into {args.groups} groups")
    k = args.n_procs // args.groups
    groups = [list(range(i * k, (i + 1) * k)) for i in range(args.groups)]
    try:
        pl = make_taware_placement(hier, groups, args.level)
    except InfeasiblePlacement as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    bad = validate_taware(pl, groups, args.level)
    with _output(args.out) as fp:
        w = _writer(fp)
        w.writerow(["process", "group"] + [lv.name for lv in hier.levels])
        for gi, grp in enumerate(groups):
            for p in grp:
                w.writerow([p, gi] + hier.ancestors(pl.nodes[p]))
    return EXIT_FAIL if bad else EXIT_OK


def cmd_dump_logs(args) -> int:
    s = load_scenario(args.scenario)
    if args.seed is not None:
        s = s.with_seed(args.seed)
    try:
        sim = build(s)
        sim.run()
    except (ScenarioError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    with _output(args.out) as fp:
        if args.what == "logs":
            sim.log.dump(fp)
        elif args.what == "trace":
            sim.machine.graph.dump(fp)
        else:
            for plan in sim.plans:
                plan.dump(fp)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rmaft", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("sim", help="run a scenario for one or more seeds")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--trials", type=int, default=1)
    sp.add_argument("--out", help="CSV file (default stdout)")
    sp.set_defaults(func=cmd_sim)

    sp = sub.add_parser("pcf", help="catastrophic-failure probability grid")
    sp.add_argument("--machine", default="tsubame2", help="profile name or JSON file")
    sp.add_argument("--n-procs", type=int, required=True)
    sp.add_argument("--ch-fraction", required=True, help="comma-separated fractions of N")
    sp.add_argument("--topo-level", default="none,nodes,psus,switches,racks")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_pcf)

    sp = sub.add_parser("daly", help="coordinated checkpoint interval")
    sp.add_argument("--delta", type=float, required=True)
    sp.add_argument("--mtbf", type=float, required=True)
    sp.set_defaults(func=cmd_daly)

    sp = sub.add_parser("placement", help="topology-aware group placement")
    sp.add_argument("--machine", default="tsubame2")
    sp.add_argument("--n-procs", type=int, required=True)
    sp.add_argument("--groups", type=int, required=True)
    sp.add_argument("--level", type=int, default=1)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_placement)

    sp = sub.add_parser("dump-logs", help="run a scenario and dump logs, trace or replays")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--what", choices=("logs", "trace", "replay"), default="logs")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_dump_logs)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rmaft: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
