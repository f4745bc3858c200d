"""Command line entry points.

Exit codes (stable)::

    0   success
    2   infeasible segment during synthesis (segment index reported)
    3   closed-loop run aborted or violated a constraint
    4   certificate verification failed (first failing (s, i) reported)
    64  usage error: bad flags, unreadable or malformed files, samples <= 0
    65  bundle does not match the scenario (hash mismatch)

The environment variable ``ELLIPSOIDAL_RHC_LOG_LEVEL`` sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_RUN_FAILED = 3
EXIT_VERIFY_FAILED = 4
EXIT_USAGE = 64
EXIT_MISMATCH = 65

LOG_ENV = "ELLIPSOIDAL_RHC_LOG_LEVEL"

log = logging.getLogger("ellipsoidal_rhc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ellipsoidal-rhc", description="Ellipsoidal receding-horizon control toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    syn = sub.add_parser("synthesize", help="synthesize the path bundle of a scenario")
    syn.add_argument("--scenario", required=True, help="scenario TOML/JSON file")
    syn.add_argument("--out", required=True, help="output bundle JSON")

    run = sub.add_parser("run", help="closed-loop simulation")
    run.add_argument("--scenario", required=True)
    run.add_argument("--bundle", help="path bundle; synthesized on the fly when omitted")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--noise", action="store_true", help="bounded uniform radar noise")
    run.add_argument("--no-plots", action="store_true")

    ver = sub.add_parser("verify", help="certificate suite of a path bundle")
    ver.add_argument("--bundle", required=True)
    ver.add_argument("--samples", type=int, default=1000)
    ver.add_argument("--seed", type=int, default=0)

    plot = sub.add_parser("plot", help="SVG figures from an existing trace CSV")
    plot.add_argument("--trace", required=True)
    plot.add_argument("--out", required=True)
    return p


def _load_scenario(path):
    from .harness import ScenarioError, load_scenario

    try:
        return load_scenario(path)
    except (OSError, ScenarioError) as exc:
        raise UsageError(f"cannot read scenario {path}: {exc}") from exc


def _load_bundle(path):
    from .planner import FullPath

    try:
        return FullPath.load(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read bundle {path}: {exc}") from exc


def cmd_synthesize(args) -> int:
    from .harness import synthesize
    from .planner import LargeResidualError, StallError

    scn = _load_scenario(args.scenario)
    t0 = time.perf_counter()
    try:
        fp = synthesize(scn)
    except (StallError, LargeResidualError) as exc:
        seg = getattr(exc, "segment", None)
        print(f"infeasible segment {seg}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fp.save(out)
    print(f"{'s':>3} {'segment':>7} {'x5_eq':>7} {'x6_eq':>8} {'N':>3} {'beta':>7}")
    for fam in fp.traversal:
        print(f"{fam.index:>3} {fam.segment:>7} {fam.x_eq[4]:>7.2f} {fam.x_eq[5]:>8.2f} {fam.depth:>3} {fam.beta:>7.3f}")
    print(f"{len(fp.families)} families in {time.perf_counter() - t0:.1f} s -> {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .harness import RunOptions, run, scenario_hash, synthesize

    scn = _load_scenario(args.scenario)
    if args.bundle:
        fp = _load_bundle(args.bundle)
        want = scenario_hash(scn)
        if fp.meta.get("scenario_hash") != want:
            print(f"bundle {args.bundle} was not synthesized for scenario {args.scenario}", file=sys.stderr)
            return EXIT_MISMATCH
    else:
        fp = synthesize(scn)
    trace = run(scn, fp, RunOptions(seed=args.seed, noise=args.noise))
    paths = trace.write(args.out)
    if not args.no_plots:
        from .plots import plot_trace

        plot_trace(paths["trace"], args.out)
    s = trace.summary
    print(
        f"{scn.name}: {s['status']} after {s['sim_time']:.1f} s, replans {s['replan_count']}, "
        f"min |x_rel| {s['min_abs_xrel']}, mean step {s['timing']['mean_ms']:.2f} ms"
    )
    if trace.status != "completed":
        print(f"first violation: {json.dumps(trace.violation)}", file=sys.stderr)
        return EXIT_RUN_FAILED
    return EXIT_OK


def cmd_verify(args) -> int:
    from .planner import verify_path

    if args.samples <= 0:
        raise UsageError("--samples must be positive")
    fp = _load_bundle(args.bundle)
    rows = verify_path(fp, args.samples, seed=args.seed)
    print(f"{'s':>3} {'i':>3} {'nested':>6} {'rows':>5} {'feasible':>9} {'margin':>10}")
    first = None
    for r in rows:
        print(f"{r.s:>3} {r.i:>3} {r.nested!s:>6} {r.admissible!s:>5} {r.feasible:>4}/{r.samples:<4} {r.worst_margin:>10.3e}")
        if first is None and not r.passed:
            first = r
    if first is not None:
        print(f"certificate failed at (s, i) = ({first.s}, {first.i})", file=sys.stderr)
        return EXIT_VERIFY_FAILED
    print(f"all {len(rows)} certificates passed")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plots import plot_trace

    try:
        for p in plot_trace(args.trace, args.out):
            print(p)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot plot {args.trace}: {exc}") from exc
    return EXIT_OK


_COMMANDS = {"synthesize": cmd_synthesize, "run": cmd_run, "verify": cmd_verify, "plot": cmd_plot}


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
