"""``cddp`` command line: solve, bench, sweep-starts."""

from __future__ import annotations

import argparse
import sys

from .bench import ConfigError, emit_metrics, load_config, run_experiment, summarize, write_outputs

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CELL_FAILURE = 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cddp", description="Constrained DDP solvers and benchmark harness")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config field, e.g. solvers.0.eta=0.25")
        sp.add_argument("--jobs", type=int, default=1, help="parallel cells")

    s = sub.add_parser("solve", help="one solver on one start point")
    common(s)
    s.add_argument("--budget", type=float, help="wall-clock budget in seconds")
    s.add_argument("--start", type=int, default=0, help="index into the start list")
    common(sub.add_parser("bench", help="every solver on every start, averaged per solver"), out_required=True)
    sw = sub.add_parser("sweep-starts", help="every start reported separately")
    common(sw, out_required=True)
    sw.add_argument("--budget", type=float, help="wall-clock budget in seconds")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "solve":
            starts = cfg.start_states()
            if not 0 <= args.start < len(starts):
                raise ConfigError(f"start: index {args.start} out of range (0..{len(starts) - 1})")
            cfg.solvers = cfg.solvers[:1]
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    budget = getattr(args, "budget", None)
    indices = [args.start] if args.command == "solve" else None
    cells = run_experiment(cfg, budget=budget, jobs=args.jobs, starts=indices)
    average = args.command == "bench"
    print(emit_metrics(summarize(cells, average=average), fmt="text"), end="")
    for c in cells:
        if c.error:
            print(f"{c.solver} start {c.start}: {c.error}", file=sys.stderr)
    if args.out:
        write_outputs(cfg, cells, args.out, average=average)
    return EXIT_CELL_FAILURE if any(not c.ok for c in cells) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
