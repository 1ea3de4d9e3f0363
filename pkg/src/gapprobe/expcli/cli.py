"""``gapprobe`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

from ..core import ConfigurationError, ContractViolation
from ..modelclient.base import BackendError
from ..probes import ProbeError
from .config import ExperimentConfig, load_config
from .reports import cmd_analyze, cmd_baee, cmd_calibrate, cmd_filter_fp, cmd_report, cmd_stats
from .stages import MissingStageError, cmd_perturb, cmd_probe, cmd_rollout, open_run

log = logging.getLogger("gapprobe")

COMMANDS = ("rollout", "probe", "perturb", "baee", "calibrate", "filter-fp", "stats", "analyze", "report")
# stages that never call the model
OFFLINE = {"calibrate", "filter-fp", "stats", "report"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gapprobe", description="Prefix probing experiments and early-exit analysis.")
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--parallelism", type=int)
    parser.add_argument("--backend", choices=("http", "mock"))
    parser.add_argument("--out", help="run directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("rollout", help="sample full rollouts")
    p = sub.add_parser("probe", help="run PSC/EFA/ATLT/ED at each checkpoint")
    p.add_argument("--probes", help="comma list from psc,efa,atlt,ed")
    p.add_argument("--grid", help="default, fine, or comma-separated fractions")
    p.add_argument("--suffix-ablation", action="store_true", help="EFA under every suffix template")
    p = sub.add_parser("perturb", help="PSC on perturbed prefixes")
    p.add_argument("--kinds", help="comma list from truncate_20,shuffle_30,replace_30")
    p.add_argument("--fractions", help="comma-separated checkpoint fractions")
    sub.add_parser("baee", help="early-exit strategies and cost tables")
    p = sub.add_parser("calibrate", help="threshold calibration and resplit stability")
    p.add_argument("--resplits", type=int)
    sub.add_parser("filter-fp", help="trajectory features and FP filters")
    sub.add_parser("stats", help="bootstrap and permutation statistics")
    sub.add_parser("analyze", help="emit every available report")
    sub.add_parser("report", help="markdown index of the reports")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(
            args.config,
            {"seed": args.seed, "parallelism": args.parallelism, "backend": args.backend, "out": args.out},
        )
        run = open_run(cfg, need_backend=args.command not in OFFLINE)
        cmd = args.command
        if cmd == "rollout":
            out = cmd_rollout(run)
        elif cmd == "probe":
            grid = ExperimentConfig(grid=args.grid).checkpoint_grid if args.grid else None
            probes = tuple(x.strip() for x in args.probes.split(",")) if args.probes else None
            cmd_probe(run, probes, grid, True if args.suffix_ablation else None)
            out = run.dir / "probe"
        elif cmd == "perturb":
            kinds = tuple(args.kinds.split(",")) if args.kinds else None
            fr = tuple(float(x) for x in args.fractions.split(",")) if args.fractions else None
            out = cmd_perturb(run, kinds, fr)
        elif cmd == "baee":
            out = cmd_baee(run)
        elif cmd == "calibrate":
            out = cmd_calibrate(run, args.resplits)
        elif cmd == "filter-fp":
            out = cmd_filter_fp(run)
        elif cmd == "stats":
            out = cmd_stats(run)
        elif cmd == "analyze":
            out = cmd_analyze(run)
        else:
            out = cmd_report(run)
    except (ConfigurationError, ContractViolation, MissingStageError) as exc:
        log.error("%s", exc)
        return 2
    except (BackendError, ProbeError) as exc:
        log.error("backend failure: %s (completed work is saved; rerun to resume)", exc)
        return 3
    log.info("%s done: %s", args.command, out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
