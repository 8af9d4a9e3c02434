"""
Primary module for entry into KDFollow from the command line
"""

import argparse
import logging
import os
import sys

THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key = value configuration file")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="root random seed")
    common.add_argument("--threads", type=int, default=None, help="worker threads (1 for bit-reproducible runs)")
    common.add_argument("--data", default=None, help="trajectory CSV (default: pairs.csv in the output directory)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("--quiet", action="store_true", help="warnings and errors only")

    parser = argparse.ArgumentParser(prog="kdfollow", description="Knowledge-distilled car-following models")
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("synth", parents=[common], help="generate synthetic lead/follower pairs")
    p.add_argument("--pairs", type=int, default=None, help="pairs per class")
    p.add_argument("--duration", type=float, default=None, help="seconds per pair")

    subparsers.add_parser("ingest", parents=[common], help="load, filter, window and split trajectories")
    subparsers.add_parser("analyze", parents=[common], help="speed variability, moments and ANOVA")

    p = subparsers.add_parser("train", parents=[common], help="train the teacher and the plain student")
    p.add_argument("--model", choices=("teacher", "student", "both"), default="both")
    p.add_argument("--search", action="store_true", help="random search with time-series cross-validation")

    p = subparsers.add_parser("distill", parents=[common], help="train the distilled student")
    p.add_argument("--alpha", type=float, default=None)

    p = subparsers.add_parser("sweep", parents=[common], help="distilled students over a range of alpha")
    p.add_argument("--alphas", default=None, help="comma separated values or start:stop:step")
    p.add_argument("--seeds", type=int, default=None, help="repeat on synthetic data over this many seeds")

    for name, text in (("evaluate", "prediction errors and closed-loop safety"),
                       ("rollout", "closed-loop rollouts with minimum time-to-collision")):
        p = subparsers.add_parser(name, parents=[common], help=text)
        p.add_argument("--horizon", type=float, default=None, help="rollout seconds (0 for whole pairs)")

    p = subparsers.add_parser("bench", parents=[common], help="inference wall time and multiply-adds")
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--repetitions", type=int, default=None)
    return parser


def configure_logging(args) -> None:
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def limit_numeric_threads() -> None:
    # read by the numerical libraries when they are first imported
    for name in THREAD_VARIABLES:
        os.environ[name] = "1"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args)
    limit_numeric_threads()

    import KDFollowCommands
    import KDFollowConfig
    import KDFollowConstants
    from KDFollowMessages import KDFollowError, report_error

    ctx = None
    try:
        config = KDFollowConfig.import_config(args.config)
        for key, value in (("run.out", args.out), ("run.seed", args.seed), ("run.threads", args.threads),
                           ("data.path", args.data)):
            if value is not None:
                config[key] = KDFollowConfig.validate_config(key, str(value))
        ctx = KDFollowCommands.RunContext(args.command, config)
        KDFollowCommands.COMMANDS[args.command](ctx, args)
        ctx.finish(KDFollowConstants.EXIT_OK)
        return KDFollowConstants.EXIT_OK
    except KDFollowError as error:
        exit_code = report_error(error)
        if ctx is not None:
            ctx.finish(exit_code, error)
        return exit_code


if __name__ == "__main__":
    sys.exit(main())
