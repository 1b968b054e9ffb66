from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from circov import __version__
from circov.core.config import RunConfig, load_run_config
from circov.core.errors import install_exception_handlers
from circov.core.logging import configure_logging, run_context
from circov.services.run_service import get_run_service


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="circov",
        description="Circumcision coverage by region, age, year and type from survey and programme data.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="run config JSON")
    common.add_argument("--threads", type=int, default=None, help="worker threads (overrides config)")
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    common.add_argument("--log-level", default=None)

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="parse and cross-check all inputs")
    sub.add_parser("simulate", parents=[common], help="write a synthetic dataset from known parameters")
    sub.add_parser("fit", parents=[common], help="fit the model and persist mode, samples and summaries")
    agg = sub.add_parser("aggregate", parents=[common], help="summarize persisted samples")
    agg.add_argument("--samples", type=Path, required=True, help="samples.bin written by fit")
    return parser


def apply_overrides(config: RunConfig, threads: int | None, seed: int | None) -> RunConfig:
    if threads is not None:
        config = config.model_copy(update={"threads": max(1, threads)})
    if seed is not None:
        config = config.model_copy(
            update={"inference": config.inference.model_copy(update={"seed": seed})}
        )
        if config.simulation is not None:
            config = config.model_copy(
                update={"simulation": config.simulation.model_copy(update={"seed": seed})}
            )
    return config


def _dispatch(args: argparse.Namespace) -> int:
    config = apply_overrides(load_run_config(args.config), args.threads, args.seed)
    service = get_run_service(config)
    if args.command == "validate":
        print(service.validate().model_dump_json(indent=2))
    elif args.command == "simulate":
        print(json.dumps(service.simulate(), indent=2, sort_keys=True))
    elif args.command == "fit":
        print(json.dumps(service.fit(), indent=2, sort_keys=True))
    else:
        print(json.dumps(service.aggregate(args.samples), indent=2, sort_keys=True))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    # the error document reads its run id from this context
    with run_context(args.command):
        return install_exception_handlers(lambda: _dispatch(args))


if __name__ == "__main__":
    sys.exit(main())
