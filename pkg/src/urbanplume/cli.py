"""Command-line entry point.

Subcommands: mesh | wind | transport | rom {offline|online|benchmark} |
run-all.  Every run needs --config; --output (or URBANPLUME_OUTPUT) moves
the output directory, --seed overrides the configured seed, and --mu picks
the inflow factor for `rom online`.

Exit codes: 0 success, 2 configuration error, 3 input/output error,
4 constraint violation, 5 solver nonconvergence or singularity,
6 time-integration instability, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .config import load_config
from .errors import (
    ConfigError,
    ConstraintError,
    InputError,
    InstabilityError,
    SolverError,
)
from . import pipeline

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CONSTRAINT = 4
EXIT_SOLVER = 5
EXIT_INSTABILITY = 6


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="urbanplume",
        description="Urban wind and contaminant dispersion pipeline")
    parser.add_argument("--config", required=True, help="scenario JSON file")
    parser.add_argument("--output", default=None,
                        help="output directory (overrides config and "
                             "URBANPLUME_OUTPUT)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the configured seed")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("mesh", help="generate and tag the mesh")
    sub.add_parser("wind", help="solve the steady wind field(s)")
    sub.add_parser("transport", help="run the contaminant transport")
    rom_p = sub.add_parser("rom", help="reduced-order model phases")
    rom_p.add_argument("phase", choices=["offline", "online", "benchmark"])
    rom_p.add_argument("--mu", type=float, default=None,
                       help="inflow factor for the online solve")
    sub.add_parser("run-all", help="mesh + wind + transport + rom offline/online")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = dataclasses.replace(
                config, rom=dataclasses.replace(config.rom, seed=args.seed))
        output = args.output or os.environ.get("URBANPLUME_OUTPUT") or None

        if args.command == "mesh":
            result = pipeline.cmd_mesh(config, output)
        elif args.command == "wind":
            result = pipeline.cmd_wind(config, output)
        elif args.command == "transport":
            result = pipeline.cmd_transport(config, output)
        elif args.command == "rom":
            if args.phase == "offline":
                result = pipeline.cmd_rom_offline(config, output)
            elif args.phase == "online":
                result = pipeline.cmd_rom_online(config, output, mu=args.mu)
            else:
                result = pipeline.cmd_rom_benchmark(config, output)
        else:
            result = pipeline.cmd_run_all(config, output)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, OSError) as exc:
        print(f"input/output error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConstraintError as exc:
        print(f"constraint violation: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except InstabilityError as exc:
        print(f"instability: {exc}", file=sys.stderr)
        return EXIT_INSTABILITY

    for key, value in result.items():
        print(f"{key}: {value}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
