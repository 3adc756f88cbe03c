"""``mpi-facedit <command> --config path [overrides]``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 missing prerequisite artifact, 4 workdir locked by another command.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, MissingArtifactError
from .pipeline import COMMANDS, ENV_WORKDIR, LockBusyError, RunConfig, run_command

EXIT_CONFIG, EXIT_MISSING, EXIT_LOCKED = 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpi-facedit", description="Desk-scale 3D-aware face attribute editing.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--workdir", help=f"artifact directory (default: ${ENV_WORKDIR})")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config field; repeatable")
    edit = parser.add_argument_group("edit-render")
    edit.add_argument("--attribute")
    edit.add_argument("--scale", type=float)
    edit.add_argument("--sequential", help="comma-separated attributes applied cumulatively")
    edit.add_argument("--orbit-views", type=int)
    inv = parser.add_argument_group("invert / pti")
    inv.add_argument("--image", help="PNG to invert (default: procedural out-of-distribution faces)")
    inv.add_argument("--pti-steps", type=int)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args: argparse.Namespace) -> list[str]:
    out = list(args.overrides)
    if args.workdir:
        out.append(f"run.workdir={args.workdir!r}".replace("'", '"'))
    if args.seed is not None:
        out.append(f"run.seed={args.seed}")
    if args.attribute:
        out.append(f'edit.attribute="{args.attribute}"')
    if args.scale is not None:
        out.append(f"edit.scale={args.scale}")
    if args.sequential:
        out.append(f"edit.sequential={args.sequential}")
    if args.orbit_views is not None:
        out.append(f"edit.orbit_views={args.orbit_views}")
    if args.image:
        out.append(f"invert.image={args.image!r}".replace("'", '"'))
    if args.pti_steps is not None:
        out.append(f"invert.pti_steps={args.pti_steps}")
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        level = "DEBUG" if args.verbose else cfg["run"]["log_level"]
        logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        outputs = run_command(args.command, cfg)
    except ConfigError as e:
        print(f"mpi-facedit: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as e:
        print(f"mpi-facedit: {e}", file=sys.stderr)
        return EXIT_MISSING
    except LockBusyError as e:
        print(f"mpi-facedit: {e}", file=sys.stderr)
        return EXIT_LOCKED
    except Exception as e:  # noqa: BLE001
        logging.getLogger(__name__).exception("command failed")
        print(f"mpi-facedit: {args.command} failed: {e}", file=sys.stderr)
        return 1
    for o in outputs:
        print(o)
    return 0


if __name__ == "__main__":
    sys.exit(main())
