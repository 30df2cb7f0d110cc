"""Argument parser combining every sub-command, and the dispatcher that runs them."""

import argparse
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence, Tuple

import logfire
from pydantic import ValidationError

from app.cli import commands
from app.config import Config
from app.models.errors import ReservingError
from app.services.glm_service import STRUCTURES

# Configure logger
logger = logfire.with_settings(tags=[__name__])


def _levels(text: str) -> Tuple[float, ...]:
    try:
        levels = tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid levels {text!r}")
    if not levels or any(not 0.0 < level < 1.0 for level in levels):
        raise argparse.ArgumentTypeError("levels must lie strictly between 0 and 1")
    return levels


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _add_out(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", type=Path, required=True, help="Output directory")


def _add_panel(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--triangles", nargs="+", help="One triangle CSV per line")
    source.add_argument("--panel", help="Panel JSON written by simulate")
    parser.add_argument("--names", nargs="+", help="Line names, defaults to file stems")
    parser.add_argument("--cumulative", action="store_true", help="Triangles are cumulative")
    parser.add_argument("--loss-ratios", action="store_true", help="Scale cells by premium")
    parser.add_argument("--sub-triangle", type=_positive, help="Use the top-left K x K panel")


def _add_parallel(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--block-size", type=_positive, help="Draws per random-stream block")
    parser.add_argument("--workers", type=_positive, help="Worker threads")


def build_parser() -> argparse.ArgumentParser:
    """
    Build the ``evoreserve`` argument parser.

    Returns:
        argparse.ArgumentParser: Parser whose sub-commands set ``handler``
    """
    parser = argparse.ArgumentParser(
        prog="evoreserve",
        description="Multivariate evolutionary GLM claims reserving",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    simulate = subparsers.add_parser("simulate", help="Draw a synthetic panel")
    simulate.add_argument("--config", required=True, help="Simulation config JSON")
    simulate.add_argument("--seed", type=int, help="Override the config seed")
    _add_out(simulate)
    simulate.set_defaults(handler=commands.simulate)

    explore = subparsers.add_parser("explore", help="Static GLM residual analysis")
    _add_panel(explore)
    explore.add_argument("--structure", choices=STRUCTURES, default="hoerl_extended")
    explore.add_argument("--power", type=float, nargs="+", help="Tweedie power per line")
    explore.add_argument("--profile-power", action="store_true", help="Profile p per line")
    explore.add_argument("--prior-template", help="Prior JSON to fill with GLM block moments")
    _add_out(explore)
    explore.set_defaults(handler=commands.explore)

    fit_pf = subparsers.add_parser("fit-pf", help="Particle filter with parameter learning")
    _add_panel(fit_pf)
    fit_pf.add_argument("--prior", required=True, help="Prior JSON")
    fit_pf.add_argument("--particles", type=_positive, default=Config.DEFAULT_PARTICLES)
    fit_pf.add_argument("--xi", type=float, default=Config.DEFAULT_XI, help="Shrinkage")
    fit_pf.add_argument("--seed", type=int, default=Config.DEFAULT_SEED)
    fit_pf.add_argument("--extended-hoerl", action="store_true", help="Five-factor blocks")
    fit_pf.add_argument("--anchor-h1", action="store_true", help="Hold h_1 at zero")
    _add_parallel(fit_pf)
    _add_out(fit_pf)
    fit_pf.set_defaults(handler=commands.fit_pf)

    fit_kf = subparsers.add_parser("fit-kf", help="Dual Kalman filter, Gaussian model")
    _add_panel(fit_kf)
    fit_kf.add_argument("--prior", required=True, help="Prior JSON for the initial moments")
    fit_kf.add_argument("--params", help="Parameter JSON, defaults to prior locations")
    fit_kf.add_argument("--mle", action="store_true", help="Estimate parameters by MLE")
    fit_kf.add_argument(
        "--artificial-noise", type=float, default=Config.ARTIFICIAL_NOISE, help="psi dynamic"
    )
    fit_kf.add_argument("--log-transform", action="store_true", help="Model log claims")
    fit_kf.add_argument("--update-scheme", choices=("dual", "joint"), default="joint")
    fit_kf.add_argument("--joseph", action="store_true", help="Joseph-form covariances")
    fit_kf.add_argument("--extended-hoerl", action="store_true", help="Five-factor blocks")
    fit_kf.add_argument("--anchor-h1", action="store_true", help="Hold h_1 at zero")
    fit_kf.add_argument("--seed", type=int, default=Config.DEFAULT_SEED)
    _add_out(fit_kf)
    fit_kf.set_defaults(handler=commands.fit_kf)

    forecast = subparsers.add_parser("forecast", help="Reserve distribution of a fit")
    forecast.add_argument("--fit", required=True, help="Directory written by fit-pf or fit-kf")
    forecast.add_argument("--draws", type=_positive, default=Config.DEFAULT_DRAWS)
    forecast.add_argument("--levels", type=_levels, default=(0.75, 0.95))
    forecast.add_argument("--seed", type=int, default=Config.DEFAULT_SEED)
    _add_parallel(forecast)
    _add_out(forecast)
    forecast.set_defaults(handler=commands.forecast)

    diagnose = subparsers.add_parser("diagnose", help="Diagnostic tables of a fit")
    diagnose.add_argument("--fit", required=True, help="Directory written by fit-pf or fit-kf")
    diagnose.add_argument("--truth", help="Truth JSON written by simulate")
    _add_out(diagnose)
    diagnose.set_defaults(handler=commands.diagnose)

    reproduce = subparsers.add_parser("reproduce", help="Re-run a manifest or a study")
    target = reproduce.add_mutually_exclusive_group(required=True)
    target.add_argument("--manifest", help="manifest.json of an earlier run")
    target.add_argument("--study", choices=("risk-margins",), help="Published study")
    reproduce.add_argument("--statistics", default=str(commands.DEFAULT_STATISTICS))
    reproduce.add_argument("--levels", type=_levels, default=(0.75, 0.95))
    _add_out(reproduce)
    reproduce.set_defaults(handler=commands.reproduce)

    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse ``argv``, run the sub-command and write its manifest.

    Returns:
        int: 0 on success, 1 on a failed run, 2 on bad usage or invalid configuration
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2

    invalid = Config.validate()
    if invalid:
        for var, message in invalid.items():
            logger.error("Invalid configuration", var=var, message=message)
        return 1

    started_at = datetime.now(timezone.utc).isoformat()
    started = time.perf_counter()
    with logfire.span("command {command}", command=args.command):
        try:
            follow_up = args.handler(args)
        except ValidationError as e:
            logger.error("Invalid configuration file", command=args.command, errors=str(e))
            print(f"invalid configuration:\n{e}", file=sys.stderr)
            return 2
        except (ReservingError, ValueError, OSError) as e:
            logger.exception("Command failed", command=args.command, error=str(e))
            print(f"error: {e}", file=sys.stderr)
            return 1

    if follow_up is not None:
        return dispatch(follow_up)

    commands.write_manifest(argv, args, started_at, time.perf_counter() - started)
    logger.info("Command complete", command=args.command, out=str(args.out))
    return 0
