"""Sub-command handlers: each reads its inputs, runs one pipeline step and returns."""

import argparse
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional

import logfire

from app.models.params import KalmanConfig, ModelParams, ParticleFilterConfig, PriorSpec, SimConfig
from app.models.results import RunManifest
from app.models.triangle import IngestConfig, PanelKind, TrianglePanel
from app.services import triangle_service
from app.services.kalman_service import InitialMoments
from app.services.pipeline_service import (
    PipelineService,
    load_fit,
    params_from_prior,
    truth_from_json,
)
from app.utils.io import file_digest, payload_digest, read_json, write_json

# Configure logger
logger = logfire.with_settings(tags=[__name__])

MANIFEST_FILE = "manifest.json"
DEFAULT_STATISTICS = Path(__file__).resolve().parents[2] / "data" / "reserve_summary.json"

# Argument names that point at input files or fit directories
_INPUT_ARGS = ("config", "triangles", "panel", "prior", "params", "prior_template", "truth")
_PACKAGES = ("evoreserve", "numpy", "scipy", "pandas", "pydantic", "logfire")


def _load_panel(args: argparse.Namespace) -> TrianglePanel:
    if args.panel:
        panel = triangle_service.panel_from_json(read_json(args.panel))
        if args.loss_ratios:
            panel = triangle_service.to_loss_ratios(panel)
    elif args.triangles:
        config = IngestConfig(
            kind=PanelKind.CUMULATIVE if args.cumulative else PanelKind.INCREMENTAL,
            loss_ratios=args.loss_ratios,
            line_names=args.names,
        )
        panel = triangle_service.load_panel(args.triangles, config)
    else:
        raise ValueError("either --panel or --triangles is required")
    if getattr(args, "sub_triangle", None):
        panel = triangle_service.sub_triangle(panel, args.sub_triangle)
        logger.info("Using sub-triangle", dim=panel.dim)
    return panel


def _load_prior(args: argparse.Namespace) -> PriorSpec:
    payload = read_json(args.prior)
    if args.extended_hoerl:
        payload["extended"] = True
    if getattr(args, "anchor_h1", False):
        payload["anchor_h1_to_zero"] = True
    return PriorSpec.model_validate(payload)


def simulate(args: argparse.Namespace) -> None:
    """Draw a synthetic panel from a simulation config."""
    payload = read_json(args.config)
    if args.seed is not None:
        payload["seed"] = args.seed
    config = SimConfig.model_validate(payload)
    PipelineService(args.out).simulate(config)


def explore(args: argparse.Namespace) -> None:
    """Static GLM fits, residual tables and association measures."""
    panel = _load_panel(args)
    template = None
    if args.prior_template:
        template = PriorSpec.model_validate(read_json(args.prior_template))
    PipelineService(args.out).explore(
        panel,
        structure=args.structure,
        powers=args.power,
        profile=args.profile_power,
        prior_template=template,
    )


def fit_pf(args: argparse.Namespace) -> None:
    """Particle filter with parameter learning."""
    panel = _load_panel(args)
    prior = _load_prior(args)
    config = ParticleFilterConfig(
        particles=args.particles,
        xi=args.xi,
        seed=args.seed,
        block_size=args.block_size,
        workers=args.workers,
    )
    PipelineService(args.out).fit_particles(panel, prior, config)


def fit_kf(args: argparse.Namespace) -> None:
    """Dual Kalman filter on a Gaussian (optionally log) panel."""
    panel = _load_panel(args)
    if args.log_transform:
        panel = triangle_service.log_transform(panel)
    prior = _load_prior(args)
    if args.params:
        params = ModelParams.model_validate(read_json(args.params))
    else:
        params = params_from_prior(prior)
    config = KalmanConfig(
        artificial_noise=args.artificial_noise,
        update_scheme=args.update_scheme,
        joseph=args.joseph,
        seed=args.seed,
    )
    PipelineService(args.out).fit_kalman(
        panel, params, InitialMoments.from_prior(prior), prior.extended, config, mle=args.mle
    )


def forecast(args: argparse.Namespace) -> None:
    """Reserve distribution, VaR and risk margins of a stored fit."""
    fit = load_fit(args.fit)
    PipelineService(args.out).forecast(
        fit, args.draws, args.levels, args.seed, args.block_size, args.workers
    )


def diagnose(args: argparse.Namespace) -> None:
    """Diagnostic tables of a stored fit."""
    fit = load_fit(args.fit)
    truth = truth_from_json(read_json(args.truth)) if args.truth else None
    PipelineService(args.out).diagnose(fit, truth)


def reproduce(args: argparse.Namespace) -> Optional[List[str]]:
    """
    Re-run a recorded command, or recompute the published risk-margin study.

    Returns:
        Optional[List[str]]: The recorded command line to dispatch, if any
    """
    if args.manifest:
        manifest = RunManifest.model_validate(read_json(args.manifest))
        logger.info("Re-running recorded command", command=manifest.command)
        return list(manifest.command) + ["--out", str(args.out)]
    PipelineService(args.out).risk_margin_study(args.statistics, args.levels)
    return None


def command_line(argv: List[str]) -> List[str]:
    """``argv`` without its ``--out`` option."""
    stripped = []
    skip = False
    for token in argv:
        if skip:
            skip = False
            continue
        if token == "--out":
            skip = True
            continue
        if token.startswith("--out="):
            continue
        stripped.append(token)
    return stripped


def _versions() -> Dict[str, str]:
    versions = {}
    for package in _PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def _inputs(args: argparse.Namespace) -> Dict[str, str]:
    digests = {}
    paths: List[Any] = []
    for name in _INPUT_ARGS:
        value = getattr(args, name, None)
        if value:
            paths.extend(value if isinstance(value, list) else [value])
    fit_dir = getattr(args, "fit", None)
    if fit_dir:
        paths.extend(sorted(p for p in Path(fit_dir).iterdir() if p.name != MANIFEST_FILE))
    if getattr(args, "command", None) == "reproduce" and not getattr(args, "manifest", None):
        paths.append(args.statistics)
    for path in paths:
        digests[str(path)] = file_digest(path)
    return digests


def resolved_config(args: argparse.Namespace) -> Dict[str, Any]:
    """Every parsed option except the handler and the output directory."""
    return {
        key: (str(value) if isinstance(value, Path) else value)
        for key, value in vars(args).items()
        if key not in ("handler", "out")
    }


def write_manifest(
    argv: List[str], args: argparse.Namespace, started_at: str, elapsed: float
) -> Path:
    """Write the run manifest next to the command's outputs."""
    seeds = {"seed": int(args.seed)} if getattr(args, "seed", None) is not None else {}
    manifest = RunManifest(
        command=command_line(argv),
        out_dir=str(args.out),
        config_hash=payload_digest(resolved_config(args)),
        seeds=seeds,
        versions=_versions(),
        inputs=_inputs(args),
        started_at=started_at,
        elapsed_seconds=elapsed,
    )
    return write_json(manifest.model_dump(), Path(args.out) / MANIFEST_FILE)
