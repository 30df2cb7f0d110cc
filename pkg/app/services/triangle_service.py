"""Loss triangle ingestion, conversion, scaling and index arithmetic."""

from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import logfire
import numpy as np
import pandas as pd

from app.models.errors import PanelError
from app.models.triangle import (
    IngestConfig,
    PanelKind,
    PanelScale,
    PanelTransform,
    TrianglePanel,
    upper_triangle_mask,
)

# Configure logger
logger = logfire.with_settings(tags=[__name__])

PathLike = Union[str, Path]


def calendar_index(i: int, j: int) -> int:
    """Calendar year t = i + j - 1 of cell (i, j), all 1-based."""
    if i < 1 or j < 1:
        raise ValueError("accident and development indices start at 1")
    return i + j - 1


def _read_triangle_csv(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read one line's triangle: first column premium, then development years.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (I, I) values with NaN for blanks, and the premium column
    """
    try:
        frame = pd.read_csv(path, float_precision="round_trip", skip_blank_lines=True)
    except pd.errors.EmptyDataError as e:
        raise PanelError(f"dimension mismatch/empty: {path} has no data") from e

    if frame.shape[0] == 0 or frame.shape[1] < 2:
        raise PanelError(f"dimension mismatch/empty: {path} has no triangle cells")

    try:
        numeric = frame.apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as e:
        raise PanelError(f"non-numeric cell in {path}: {e}") from e

    premiums = numeric.iloc[:, 0].to_numpy(dtype=float)
    values = numeric.iloc[:, 1:].to_numpy(dtype=float)
    if values.shape[0] != values.shape[1]:
        raise PanelError(
            f"dimension mismatch: {path} has {values.shape[0]} accident years "
            f"and {values.shape[1]} development years"
        )
    return values, premiums


def load_panel(paths: Sequence[PathLike], config: IngestConfig) -> TrianglePanel:
    """
    Load one CSV per line into a validated panel.

    Cells outside the upper triangle are dropped, blank cells inside it are
    carried as missing. Cumulative input is differenced when requested and
    loss-ratio scaling is applied last.

    Args:
        paths: One file per line of business
        config: Ingestion options

    Returns:
        TrianglePanel: Validated panel

    Raises:
        PanelError: On empty files, dimension mismatch, non-numeric cells or bad exposures
    """
    if not paths:
        raise PanelError("dimension mismatch/empty: no triangle files given")

    with logfire.span("load_panel", files=[str(p) for p in paths]):
        triangles: List[np.ndarray] = []
        premiums: List[np.ndarray] = []
        for path in paths:
            values, premium = _read_triangle_csv(Path(path))
            triangles.append(values)
            premiums.append(premium)

        dims = {values.shape[0] for values in triangles}
        if len(dims) != 1:
            raise PanelError(f"dimension mismatch across lines: {sorted(dims)}")
        dim = dims.pop()

        upper = upper_triangle_mask(dim)
        values = np.stack(triangles)
        dropped = int(np.sum(np.isfinite(values) & ~upper[None]))
        if dropped:
            logger.warn("Ignoring cells below the diagonal", cells=dropped)
        mask = np.isfinite(values) & upper[None]

        exposures = np.stack(premiums)
        if np.any(~np.isfinite(exposures)):
            if config.loss_ratios:
                raise PanelError("missing exposure: premium column has blanks")
            if np.all(~np.isfinite(exposures)):
                exposures = np.ones_like(exposures)
            else:
                raise PanelError("missing exposure: premium column is partly blank")

        names = config.line_names or [Path(p).stem for p in paths]
        panel = TrianglePanel(
            values=values,
            mask=mask,
            exposures=exposures,
            kind=config.kind,
            line_names=list(names),
        )

        if panel.kind == PanelKind.CUMULATIVE and config.convert_to_incremental:
            panel = to_incremental(panel)
        if config.loss_ratios:
            panel = to_loss_ratios(panel)

        logger.info(
            "Loaded panel",
            lines=panel.n_lines,
            dim=panel.dim,
            observed=int(panel.mask.sum()),
            kind=panel.kind.value,
            scale=panel.scale.value,
        )
        return panel


def write_panel(panel: TrianglePanel, directory: PathLike) -> List[Path]:
    """
    Write one CSV per line in the layout :func:`load_panel` reads.

    Returns:
        List[Path]: Written files, in line order
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for n, name in enumerate(panel.line_names):
        frame = pd.DataFrame(
            panel.values[n], columns=[f"dev_{j}" for j in range(1, panel.dim + 1)]
        )
        frame.insert(0, "premium", panel.exposures[n])
        path = directory / f"{name}.csv"
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        written.append(path)
    return written


def panel_to_json(panel: TrianglePanel) -> Dict[str, Any]:
    """JSON-ready dict with an explicit mask array; unobserved cells become null."""
    return {
        "line_names": panel.line_names,
        "kind": panel.kind.value,
        "scale": panel.scale.value,
        "transform": panel.transform.value,
        "exposures": panel.exposures.tolist(),
        "mask": panel.mask.astype(int).tolist(),
        "values": [
            [
                [float(v) if m else None for v, m in zip(row, row_mask)]
                for row, row_mask in zip(line_values, line_mask)
            ]
            for line_values, line_mask in zip(panel.values, panel.mask)
        ],
    }


def panel_from_json(payload: Dict[str, Any]) -> TrianglePanel:
    """Inverse of :func:`panel_to_json`."""
    mask = np.asarray(payload["mask"], dtype=bool)
    values = np.array(
        [
            [[np.nan if v is None else v for v in row] for row in line]
            for line in payload["values"]
        ],
        dtype=float,
    )
    return TrianglePanel(
        values=values,
        mask=mask,
        exposures=np.asarray(payload["exposures"], dtype=float),
        kind=PanelKind(payload["kind"]),
        scale=PanelScale(payload["scale"]),
        transform=PanelTransform(payload.get("transform", "none")),
        line_names=list(payload["line_names"]),
    )


def to_incremental(panel: TrianglePanel) -> TrianglePanel:
    """
    Difference a cumulative panel: cell(i, j) = cum(i, j) - cum(i, j - 1), cum(i, 0) = 0.

    An increment is observed only when both cumulative cells it needs are.
    """
    if panel.kind != PanelKind.CUMULATIVE:
        raise PanelError("to_incremental needs a cumulative panel")
    cumulative = np.where(panel.mask, panel.values, 0.0)
    previous = np.concatenate([np.zeros_like(cumulative[:, :, :1]), cumulative[:, :, :-1]], axis=2)
    previous_mask = np.concatenate(
        [np.ones_like(panel.mask[:, :, :1]), panel.mask[:, :, :-1]], axis=2
    )
    mask = panel.mask & previous_mask
    values = np.where(mask, cumulative - previous, np.nan)
    return TrianglePanel.model_validate(
        _fields(panel, values, mask, kind=PanelKind.INCREMENTAL)
    )


def to_cumulative(panel: TrianglePanel) -> TrianglePanel:
    """Running row sums of an incremental panel; a gap masks the rest of its row."""
    if panel.kind != PanelKind.INCREMENTAL:
        raise PanelError("to_cumulative needs an incremental panel")
    mask = np.logical_and.accumulate(panel.mask, axis=2)
    cumulative = np.cumsum(np.where(panel.mask, panel.values, 0.0), axis=2)
    return TrianglePanel.model_validate(
        _fields(panel, np.where(mask, cumulative, np.nan), mask, kind=PanelKind.CUMULATIVE)
    )


def to_loss_ratios(panel: TrianglePanel) -> TrianglePanel:
    """Divide every cell by its accident year's exposure."""
    if panel.scale != PanelScale.RAW:
        raise PanelError("panel is already scaled to loss ratios")
    values = panel.values / panel.exposures[:, :, None]
    return TrianglePanel.model_validate(
        _fields(panel, values, panel.mask, scale=PanelScale.LOSS_RATIO)
    )


def from_loss_ratios(panel: TrianglePanel) -> TrianglePanel:
    """Multiply loss ratios back by exposure."""
    if panel.scale != PanelScale.LOSS_RATIO:
        raise PanelError("panel is not scaled to loss ratios")
    values = panel.values * panel.exposures[:, :, None]
    return TrianglePanel.model_validate(_fields(panel, values, panel.mask, scale=PanelScale.RAW))


def log_transform(panel: TrianglePanel) -> TrianglePanel:
    """Log of every observed cell, for Gaussian modelling of log claims."""
    if panel.transform != PanelTransform.NONE:
        raise PanelError("panel is already transformed")
    observed = panel.values[panel.mask]
    if np.any(observed <= 0):
        raise PanelError("log transform needs strictly positive observed cells")
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.log(panel.values)
    return TrianglePanel.model_validate(
        _fields(panel, values, panel.mask, transform=PanelTransform.LOG)
    )


def sub_triangle(panel: TrianglePanel, size: int) -> TrianglePanel:
    """Top-left ``size`` x ``size`` sub-panel, as at calendar year ``size``."""
    if not 1 <= size <= panel.dim:
        raise PanelError(f"sub-triangle size must be within 1..{panel.dim}")
    upper = upper_triangle_mask(size)[None]
    mask = panel.mask[:, :size, :size] & upper
    values = np.where(mask, panel.values[:, :size, :size], np.nan)
    payload = _fields(panel, values, mask)
    payload["exposures"] = panel.exposures[:, :size]
    return TrianglePanel.model_validate(payload)


def _fields(panel: TrianglePanel, values: np.ndarray, mask: np.ndarray, **update) -> Dict[str, Any]:
    payload: Dict[str, Any] = {
        "values": values,
        "mask": mask,
        "exposures": panel.exposures,
        "kind": panel.kind,
        "scale": panel.scale,
        "transform": panel.transform,
        "line_names": list(panel.line_names),
    }
    payload.update(update)
    return payload
