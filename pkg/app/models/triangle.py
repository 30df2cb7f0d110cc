"""Loss triangle data models."""

from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.errors import PanelError


class PanelKind(str, Enum):
    """Whether cells hold per-period payments or running totals."""

    INCREMENTAL = "incremental"
    CUMULATIVE = "cumulative"


class PanelScale(str, Enum):
    """Whether cells are monetary amounts or ratios to exposure."""

    RAW = "raw"
    LOSS_RATIO = "loss_ratio"


class PanelTransform(str, Enum):
    """Transform applied to cell values before modelling."""

    NONE = "none"
    LOG = "log"


class IngestConfig(BaseModel):
    """Options controlling how triangle CSV files are read."""

    kind: PanelKind = Field(
        PanelKind.INCREMENTAL, description="Whether the files hold incremental or cumulative claims"
    )
    convert_to_incremental: bool = Field(
        True, description="Difference cumulative input into incremental claims"
    )
    loss_ratios: bool = Field(False, description="Divide cells by the premium column")
    line_names: Optional[List[str]] = Field(
        None, description="Display names of the lines, defaults to the file stems"
    )


def upper_triangle_mask(dim: int) -> np.ndarray:
    """Boolean (I, I) grid that is True where i + j - 1 <= I (1-based indices)."""
    i = np.arange(1, dim + 1)[:, None]
    j = np.arange(1, dim + 1)[None, :]
    return (i + j - 1) <= dim


class TrianglePanel(BaseModel):
    """
    N aligned loss triangles of dimension I with their exposure vectors.

    ``values`` and ``mask`` are (N, I, I) arrays indexed by (line, accident
    year - 1, development year - 1). Unobserved cells hold NaN and are False
    in ``mask``; the observed region is always inside the upper triangle.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray = Field(..., description="Cell values, NaN where unobserved")
    mask: np.ndarray = Field(..., description="True where the cell is observed")
    exposures: np.ndarray = Field(..., description="(N, I) premiums by accident year")
    kind: PanelKind = Field(PanelKind.INCREMENTAL, description="Incremental or cumulative")
    scale: PanelScale = Field(PanelScale.RAW, description="Raw amounts or loss ratios")
    transform: PanelTransform = Field(PanelTransform.NONE, description="Applied transform")
    line_names: List[str] = Field(default_factory=list, description="Names of the lines")

    @model_validator(mode="after")
    def _check_shapes(self) -> "TrianglePanel":
        values = np.asarray(self.values, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        exposures = np.array(self.exposures, dtype=float)

        if values.ndim != 3 or values.shape[1] != values.shape[2] or values.shape[1] < 1:
            raise PanelError(f"dimension mismatch: values have shape {values.shape}")
        if mask.shape != values.shape:
            raise PanelError("dimension mismatch: mask and values differ in shape")
        n_lines, dim, _ = values.shape
        if exposures.shape != (n_lines, dim):
            raise PanelError("dimension mismatch: exposures must be (lines, accident years)")
        if not np.all(np.isfinite(exposures)) or np.any(exposures <= 0):
            raise PanelError("nonpositive exposure")
        if np.any(mask & ~upper_triangle_mask(dim)[None, :, :]):
            raise PanelError("observed cells must lie in the upper triangle")
        if np.any(~np.isfinite(values[mask])):
            raise PanelError("observed cells must be finite")

        values = np.where(mask, values, np.nan)
        for array in (values, mask, exposures):
            array.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "exposures", exposures)
        if not self.line_names:
            object.__setattr__(
                self, "line_names", [f"line_{n + 1}" for n in range(n_lines)]
            )
        elif len(self.line_names) != n_lines:
            raise PanelError("dimension mismatch: one name per line is required")
        return self

    @property
    def n_lines(self) -> int:
        """Number of lines of business N."""
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        """Number of accident (and development) years I."""
        return int(self.values.shape[1])

    def row(self, line: int, i: int) -> np.ndarray:
        """Upper-triangle part of accident row ``i`` (1-based): I - i + 1 cells."""
        return self.values[line, i - 1, : self.dim - i + 1]

    def row_mask(self, line: int, i: int) -> np.ndarray:
        """Observation mask matching :meth:`row`."""
        return self.mask[line, i - 1, : self.dim - i + 1]

    def observed_cells(self, line: int) -> tuple:
        """
        Observed cells of one line in row-major order.

        Returns:
            tuple: ``(i, j, y)`` arrays with 1-based accident and development indices
        """
        rows, cols = np.nonzero(self.mask[line])
        return rows + 1, cols + 1, self.values[line, rows, cols]
