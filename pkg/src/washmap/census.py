"""Block-level census labels to grid-cell training labels."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import AlignmentError, EmptyInputError, ValidationError
from .geo import GridSpec, Polygon, Raster, points_to_cells, polygon_centroid, rasterize_union_fraction

INDICATORS = ("water", "sewage", "toilet")
LABEL_PREFIX = "pct_no_"


def label_column(indicator: str) -> str:
    return LABEL_PREFIX + indicator


@dataclass
class BlockRecord:
    geometry: Polygon
    households: int
    pct_no: Dict[str, float]
    block_id: str = ""

    def __post_init__(self):
        if self.households < 0:
            raise ValidationError(f"block {self.block_id!r}: households must be >= 0")
        for k, v in self.pct_no.items():
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"block {self.block_id!r}: pct_no_{k}={v} outside [0, 1]")


@dataclass
class LabeledGrid:
    spec: GridSpec
    labels: Dict[str, Raster]
    household_weight: Raster
    valid_mask: np.ndarray
    coverage: Optional[Raster] = None
    report: Dict[str, int] = field(default_factory=dict)


@dataclass
class TrainingTable:
    cell_id: np.ndarray
    col: np.ndarray
    row: np.ndarray
    feature_names: List[str]
    X: np.ndarray
    label_names: List[str]
    Y: np.ndarray
    report: Dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.cell_id)

    def label(self, name: str) -> np.ndarray:
        if name not in self.label_names:
            name = label_column(name)
        return self.Y[:, self.label_names.index(name)]

    def __eq__(self, other):
        if not isinstance(other, TrainingTable):
            return NotImplemented
        return (self.feature_names == other.feature_names and self.label_names == other.label_names
                and all(np.array_equal(getattr(self, a), getattr(other, a))
                        for a in ("cell_id", "col", "row", "X", "Y")))


def blocks_to_grid(blocks: Sequence[BlockRecord], spec: GridSpec, nodata_area_threshold: float = 0.5,
                   indicators: Sequence[str] = INDICATORS, subsamples: int = 8) -> LabeledGrid:
    """Assign each block to the cell holding its centroid and pool labels per cell.

    A cell's label is the household-weighted mean of its member blocks
    (unweighted if all members report zero households). Cells whose
    data-covered area fraction falls below ``1 - nodata_area_threshold`` are
    masked, as are cells with no members.
    """
    if len(blocks) == 0:
        raise EmptyInputError("blocks_to_grid needs at least one block")
    if not 0.0 <= nodata_area_threshold <= 1.0:
        raise ValidationError("nodata_area_threshold must be in [0, 1]")
    for b in blocks:
        missing = [k for k in indicators if k not in b.pct_no]
        if missing:
            raise ValidationError(f"block {b.block_id!r} lacks indicators {missing}")

    cents = [polygon_centroid(b.geometry) for b in blocks]
    cx = np.array([c.x for c in cents])
    cy = np.array([c.y for c in cents])
    col, row, inside = points_to_cells(spec, cx, cy)
    cell = np.where(inside, row * spec.n_cols + col, -1)
    hh = np.array([int(b.households) for b in blocks], dtype=np.int64)
    pct = np.array([[b.pct_no[k] for k in indicators] for b in blocks], dtype=np.float64).reshape(len(blocks), -1)

    # canonical order makes the per-cell sums independent of input order
    keys = [cy, cx, *pct.T[::-1], hh, cell]
    order = np.lexsort(keys)
    order = order[cell[order] >= 0]
    c_sorted = cell[order]
    h_sorted = hh[order]
    p_sorted = pct[order]

    n = spec.n_cells
    labels = np.full((len(indicators), n), np.nan)
    weight = np.zeros(n, dtype=np.int64)
    has_members = np.zeros(n, dtype=bool)
    if len(order):
        starts = np.flatnonzero(np.r_[True, c_sorted[1:] != c_sorted[:-1]])
        cells = c_sorted[starts]
        counts = np.diff(np.r_[starts, len(c_sorted)])
        hw = np.add.reduceat(h_sorted, starts)
        wsum = np.add.reduceat(h_sorted[:, None] * p_sorted, starts, axis=0)
        usum = np.add.reduceat(p_sorted, starts, axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            pooled = np.where(hw[:, None] > 0, wsum / hw[:, None], usum / counts[:, None])
        # weighted-mean envelope can be broken by one ulp; clip to member range
        lo = np.minimum.reduceat(p_sorted, starts, axis=0)
        hi = np.maximum.reduceat(p_sorted, starts, axis=0)
        pooled = np.clip(pooled, lo, hi)
        labels[:, cells] = pooled.T
        weight[cells] = hw
        has_members[cells] = True

    coverage = rasterize_union_fraction([b.geometry for b in blocks], spec, subsamples)
    enough = coverage.values.ravel() >= (1.0 - nodata_area_threshold)
    valid = has_members & enough
    mask = ~valid.reshape(spec.shape)
    label_rasters = {k: Raster(spec, labels[j].reshape(spec.shape), mask) for j, k in enumerate(indicators)}
    report = {
        "n_blocks": len(blocks),
        "n_assigned": int(len(order)),
        "n_dropped_outside": int(len(blocks) - len(order)),
        "n_cells_with_members": int(has_members.sum()),
        "n_cells_masked_nodata": int((has_members & ~enough).sum()),
        "n_valid_cells": int(valid.sum()),
    }
    return LabeledGrid(spec, label_rasters, Raster(spec, weight.reshape(spec.shape).astype(np.float64)),
                       valid.reshape(spec.shape), coverage, report)


def join_features_labels(stack, grid: LabeledGrid) -> TrainingTable:
    """One row per label-valid cell whose feature layers are all unmasked."""
    if stack.spec != grid.spec:
        raise AlignmentError("feature stack and labeled grid use different grids")
    spec = grid.spec
    X, feat_masked = stack.matrix()
    valid = grid.valid_mask.ravel()
    keep = valid & ~feat_masked
    ids = np.flatnonzero(keep)
    if ids.size == 0:
        raise EmptyInputError("no cell has both valid labels and complete features")
    indicators = list(grid.labels)
    Y = np.column_stack([grid.labels[k].values.ravel()[ids] for k in indicators])
    report = {
        "n_rows": int(ids.size),
        "dropped_label_invalid": int((~valid).sum()),
        "dropped_feature_masked": int((valid & feat_masked).sum()),
    }
    return TrainingTable(
        cell_id=ids.astype(np.int64),
        col=(ids % spec.n_cols).astype(np.int64),
        row=(ids // spec.n_cols).astype(np.int64),
        feature_names=stack.names,
        X=X[ids],
        label_names=[label_column(k) for k in indicators],
        Y=Y,
        report=report,
    )
