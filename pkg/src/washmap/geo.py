"""Planar grid geometry shared by every pipeline stage.

All coordinates are projected meters. Rows count southward from the north
edge, columns eastward from the west edge.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyInputError, GeometryError

EARTH_RADIUS_M = 6_371_000.0


@dataclass(frozen=True)
class GridSpec:
    origin_x: float
    origin_y: float
    cell_size: float
    n_cols: int
    n_rows: int
    crs_tag: str = ""

    def __post_init__(self):
        for name in ("origin_x", "origin_y", "cell_size"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("n_cols", "n_rows"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise GeometryError(f"cell_size must be positive, got {self.cell_size}")
        if self.n_cols < 1 or self.n_rows < 1:
            raise GeometryError(f"grid must have at least one cell, got {self.n_cols}x{self.n_rows}")
        if not (math.isfinite(self.origin_x) and math.isfinite(self.origin_y)):
            raise GeometryError("grid origin must be finite")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    def aligned(self, other: "GridSpec") -> bool:
        return self == other

    def centroids(self) -> Tuple[np.ndarray, np.ndarray]:
        """Centroid coordinate arrays of shape (n_rows, n_cols)."""
        xs = self.origin_x + (np.arange(self.n_cols) + 0.5) * self.cell_size
        ys = self.origin_y - (np.arange(self.n_rows) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)

    def to_dict(self) -> dict:
        return {
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "cell_size": self.cell_size,
            "n_cols": self.n_cols,
            "n_rows": self.n_rows,
            "crs_tag": self.crs_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            origin_x=float(d["origin_x"]),
            origin_y=float(d["origin_y"]),
            cell_size=float(d["cell_size"]),
            n_cols=int(d["n_cols"]),
            n_rows=int(d["n_rows"]),
            crs_tag=str(d.get("crs_tag", "")),
        )


@dataclass(frozen=True, eq=False)
class Raster:
    """Single-band surface on a GridSpec.

    ``values`` has shape ``(n_rows, n_cols)``; masked cells hold NaN so that an
    accidental numeric read propagates instead of silently contributing.
    """

    spec: GridSpec
    values: np.ndarray
    nodata_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(self.spec.shape)
        if self.nodata_mask is None:
            mask = ~np.isfinite(values)
        else:
            mask = np.array(self.nodata_mask, dtype=bool).reshape(self.spec.shape)
        if not np.all(np.isfinite(values[~mask])):
            raise ValueError("unmasked raster cells must be finite")
        values[mask] = np.nan
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "nodata_mask", mask)

    @classmethod
    def full(cls, spec: GridSpec, fill: float) -> "Raster":
        return cls(spec, np.full(spec.shape, fill, dtype=np.float64))

    @property
    def valid(self) -> np.ndarray:
        return ~self.nodata_mask

    def valid_values(self) -> np.ndarray:
        return self.values[~self.nodata_mask]

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.nodata_mask, other.nodata_mask)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    def __repr__(self):
        return f"Raster({self.spec.n_rows}x{self.spec.n_cols}, masked={int(self.nodata_mask.sum())})"


@dataclass(frozen=True)
class PointXY:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")


def _ring_signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _normalize_ring(vertices, ccw: bool) -> np.ndarray:
    ring = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    if not np.all(np.isfinite(ring)):
        raise GeometryError("ring has non-finite vertices")
    if len(np.unique(ring, axis=0)) < 3:
        raise GeometryError("ring needs at least 3 distinct vertices")
    area = _ring_signed_area(ring)
    if area == 0.0:
        raise GeometryError("ring has zero area")
    if (area > 0) != ccw:
        ring = ring[::-1].copy()
    ring.setflags(write=False)
    return ring


class Polygon:
    """Simple polygon with optional holes.

    The exterior is stored counter-clockwise and holes clockwise, so summing
    signed ring areas gives the net area directly.
    """

    __slots__ = ("exterior", "interiors", "_area")

    def __init__(self, exterior, interiors: Sequence = ()):  # noqa: D107
        self.exterior = _normalize_ring(exterior, ccw=True)
        self.interiors = tuple(_normalize_ring(r, ccw=False) for r in interiors)
        area = sum(_ring_signed_area(r) for r in self.rings)
        if not area > 0:
            raise GeometryError("polygon has non-positive net area")
        self._area = area

    @property
    def rings(self) -> Tuple[np.ndarray, ...]:
        return (self.exterior,) + self.interiors

    @property
    def area(self) -> float:
        return self._area

    def bounds(self) -> Tuple[float, float, float, float]:
        e = self.exterior
        return float(e[:, 0].min()), float(e[:, 1].min()), float(e[:, 0].max()), float(e[:, 1].max())

    def translate(self, dx: float, dy: float) -> "Polygon":
        shift = np.array([dx, dy])
        return Polygon(self.exterior + shift, [r + shift for r in self.interiors])

    def contains(self, x, y) -> np.ndarray:
        return points_in_polygon(np.asarray(x, dtype=float), np.asarray(y, dtype=float), self)

    def __eq__(self, other):
        if not isinstance(other, Polygon):
            return NotImplemented
        return len(self.rings) == len(other.rings) and all(
            np.array_equal(a, b) for a, b in zip(self.rings, other.rings)
        )

    def __repr__(self):
        return f"Polygon({len(self.exterior)} vertices, {len(self.interiors)} holes, area={self._area:.6g})"


def cell_centroid(spec: GridSpec, col: int, row: int) -> PointXY:
    if not (0 <= col < spec.n_cols and 0 <= row < spec.n_rows):
        raise IndexError(f"cell ({col}, {row}) outside {spec.n_cols}x{spec.n_rows} grid")
    return PointXY(
        spec.origin_x + (col + 0.5) * spec.cell_size,
        spec.origin_y - (row + 0.5) * spec.cell_size,
    )


def points_to_cells(spec: GridSpec, x, y) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized point lookup. Returns (col, row, inside) arrays."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    col = np.floor((x - spec.origin_x) / spec.cell_size)
    # half-open in both axes: west edge and north edge belong to the cell
    row = np.floor((spec.origin_y - y) / spec.cell_size)
    inside = (col >= 0) & (col < spec.n_cols) & (row >= 0) & (row < spec.n_rows)
    col = np.where(inside, col, -1).astype(np.int64)
    row = np.where(inside, row, -1).astype(np.int64)
    return col, row, inside


def point_to_cell(spec: GridSpec, p: PointXY) -> Optional[Tuple[int, int]]:
    col, row, inside = points_to_cells(spec, p.x, p.y)
    if not bool(inside):
        return None
    return int(col), int(row)


def polygon_centroid(poly: Polygon) -> PointXY:
    # shift to the first vertex before the shoelace sums to limit cancellation
    x0, y0 = poly.exterior[0]
    area2 = 0.0
    cx = 0.0
    cy = 0.0
    for ring in poly.rings:
        x = ring[:, 0] - x0
        y = ring[:, 1] - y0
        xn = np.roll(x, -1)
        yn = np.roll(y, -1)
        cross = x * yn - xn * y
        area2 += float(cross.sum())
        cx += float(((x + xn) * cross).sum())
        cy += float(((y + yn) * cross).sum())
    if area2 == 0.0:
        raise GeometryError("cannot take the centroid of a zero-area polygon")
    return PointXY(x0 + cx / (3.0 * area2), y0 + cy / (3.0 * area2))


def points_in_polygon(px: np.ndarray, py: np.ndarray, poly: Polygon) -> np.ndarray:
    """Even-odd crossing test over all rings."""
    inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    for ring in poly.rings:
        xs = ring[:, 0]
        ys = ring[:, 1]
        xe = np.roll(xs, -1)
        ye = np.roll(ys, -1)
        for x1, y1, x2, y2 in zip(xs, ys, xe, ye):
            if y1 == y2:
                continue
            crosses = (y1 > py) != (y2 > py)
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (px < x_at)
    return inside


def _cell_window(poly: Polygon, spec: GridSpec):
    xmin, ymin, xmax, ymax = poly.bounds()
    c0 = max(int(math.floor((xmin - spec.origin_x) / spec.cell_size)), 0)
    c1 = min(int(math.floor((xmax - spec.origin_x) / spec.cell_size)), spec.n_cols - 1)
    r0 = max(int(math.floor((spec.origin_y - ymax) / spec.cell_size)), 0)
    r1 = min(int(math.floor((spec.origin_y - ymin) / spec.cell_size)), spec.n_rows - 1)
    return c0, c1, r0, r1


def _subsample_points(spec: GridSpec, c0, c1, r0, r1, subsamples):
    offsets = (np.arange(subsamples) + 0.5) / subsamples * spec.cell_size
    xs = (spec.origin_x + np.arange(c0, c1 + 1)[:, None] * spec.cell_size + offsets).ravel()
    ys = (spec.origin_y - np.arange(r0, r1 + 1)[:, None] * spec.cell_size - offsets).ravel()
    return np.meshgrid(xs, ys)


def _coverage_hits(poly: Polygon, spec: GridSpec, subsamples: int):
    c0, c1, r0, r1 = _cell_window(poly, spec)
    if c0 > c1 or r0 > r1:
        return None
    gx, gy = _subsample_points(spec, c0, c1, r0, r1, subsamples)
    return (c0, c1, r0, r1), points_in_polygon(gx, gy, poly)


def rasterize_polygon_fraction(poly: Polygon, spec: GridSpec, subsamples: int = 8) -> Raster:
    """Fraction of each cell covered by ``poly``, on an s-by-s sample lattice per cell."""
    if subsamples < 1:
        raise ValueError("subsamples must be >= 1")
    out = np.zeros(spec.shape)
    window = _coverage_hits(poly, spec, subsamples)
    if window is not None:
        (c0, c1, r0, r1), hits = window
        nr, nc = r1 - r0 + 1, c1 - c0 + 1
        counts = hits.reshape(nr, subsamples, nc, subsamples).sum(axis=(1, 3))
        out[r0 : r1 + 1, c0 : c1 + 1] = counts / float(subsamples * subsamples)
    return Raster(spec, out)


def rasterize_union_fraction(polys: Sequence[Polygon], spec: GridSpec, subsamples: int = 8) -> Raster:
    """Fraction of each cell covered by the union of ``polys``.

    Overlapping polygons are counted once per sample point.
    """
    if subsamples < 1:
        raise ValueError("subsamples must be >= 1")
    lattice = np.zeros((spec.n_rows * subsamples, spec.n_cols * subsamples), dtype=bool)
    for poly in polys:
        window = _coverage_hits(poly, spec, subsamples)
        if window is None:
            continue
        (c0, c1, r0, r1), hits = window
        lattice[r0 * subsamples : (r1 + 1) * subsamples, c0 * subsamples : (c1 + 1) * subsamples] |= hits
    counts = lattice.reshape(spec.n_rows, subsamples, spec.n_cols, subsamples).sum(axis=(1, 3))
    return Raster(spec, counts / float(subsamples * subsamples))


@dataclass(frozen=True)
class Equirectangular:
    """Equirectangular projection with standard parallel ``lat0`` (degrees)."""

    lat0: float

    @classmethod
    def about_mean_latitude(cls, lats) -> "Equirectangular":
        lats = np.asarray(lats, dtype=float)
        if lats.size == 0:
            raise EmptyInputError("no latitudes to center the projection on")
        return cls(float(lats.mean()))

    @property
    def crs_tag(self) -> str:
        return f"eqc:lat0={self.lat0!r}"

    def forward(self, lon, lat):
        lam = np.radians(np.asarray(lon, dtype=float))
        phi = np.radians(np.asarray(lat, dtype=float))
        x = EARTH_RADIUS_M * lam * math.cos(math.radians(self.lat0))
        y = EARTH_RADIUS_M * phi
        return x, y
