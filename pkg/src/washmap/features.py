"""Grid-aligned feature stack: compositing, resampling, normalization, POI distances."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import AlignmentError, EmptyInputError, ValidationError
from .geo import GridSpec, Raster, points_to_cells

POI_TYPES = ("waterway", "commercial", "restaurant", "hospital", "airport", "highway")
SATELLITE_LAYERS = ("vegetation", "aridity", "temperature", "nighttime_lights", "population",
                    "elevation", "urban_change")
CATEGORICAL_LAYERS = frozenset({"urban_change"})
LOW_ACCESS_METERS = 5000.0


@dataclass
class FeatureStack:
    spec: GridSpec
    layers: Dict[str, Raster]
    provenance: Dict[str, dict] = field(default_factory=dict)
    auxiliary: Dict[str, Raster] = field(default_factory=dict)

    def __post_init__(self):
        for name, r in list(self.layers.items()) + list(self.auxiliary.items()):
            if r.spec != self.spec:
                raise AlignmentError(f"layer {name!r} is not aligned to the stack grid")

    @property
    def names(self) -> List[str]:
        return list(self.layers)

    def normalization(self) -> Dict[str, dict]:
        return {n: dict(p["normalization"]) for n, p in self.provenance.items() if "normalization" in p}

    def matrix(self, names: Optional[Sequence[str]] = None):
        """(n_cells, p) matrix in row-major cell order and the any-masked flag per cell."""
        names = self.names if names is None else list(names)
        X = np.column_stack([self.layers[n].values.ravel() for n in names])
        masked = np.zeros(self.spec.n_cells, dtype=bool)
        for n in names:
            masked |= self.layers[n].nodata_mask.ravel()
        return X, masked


def _require_aligned(rasters: Sequence[Raster]):
    spec = rasters[0].spec
    for k, r in enumerate(rasters[1:], start=1):
        if r.spec != spec:
            raise AlignmentError(f"raster {k} is not aligned with raster 0")


def median_composite(rasters: Sequence[Raster]) -> Raster:
    """Per-cell median over unmasked inputs; cells masked in every input stay masked."""
    if len(rasters) == 0:
        raise EmptyInputError("median_composite needs at least one raster")
    _require_aligned(rasters)
    cube = np.stack([r.values for r in rasters])
    present = np.any(~np.isnan(cube), axis=0)
    out = np.full(rasters[0].spec.shape, np.nan)
    if present.any():
        out[present] = np.nanmedian(cube[:, present], axis=0)
    return Raster(rasters[0].spec, out, ~present)


def resample(src: Raster, target: GridSpec, method: str = "bilinear") -> Raster:
    """Sample ``src`` at every target cell centroid.

    Bilinear blends the four surrounding source centroids and falls back to
    nearest when any of them is masked or off-grid. Target centroids outside
    the source extent come out masked.
    """
    if method not in ("nearest", "bilinear"):
        raise ValidationError(f"unknown resampling method {method!r}")
    s = src.spec
    if s.crs_tag != target.crs_tag:
        raise AlignmentError(f"crs mismatch: {s.crs_tag!r} vs {target.crs_tag!r}")
    if s == target:
        return Raster(target, src.values, src.nodata_mask)

    cx, cy = target.centroids()
    col, row, inside = points_to_cells(s, cx, cy)
    vals = src.values
    nearest = np.full(target.shape, np.nan)
    nearest[inside] = vals[row[inside], col[inside]]
    if method == "nearest":
        return Raster(target, nearest)

    u = (cx - s.origin_x) / s.cell_size - 0.5
    v = (s.origin_y - cy) / s.cell_size - 0.5
    c0 = np.floor(u).astype(np.int64)
    r0 = np.floor(v).astype(np.int64)
    fu = u - c0
    fv = v - r0
    ok = inside & (c0 >= 0) & (r0 >= 0) & (c0 + 1 < s.n_cols) & (r0 + 1 < s.n_rows)
    c0s = np.where(ok, c0, 0)
    r0s = np.where(ok, r0, 0)
    c1s = np.where(ok, c0 + 1, 0)
    r1s = np.where(ok, r0 + 1, 0)
    v00 = vals[r0s, c0s]
    v10 = vals[r0s, c1s]
    v01 = vals[r1s, c0s]
    v11 = vals[r1s, c1s]
    ok &= ~(np.isnan(v00) | np.isnan(v10) | np.isnan(v01) | np.isnan(v11))
    # nested lerps: constants and the source grid itself are reproduced exactly
    with np.errstate(invalid="ignore"):
        top = v00 + fu * (v10 - v00)
        bottom = v01 + fu * (v11 - v01)
        blend = top + fv * (bottom - top)
    out = np.where(ok, blend, nearest)
    return Raster(target, out)


def minmax_stats(r: Raster) -> dict:
    vals = r.valid_values()
    if vals.size == 0:
        raise EmptyInputError("cannot normalize an all-masked raster")
    return {"min": float(vals.min()), "max": float(vals.max())}


def normalize_minmax(r: Raster, stats: Optional[dict] = None) -> Raster:
    """Affine map of unmasked values onto [0, 1].

    A constant raster maps to 0.5. With ``stats`` from a previous run the same
    map is reused and results are clipped to [0, 1].
    """
    if stats is None:
        stats = minmax_stats(r)
    elif not r.valid.any():
        raise EmptyInputError("cannot normalize an all-masked raster")
    lo, hi = stats["min"], stats["max"]
    if hi > lo:
        out = np.clip((r.values - lo) / (hi - lo), 0.0, 1.0)
    else:
        out = np.full(r.spec.shape, 0.5)
    return Raster(r.spec, out, r.nodata_mask)


class SpatialIndex:
    """Exact Euclidean nearest-neighbour lookup over planar points.

    A KD-tree proposes candidates; the reported distance is always recomputed
    as ``sqrt(dx*dx + dy*dy)`` and ties resolve to the lowest point index.
    """

    def __init__(self, x, y):
        self.x = np.ascontiguousarray(x, dtype=np.float64).ravel()
        self.y = np.ascontiguousarray(y, dtype=np.float64).ravel()
        if self.x.size == 0:
            raise EmptyInputError("spatial index needs at least one point")
        if self.x.shape != self.y.shape:
            raise ValidationError("x and y differ in length")
        self._tree = cKDTree(np.column_stack([self.x, self.y]))

    def __len__(self):
        return self.x.size

    def _exact(self, qx, qy, idx):
        dx = qx - self.x[idx]
        dy = qy - self.y[idx]
        return np.sqrt(dx * dx + dy * dy)

    def query(self, qx, qy):
        """Return (distance, index) arrays for each query point."""
        qx = np.asarray(qx, dtype=np.float64).ravel()
        qy = np.asarray(qy, dtype=np.float64).ravel()
        k = min(8, len(self))
        _, cand = self._tree.query(np.column_stack([qx, qy]), k=k)
        cand = cand.reshape(len(qx), k)
        d = self._exact(qx[:, None], qy[:, None], cand)
        # lexicographic (distance, index) argmin over the candidates
        order = np.lexsort((cand, d), axis=1)[:, 0]
        best_d = d[np.arange(len(qx)), order]
        best_i = cand[np.arange(len(qx)), order]
        if k < len(self):
            # the k-th candidate bounds the rest only when clearly farther
            unsure = np.flatnonzero(d.max(axis=1) <= best_d * (1 + 1e-9) + 1e-9)
            for q in unsure:
                near = np.asarray(self._tree.query_ball_point([qx[q], qy[q]], best_d[q] * (1 + 1e-9) + 1e-9))
                dd = self._exact(qx[q], qy[q], near)
                j = np.lexsort((near, dd))[0]
                best_d[q], best_i[q] = dd[j], near[j]
        return best_d, best_i


def build_spatial_index(points) -> SpatialIndex:
    pts = list(points)
    if not pts:
        raise EmptyInputError("spatial index needs at least one point")
    return SpatialIndex([p.x for p in pts], [p.y for p in pts])


@dataclass
class DistanceSurface:
    raster: Raster
    poi_type: str
    low_access_threshold: float = LOW_ACCESS_METERS


def distance_surface(spec: GridSpec, pois: Iterable, poi_type: str,
                     low_access_threshold: float = LOW_ACCESS_METERS) -> DistanceSurface:
    """Meters from each cell centroid to the nearest POI of ``poi_type``."""
    pts = [p.location for p in pois if p.poi_type == poi_type]
    if not pts:
        raise EmptyInputError(f"no POIs of type {poi_type!r}")
    index = build_spatial_index(pts)
    cx, cy = spec.centroids()
    dist, _ = index.query(cx.ravel(), cy.ravel())
    return DistanceSurface(Raster(spec, dist.reshape(spec.shape)), poi_type, low_access_threshold)


def low_access_flag(d: DistanceSurface) -> Raster:
    r = d.raster
    flag = np.where(r.values > d.low_access_threshold, 1.0, 0.0)
    return Raster(r.spec, flag, r.nodata_mask)


def default_resampling(name: str) -> str:
    return "nearest" if name in CATEGORICAL_LAYERS else "bilinear"


def _raster_layer(name, paths, resampling, spec, stats):
    from .io import read_ascii_grid

    try:
        rasters = [read_ascii_grid(p) for p in paths]
        composite = median_composite(rasters) if len(rasters) > 1 else rasters[0]
        aligned = resample(composite, spec, resampling)
        norm_stats = stats or minmax_stats(aligned)
        layer = normalize_minmax(aligned, norm_stats)
    except Exception as e:  # re-tag with the layer name, keep the type
        raise _tag(e, name) from e
    prov = {
        "kind": "raster",
        "composited_from": len(rasters),
        "resampled_from_cell_size": composite.spec.cell_size,
        "resampling": resampling,
        "normalization": norm_stats,
    }
    return layer, prov


def _tag(e: Exception, name: str) -> Exception:
    msg = f"layer {name!r}: {e}"
    try:
        tagged = type(e)(msg)
    except Exception:
        tagged = ValidationError(msg)
    return tagged


def poi_layer_name(poi_type: str) -> str:
    return f"dist_{poi_type}"


def assemble_stack(manifest, normalization: Optional[Dict[str, dict]] = None, threads: int = 1,
                   low_access_threshold: float = LOW_ACCESS_METERS) -> FeatureStack:
    """Build every manifest layer on the analysis grid, in manifest order.

    Raster layers come first, then one distance layer per POI type. Passing
    ``normalization`` (e.g. from a trained model) reuses those min/max values.
    """
    from .io import read_poi_csv

    spec = manifest.grid
    if not manifest.layers and not manifest.poi_types:
        raise EmptyInputError("manifest defines no layers")
    normalization = normalization or {}
    for layer in manifest.layers:
        if not layer.paths:
            raise EmptyInputError(f"layer {layer.name!r} has no files")

    def build(layer):
        return _raster_layer(layer.name, layer.paths, layer.resampling, spec, normalization.get(layer.name))

    if threads > 1 and len(manifest.layers) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            built = list(pool.map(build, manifest.layers))
    else:
        built = [build(layer) for layer in manifest.layers]

    layers: Dict[str, Raster] = {}
    provenance: Dict[str, dict] = {}
    for layer, (raster, prov) in zip(manifest.layers, built):
        layers[layer.name] = raster
        provenance[layer.name] = prov

    auxiliary: Dict[str, Raster] = {}
    if manifest.poi_types:
        pois = read_poi_csv(manifest.poi_path, projection=manifest.projection())
        for t in manifest.poi_types:
            name = poi_layer_name(t)
            try:
                ds = distance_surface(spec, pois, t, low_access_threshold)
                stats = normalization.get(name) or minmax_stats(ds.raster)
                layers[name] = normalize_minmax(ds.raster, stats)
            except Exception as e:
                raise _tag(e, name) from e
            provenance[name] = {"kind": "distance", "distance_to": t, "normalization": stats}
            if t == "waterway":
                auxiliary[f"low_access_{t}"] = low_access_flag(ds)
    return FeatureStack(spec, layers, provenance, auxiliary)
