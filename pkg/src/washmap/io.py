"""Readers and writers for every pipeline artifact.

Rasters are ESRI ASCII grids (with an optional ``.prj`` sidecar holding the
crs tag), POIs and training tables are CSV, blocks are GeoJSON, and models,
metrics and manifests are JSON documents carrying ``schema_version``.
"""
from __future__ import annotations

import csv
import decimal
import json
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .census import INDICATORS, LABEL_PREFIX, BlockRecord, TrainingTable
from .errors import FormatError, MissingInputError, SchemaVersionError, ValidationError
from .features import POI_TYPES, default_resampling
from .forest import EvalReport, ForestModel, ForestParams, RegressionTree
from .geo import Equirectangular, GridSpec, PointXY, Polygon, Raster

SCHEMA_VERSION = 1
DEFAULT_NODATA = -9999.0
_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class SchemaError(FormatError):
    pass


def _dump_json(obj, path):
    text = json.dumps(obj, indent=1, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _reject_constant(name):
    raise ValueError(f"non-finite JSON constant {name}")


def load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{path} does not exist")
    try:
        return json.loads(path.read_text(encoding="utf-8"), parse_constant=_reject_constant)
    except ValueError as e:
        raise FormatError(str(e), path) from e


def _check_version(doc: dict, path, kind: str):
    if not isinstance(doc, dict):
        raise SchemaError(f"expected a JSON object for {kind}", path)
    v = doc.get("schema_version")
    if v != SCHEMA_VERSION:
        raise SchemaVersionError(f"{kind} schema_version {v!r} unsupported (expected {SCHEMA_VERSION})", path)


# --- ESRI ASCII grid ---------------------------------------------------------


def _exact_yll(origin_y: float, n_rows: int, cell: float) -> str:
    """Exact decimal for ``origin_y - n_rows * cell``.

    No double yll can always round back to ``origin_y``, so the lower edge is
    written at full precision; the reader sums it exactly.
    """
    with decimal.localcontext() as ctx:
        ctx.prec = 1200
        d = decimal.Decimal(origin_y) - n_rows * decimal.Decimal(cell)
    return format(d.normalize(), "f") if d else "0"


def _pick_nodata(values: np.ndarray) -> float:
    for cand in (DEFAULT_NODATA, -99999.0, -1e30, -3.4028234663852886e38):
        if not np.any(values == cand):
            return cand
    raise ValidationError("no usable NODATA value")


def write_ascii_grid(raster: Raster, path):
    path = Path(path)
    s = raster.spec
    vals = raster.values
    valid = vals[raster.valid]
    if not np.all(np.isfinite(valid)):
        raise ValidationError("refusing to write non-finite raster values")
    nodata = _pick_nodata(valid)
    out = np.where(raster.nodata_mask, nodata, vals)
    lines = [
        f"ncols {s.n_cols}",
        f"nrows {s.n_rows}",
        f"xllcorner {s.origin_x!r}",
        f"yllcorner {_exact_yll(s.origin_y, s.n_rows, s.cell_size)}",
        f"cellsize {s.cell_size!r}",
        f"NODATA_value {nodata!r}",
    ]
    for r in range(s.n_rows):
        lines.append(" ".join("%.17g" % v for v in out[r]))
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    prj = path.with_suffix(".prj")
    if s.crs_tag:
        prj.write_text(s.crs_tag + "\n", encoding="utf-8")
    elif prj.exists():
        prj.unlink()


def read_ascii_grid(path, crs_tag: Optional[str] = None) -> Raster:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{path} does not exist")
    with open(path, encoding="ascii", errors="replace") as fh:
        lines = fh.read().splitlines()
    header = {}
    pos = 0
    while pos < len(lines) and len(header) < len(_HEADER_KEYS):
        line = lines[pos].strip()
        pos += 1
        if not line:
            continue
        parts = line.split()
        key = parts[0].lower()
        if key not in _HEADER_KEYS or len(parts) != 2:
            raise FormatError(f"bad header line {line!r}", path, pos)
        if key in header:
            raise FormatError(f"duplicate header key {key}", path, pos)
        try:
            if key in ("ncols", "nrows"):
                header[key] = int(parts[1])
            elif key == "yllcorner":
                header[key] = Fraction(parts[1])
            else:
                header[key] = float(parts[1])
        except (ValueError, ZeroDivisionError):
            raise FormatError(f"non-numeric header value {parts[1]!r}", path, pos) from None
    if len(header) < len(_HEADER_KEYS):
        raise FormatError(f"missing header keys {sorted(set(_HEADER_KEYS) - set(header))}", path, pos)
    for key in ("xllcorner", "cellsize"):
        if not math.isfinite(header[key]):
            raise FormatError(f"non-finite {key}", path)
    ncols, nrows, cell = header["ncols"], header["nrows"], header["cellsize"]
    if ncols < 1 or nrows < 1 or not cell > 0:
        raise FormatError("grid dimensions must be positive", path)
    nodata = header["nodata_value"]

    values = []
    for lineno in range(pos + 1, len(lines) + 1):
        toks = lines[lineno - 1].split()
        for tok in toks:
            try:
                v = float(tok)
            except ValueError:
                raise FormatError(f"unparseable value {tok!r}", path, lineno) from None
            if not math.isfinite(v):
                raise FormatError(f"non-finite value {tok!r}", path, lineno)
            values.append(v)
            if len(values) > ncols * nrows:
                raise FormatError(f"more than {ncols * nrows} values", path, lineno)
    if len(values) != ncols * nrows:
        raise FormatError(f"expected {ncols * nrows} values, found {len(values)}", path, len(lines))

    if crs_tag is None:
        prj = path.with_suffix(".prj")
        crs_tag = prj.read_text(encoding="utf-8").strip() if prj.exists() else ""
    # exact rational sum, rounded once
    origin_y = float(header["yllcorner"] + nrows * Fraction(cell))
    spec = GridSpec(header["xllcorner"], origin_y, cell, ncols, nrows, crs_tag)
    arr = np.array(values, dtype=np.float64).reshape(nrows, ncols)
    return Raster(spec, arr, arr == nodata)


# --- POIs ---------------------------------------------------------------------


@dataclass(frozen=True)
class PoiRecord:
    poi_type: str
    location: PointXY

    def __post_init__(self):
        if self.poi_type not in POI_TYPES:
            raise ValidationError(f"unknown POI type {self.poi_type!r}")


def read_poi_csv(path, projection: Optional[Equirectangular] = None) -> List[PoiRecord]:
    """Read ``type,lon,lat`` (degrees, projected on read) or ``type,x,y`` (meters)."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{path} does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise FormatError("empty POI file", path, 1) from None
        if header == ["type", "lon", "lat"]:
            degrees = True
        elif header == ["type", "x", "y"]:
            degrees = False
        else:
            raise FormatError(f"unrecognised POI header {header}", path, 1)
        types, a, b = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != 3:
                raise FormatError(f"expected 3 fields, got {len(rec)}", path, lineno)
            t = rec[0].strip()
            if t not in POI_TYPES:
                raise FormatError(f"unknown POI type {t!r}", path, lineno)
            try:
                u, v = float(rec[1]), float(rec[2])
            except ValueError:
                raise FormatError(f"non-numeric coordinate in {rec}", path, lineno) from None
            if not (math.isfinite(u) and math.isfinite(v)):
                raise FormatError(f"non-finite coordinate in {rec}", path, lineno)
            types.append(t)
            a.append(u)
            b.append(v)
    if degrees and b:
        proj = projection or Equirectangular.about_mean_latitude(b)
        if proj is not None:
            xs, ys = proj.forward(a, b)
            a, b = np.atleast_1d(xs).tolist(), np.atleast_1d(ys).tolist()
    return [PoiRecord(t, PointXY(x, y)) for t, x, y in zip(types, a, b)]


def write_poi_csv(pois: Sequence[PoiRecord], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["type", "x", "y"])
        for p in pois:
            w.writerow([p.poi_type, repr(p.location.x), repr(p.location.y)])


# --- census blocks --------------------------------------------------------------


def _split_households(households: int, areas: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment, so the parts sum to the whole exactly."""
    total = float(sum(areas))
    raw = [households * a / total for a in areas]
    base = [int(math.floor(r)) for r in raw]
    short = households - sum(base)
    by_rem = sorted(range(len(areas)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in by_rem[:short]:
        base[i] += 1
    return base


def read_blocks_geojson(path, indicators: Sequence[str] = INDICATORS,
                        projection: Optional[Equirectangular] = None) -> List[BlockRecord]:
    """Read census blocks; MultiPolygon parts become separate blocks.

    Coordinates are taken as lon/lat degrees unless the collection carries
    ``"coordinate_units": "meters"``.
    """
    path = Path(path)
    doc = load_json(path)
    if doc.get("type") != "FeatureCollection":
        raise FormatError("expected a GeoJSON FeatureCollection", path)
    meters = doc.get("coordinate_units", "degrees") == "meters"
    feats = doc.get("features", [])
    if not meters and projection is None:
        lats = [pt[1] for f in feats for poly in _polygons(f, path) for ring in poly for pt in ring]
        projection = Equirectangular.about_mean_latitude(lats) if lats else None

    out: List[BlockRecord] = []
    for k, feat in enumerate(feats):
        fid = str(feat.get("id", feat.get("properties", {}).get("id", k)))
        props = feat.get("properties") or {}
        if "households" not in props:
            raise ValidationError(f"feature {fid}: missing property 'households'")
        try:
            households = int(props["households"])
        except (TypeError, ValueError):
            raise ValidationError(f"feature {fid}: households must be an integer") from None
        if households != props["households"] or households < 0:
            raise ValidationError(f"feature {fid}: households must be a non-negative integer")
        pct = {}
        for ind in indicators:
            key = LABEL_PREFIX + ind
            if key not in props:
                raise ValidationError(f"feature {fid}: missing property {key!r}")
            v = props[key]
            if not isinstance(v, (int, float)) or not (0.0 <= v <= 1.0):
                raise ValidationError(f"feature {fid}: {key}={v!r} outside [0, 1]")
            pct[ind] = float(v)
        polys = []
        for rings in _polygons(feat, path):
            if not meters:
                rings = [np.column_stack(projection.forward(np.asarray(r)[:, 0], np.asarray(r)[:, 1]))
                         for r in rings]
            try:
                polys.append(Polygon(rings[0], rings[1:]))
            except ValueError as e:
                raise ValidationError(f"feature {fid}: {e}") from e
        shares = _split_households(households, [p.area for p in polys])
        for j, (poly, h) in enumerate(zip(polys, shares)):
            bid = fid if len(polys) == 1 else f"{fid}.{j}"
            out.append(BlockRecord(poly, h, dict(pct), bid))
    return out


def _polygons(feat, path):
    geom = feat.get("geometry") or {}
    kind = geom.get("type")
    coords = geom.get("coordinates")
    if kind == "Polygon":
        return [coords]
    if kind == "MultiPolygon":
        return list(coords)
    raise FormatError(f"unsupported geometry type {kind!r}", path)


def write_blocks_geojson(blocks: Sequence[BlockRecord], path):
    feats = []
    for b in blocks:
        rings = [np.vstack([r, r[:1]]).tolist() for r in b.geometry.rings]
        props = {"households": int(b.households)}
        props.update({LABEL_PREFIX + k: float(v) for k, v in b.pct_no.items()})
        feats.append({"type": "Feature", "id": b.block_id,
                      "geometry": {"type": "Polygon", "coordinates": rings}, "properties": props})
    _dump_json({"type": "FeatureCollection", "coordinate_units": "meters", "features": feats}, path)


# --- training table ---------------------------------------------------------------


def write_training_csv(table: TrainingTable, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "col", "row", *table.feature_names, *table.label_names])
        for i in range(len(table)):
            w.writerow([int(table.cell_id[i]), int(table.col[i]), int(table.row[i]),
                        *(repr(float(v)) for v in table.X[i]), *(repr(float(v)) for v in table.Y[i])])


def read_training_csv(path) -> TrainingTable:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{path} does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty training table", path, 1) from None
        if header[:3] != ["cell_id", "col", "row"]:
            raise FormatError("training table must start with cell_id,col,row", path, 1)
        rest = header[3:]
        n_feat = next((i for i, h in enumerate(rest) if h.startswith(LABEL_PREFIX)), len(rest))
        features, labels = rest[:n_feat], rest[n_feat:]
        if any(not h.startswith(LABEL_PREFIX) for h in labels):
            raise FormatError("feature columns must precede label columns", path, 1)
        ids, X, Y = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise FormatError(f"expected {len(header)} fields, got {len(rec)}", path, lineno)
            try:
                ids.append([int(v) for v in rec[:3]])
                vals = [float(v) for v in rec[3:]]
            except ValueError:
                raise FormatError("non-numeric field", path, lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise FormatError("non-finite field", path, lineno)
            X.append(vals[:n_feat])
            Y.append(vals[n_feat:])
    ids = np.array(ids, dtype=np.int64).reshape(-1, 3)
    return TrainingTable(ids[:, 0], ids[:, 1], ids[:, 2], features,
                         np.array(X, dtype=np.float64).reshape(-1, len(features)),
                         labels, np.array(Y, dtype=np.float64).reshape(-1, len(labels)))


# --- models -------------------------------------------------------------------------

_TREE_FIELDS = ("feature", "threshold", "left", "right", "value", "n_samples")


def model_to_dict(model: ForestModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "forest",
        "params": model.params.to_dict(),
        "feature_names": list(model.feature_names),
        "label_name": model.label_name,
        "normalization": model.normalization,
        "trees": [{f: getattr(t, f).tolist() for f in _TREE_FIELDS} for t in model.trees],
    }


def model_from_dict(doc: dict, path=None) -> ForestModel:
    _check_version(doc, path, "model")
    try:
        trees = [RegressionTree(*(np.asarray(t[f]) for f in _TREE_FIELDS)) for t in doc["trees"]]
        if not trees:
            raise SchemaError("forest must have at least one tree", path)
        return ForestModel(ForestParams.from_dict(doc["params"]), trees, list(doc["feature_names"]),
                           doc.get("label_name", ""), doc.get("normalization", {}))
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"malformed model document: {e}", path) from e


def write_model_json(model: ForestModel, path):
    _dump_json(model_to_dict(model), path)


def read_model_json(path) -> ForestModel:
    return model_from_dict(load_json(path), path)


# --- metrics, attributions ------------------------------------------------------------


def write_metrics_json(reports: Dict[str, EvalReport], path):
    _dump_json({"schema_version": SCHEMA_VERSION, "reports": {k: r.to_dict() for k, r in reports.items()}}, path)


def read_metrics_json(path) -> Dict[str, EvalReport]:
    doc = load_json(path)
    _check_version(doc, path, "metrics")
    return {k: EvalReport.from_dict(v) for k, v in doc["reports"].items()}


def write_attribution_csv(cell_id, attr, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", *attr.feature_names])
        for cid, row in zip(cell_id, attr.values):
            w.writerow([int(cid), *(repr(float(v)) for v in row)])


def write_json(doc: dict, path):
    """JSON document with ``schema_version`` stamped in."""
    _dump_json({"schema_version": SCHEMA_VERSION, **doc}, path)


# --- manifest ---------------------------------------------------------------------------


@dataclass
class LayerSource:
    name: str
    paths: List[Path]
    resampling: str = "bilinear"


@dataclass
class DatasetManifest:
    grid: GridSpec
    layers: List[LayerSource]
    poi_path: Optional[Path] = None
    poi_types: List[str] = field(default_factory=list)
    blocks_path: Optional[Path] = None
    labels: List[str] = field(default_factory=lambda: list(INDICATORS))
    lat0: Optional[float] = None

    def projection(self) -> Optional[Equirectangular]:
        return None if self.lat0 is None else Equirectangular(self.lat0)


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Parse a manifest JSON. Relative paths resolve against the manifest's directory."""
    path = Path(path)
    doc = load_json(path)
    _check_version(doc, path, "manifest")
    base = path.parent
    try:
        grid = GridSpec.from_dict(doc["grid"])
        layers = []
        for entry in doc.get("layers", []):
            name = entry["name"]
            files = entry["paths"] if isinstance(entry.get("paths"), list) else [entry["path"]]
            layers.append(LayerSource(name, [base / f for f in files],
                                      entry.get("resampling", default_resampling(name))))
        poi_types = list(doc.get("poi_types", POI_TYPES if doc.get("poi_path") else []))
        manifest = DatasetManifest(
            grid=grid,
            layers=layers,
            poi_path=base / doc["poi_path"] if doc.get("poi_path") else None,
            poi_types=poi_types,
            blocks_path=base / doc["blocks_path"] if doc.get("blocks_path") else None,
            labels=list(doc.get("labels", INDICATORS)),
            lat0=doc.get("lat0"),
        )
    except (KeyError, TypeError) as e:
        raise SchemaError(f"malformed manifest: missing or bad field {e}", path) from e

    names = [layer.name for layer in manifest.layers]
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate layer names in manifest: {names}")
    unknown = [t for t in manifest.poi_types if t not in POI_TYPES]
    if unknown:
        raise ValidationError(f"unknown POI types in manifest: {unknown}")
    if manifest.poi_types and manifest.poi_path is None:
        raise ValidationError("manifest lists poi_types but no poi_path")
    if check_paths:
        for layer in manifest.layers:
            for f in layer.paths:
                if not f.exists():
                    raise MissingInputError(f"layer {layer.name!r}: {f} does not exist")
        for label, p in (("poi_path", manifest.poi_path), ("blocks_path", manifest.blocks_path)):
            if p is not None and not p.exists():
                raise MissingInputError(f"{label}: {p} does not exist")
    return manifest


def manifest_to_dict(manifest: DatasetManifest, relative_to=None) -> dict:
    def rel(p):
        return os.path.relpath(p, relative_to) if relative_to is not None else str(p)

    doc = {
        "schema_version": SCHEMA_VERSION,
        "grid": manifest.grid.to_dict(),
        "layers": [{"name": layer.name, "paths": [rel(p) for p in layer.paths], "resampling": layer.resampling}
                   for layer in manifest.layers],
        "poi_types": list(manifest.poi_types),
        "labels": list(manifest.labels),
    }
    if manifest.poi_path is not None:
        doc["poi_path"] = rel(manifest.poi_path)
    if manifest.blocks_path is not None:
        doc["blocks_path"] = rel(manifest.blocks_path)
    if manifest.lat0 is not None:
        doc["lat0"] = manifest.lat0
    return doc


def write_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    _dump_json(manifest_to_dict(manifest, relative_to=path.parent), path)
