"""Synthetic fixture world with a known feature-to-label relationship.

Labels depend on four layers only. Brighter nighttime lights raise access;
distance to the nearest waterway, a more recent urban-change year and higher
elevation lower it. The other nine layers are distractors. Everything is drawn from one
seeded generator, so a (seed, shape) pair always yields identical files.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np
from scipy.ndimage import gaussian_filter

from .census import INDICATORS, BlockRecord
from .features import POI_TYPES, SATELLITE_LAYERS, SpatialIndex
from .geo import GridSpec, PointXY, Polygon, Raster
from .io import (DatasetManifest, LayerSource, PoiRecord, write_ascii_grid, write_blocks_geojson,
                 write_manifest, write_poi_csv)

CRS_TAG = "synthetic:planar-m"

# signal layers -> per-indicator weights on the [0, 1]-scaled layer; a
# positive weight raises the no-access share
LABEL_WEIGHTS: Dict[str, Dict[str, float]] = {
    "water": {"nighttime_lights": -1.6, "dist_waterway": 1.4, "urban_change": 0.5, "elevation": 0.5},
    "sewage": {"nighttime_lights": -1.2, "dist_waterway": 0.6, "urban_change": 1.4, "elevation": 0.4},
    "toilet": {"nighttime_lights": -1.4, "dist_waterway": 0.8, "urban_change": 0.6, "elevation": 1.0},
}


@dataclass
class SynthConfig:
    n_rows: int = 100
    n_cols: int = 100
    cell_size: float = 250.0
    n_blocks: int = 2000
    noise: float = 0.05
    seed: int = 0
    split_fraction: float = 0.15
    small_block_fraction: float = 0.05


def _field(rng, shape, sigma):
    f = gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return (f - f.min()) / (f.max() - f.min())


def _scaled(a):
    return (a - a.min()) / (a.max() - a.min())


def _polyline(rng, spec, n_pts, wiggle):
    """Points along a random meandering line crossing the grid east-west or north-south."""
    w = spec.n_cols * spec.cell_size
    h = spec.n_rows * spec.cell_size
    t = np.linspace(0.0, 1.0, n_pts)
    a0, a1 = rng.uniform(0.1, 0.9, 2)
    phase = rng.uniform(0, 2 * np.pi)
    across = a0 + (a1 - a0) * t + wiggle * np.sin(2 * np.pi * 1.5 * t + phase)
    if rng.random() < 0.5:
        return spec.origin_x + t * w, spec.origin_y - across * h
    return spec.origin_x + across * w, spec.origin_y - t * h


def _squash(score: np.ndarray) -> np.ndarray:
    """Smooth monotone map of a score surface into (0.05, 0.95)."""
    z = (score - np.median(score)) / score.std()
    return 0.05 + 0.9 / (1.0 + np.exp(-2.0 * z))


def generate_world(out_dir, config: SynthConfig = SynthConfig()) -> Path:
    """Write layers, POIs, blocks, manifest and ground truth under ``out_dir``.

    Returns the manifest path.
    """
    out = Path(out_dir)
    (out / "layers").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    spec = GridSpec(440_000.0, 520_000.0, config.cell_size, config.n_cols, config.n_rows, CRS_TAG)
    shape = spec.shape
    cx, cy = spec.centroids()
    scale = max(config.n_rows, config.n_cols) / 100.0

    # towns drive lights, population, urbanization and commercial POIs
    n_towns = max(3, int(round(8 * scale)))
    towns = np.column_stack([
        spec.origin_x + rng.uniform(0.05, 0.95, n_towns) * config.n_cols * spec.cell_size,
        spec.origin_y - rng.uniform(0.05, 0.95, n_towns) * config.n_rows * spec.cell_size,
    ])
    town_size = rng.uniform(800.0, 3500.0, n_towns)
    town_weight = rng.uniform(0.4, 1.0, n_towns)
    urban = np.zeros(shape)
    for (tx, ty), s, wt in zip(towns, town_size, town_weight):
        urban += wt * np.exp(-((cx - tx) ** 2 + (cy - ty) ** 2) / (2 * s * s))
    urban += 0.15 * _field(rng, shape, 6 * scale)

    raw: Dict[str, np.ndarray] = {
        "vegetation": 0.8 * _field(rng, shape, 5 * scale) * (1 - 0.5 * _scaled(urban)),
        "temperature": 24.0 + 10.0 * _field(rng, shape, 15 * scale),
        "nighttime_lights": 60.0 * _scaled(urban) ** 1.3 + 0.5 * _field(rng, shape, 2 * scale),
        "population": 400.0 * _scaled(urban) + 60.0 * _field(rng, shape, 3 * scale),
        "elevation": 2800.0 * _field(rng, shape, 20 * scale),
        # younger (larger) year where urbanization is weaker
        "urban_change": np.round(2018.0 - 18.0 * _scaled(urban + 0.3 * _field(rng, shape, 4 * scale))),
    }

    # POIs
    pois: List[PoiRecord] = []
    water_x, water_y = [], []
    for _ in range(max(2, int(round(3 * scale)))):
        x, y = _polyline(rng, spec, int(120 * scale), 0.12)
        water_x.extend(x)
        water_y.extend(y)
    for x, y in zip(water_x, water_y):
        pois.append(PoiRecord("waterway", PointXY(float(x), float(y))))
    counts = {"commercial": 400, "restaurant": 250, "hospital": 12, "airport": 3}
    for kind, n in counts.items():
        n = max(1, int(round(n * scale * scale)))
        which = rng.integers(0, n_towns, n)
        spread = town_size[which] * (1.5 if kind != "airport" else 3.0)
        px = towns[which, 0] + rng.normal(0, 1, n) * spread
        py = towns[which, 1] + rng.normal(0, 1, n) * spread
        for x, y in zip(px, py):
            pois.append(PoiRecord(kind, PointXY(float(x), float(y))))
    for _ in range(max(1, int(round(2 * scale)))):
        x, y = _polyline(rng, spec, int(150 * scale), 0.05)
        for xi, yi in zip(x, y):
            pois.append(PoiRecord("highway", PointXY(float(xi), float(yi))))

    water_dist, _ = SpatialIndex(water_x, water_y).query(cx.ravel(), cy.ravel())
    signal = {
        "nighttime_lights": _scaled(raw["nighttime_lights"]),
        "dist_waterway": _scaled(water_dist.reshape(shape)),
        "urban_change": _scaled(raw["urban_change"]),
        "elevation": _scaled(raw["elevation"]),
    }

    # layer files: vegetation as monthly stack, aridity on a coarser grid
    layers: List[LayerSource] = []
    for name in SATELLITE_LAYERS:
        if name == "vegetation":
            paths = []
            for month in range(3):
                noisy = raw[name] + rng.normal(0, 0.05, shape)
                if month == 1:
                    noisy = np.where(rng.random(shape) < 0.03, np.nan, noisy)
                p = out / "layers" / f"{name}_m{month + 1:02d}.asc"
                write_ascii_grid(Raster(spec, noisy), p)
                paths.append(p)
        elif name == "aridity":
            coarse = GridSpec(spec.origin_x, spec.origin_y, 2 * spec.cell_size,
                              (config.n_cols + 1) // 2, (config.n_rows + 1) // 2, CRS_TAG)
            f = _field(rng, coarse.shape, 6 * scale)
            p = out / "layers" / f"{name}.asc"
            write_ascii_grid(Raster(coarse, f), p)
            paths = [p]
        else:
            p = out / "layers" / f"{name}.asc"
            write_ascii_grid(Raster(spec, raw[name]), p)
            paths = [p]
        layers.append(LayerSource(name, paths, "nearest" if name == "urban_change" else "bilinear"))
    write_poi_csv(pois, out / "pois.csv")

    # blocks: one or two per chosen cell, a few too small to pass the coverage filter
    n_blocks = config.n_blocks
    n_split = int(round(config.split_fraction * n_blocks / (1 + config.split_fraction)))
    n_cells = n_blocks - n_split
    weight = 0.3 + _scaled(raw["population"]).ravel()
    chosen = rng.choice(spec.n_cells, size=n_cells, replace=False, p=weight / weight.sum())
    split = np.zeros(n_cells, dtype=bool)
    split[rng.choice(n_cells, size=n_split, replace=False)] = True
    small = rng.random(n_cells) < config.small_block_fraction

    clean = {ind: _squash(sum(w * signal[k] for k, w in LABEL_WEIGHTS[ind].items())) for ind in INDICATORS}
    blocks: List[BlockRecord] = []
    cs = spec.cell_size
    for k, cid in enumerate(chosen):
        r, c = divmod(int(cid), spec.n_cols)
        x0 = spec.origin_x + c * cs
        y1 = spec.origin_y - r * cs
        side = cs * (0.5 if small[k] else rng.uniform(0.86, 1.0))
        jx, jy = rng.uniform(-0.05, 0.05, 2) * cs
        mx, my = x0 + cs / 2 + jx, y1 - cs / 2 + jy
        h = side / 2
        if split[k]:
            parts = [[(mx - h, my - h), (mx, my - h), (mx, my + h), (mx - h, my + h)],
                     [(mx, my - h), (mx + h, my - h), (mx + h, my + h), (mx, my + h)]]
        else:
            parts = [[(mx - h, my - h), (mx + h, my - h), (mx + h, my + h), (mx - h, my + h)]]
        for j, ring in enumerate(parts):
            pct = {}
            for ind in INDICATORS:
                v = clean[ind][r, c]
                if config.noise > 0:
                    v = v + rng.normal(0, config.noise)
                pct[ind] = float(np.clip(v, 0.0, 1.0))
            blocks.append(BlockRecord(Polygon(ring), int(rng.integers(5, 400)), pct, f"b{len(blocks)}"))
    write_blocks_geojson(blocks, out / "blocks.geojson")

    manifest = DatasetManifest(spec, layers, out / "pois.csv", list(POI_TYPES), out / "blocks.geojson",
                               list(INDICATORS))
    mpath = out / "manifest.json"
    write_manifest(manifest, mpath)
    truth = {"config": asdict(config), "label_weights": LABEL_WEIGHTS,
             "signal_layers": sorted({k for w in LABEL_WEIGHTS.values() for k in w})}
    (out / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    return mpath
