import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import nearest_distance_linear_scan
from washmap import io as wio
from washmap.errors import AlignmentError, EmptyInputError
from washmap.features import (POI_TYPES, SATELLITE_LAYERS, DistanceSurface, SpatialIndex, assemble_stack,
                              build_spatial_index, distance_surface, low_access_flag, median_composite,
                              normalize_minmax, resample)
from washmap.geo import GridSpec, PointXY, Raster

SPEC1 = GridSpec(0.0, 1.0, 1.0, 1, 1)


def _cell_stack(values):
    return [Raster(SPEC1, [[v]]) for v in values]


@pytest.mark.parametrize("values,expected", [([1, 2, 3], 2.0), ([1, 2, 3, 4], 2.5), ([5, np.nan, 1], 3.0)])
def test_median_composite_examples(values, expected):
    assert median_composite(_cell_stack(values)).values[0, 0] == expected


def test_median_composite_all_masked_cell():
    r = median_composite(_cell_stack([np.nan, np.nan]))
    assert r.nodata_mask[0, 0]


def test_median_composite_rejects_misaligned():
    other = Raster(GridSpec(0.0, 1.0, 2.0, 1, 1), [[1.0]])
    with pytest.raises(AlignmentError):
        median_composite([Raster(SPEC1, [[1.0]]), other])


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_median_composite_matches_sort_oracle_and_is_order_free(seed, k):
    rng = np.random.default_rng(seed)
    spec = GridSpec(0.0, 4.0, 1.0, 5, 4)
    cube = rng.integers(0, 10, (k, 4, 5)).astype(float)
    cube[rng.random(cube.shape) < 0.3] = np.nan
    rasters = [Raster(spec, c) for c in cube]
    out = median_composite(rasters)
    for r in range(4):
        for c in range(5):
            vals = sorted(v for v in cube[:, r, c] if not np.isnan(v))
            if not vals:
                assert out.nodata_mask[r, c]
                continue
            m = len(vals)
            ref = vals[m // 2] if m % 2 else (vals[m // 2 - 1] + vals[m // 2]) / 2
            assert out.values[r, c] == ref
    assert median_composite(rasters[::-1]) == out


@pytest.mark.parametrize("method", ["nearest", "bilinear"])
def test_resample_identity(method):
    rng = np.random.default_rng(0)
    spec = GridSpec(10.0, 20.0, 2.0, 7, 5)
    vals = rng.random((5, 7))
    vals[1, 2] = np.nan
    src = Raster(spec, vals)
    assert resample(src, spec, method) == src


@pytest.mark.parametrize("method", ["nearest", "bilinear"])
def test_resample_constant(method):
    src = Raster.full(GridSpec(0.0, 10.0, 2.0, 5, 5), 3.25)
    out = resample(src, GridSpec(0.5, 9.5, 0.7, 12, 12), method)
    assert np.all(out.valid_values() == 3.25)


def test_bilinear_midpoint_hand_value():
    src = Raster(GridSpec(0.0, 2.0, 1.0, 2, 2), [[0.0, 1.0], [1.0, 2.0]])
    # a single target cell whose centroid is the square's centre (1, 1)
    out = resample(src, GridSpec(0.5, 1.5, 1.0, 1, 1), "bilinear")
    assert out.values[0, 0] == 1.0


def test_bilinear_falls_back_to_nearest_next_to_mask():
    src = Raster(GridSpec(0.0, 2.0, 1.0, 2, 2), [[0.0, np.nan], [1.0, 2.0]])
    out = resample(src, GridSpec(0.5, 1.5, 0.5, 1, 1), "bilinear")
    # centroid (0.75, 1.25) lies in src cell (0, 0)
    assert out.values[0, 0] == 0.0


def test_resample_outside_source_is_masked():
    src = Raster.full(GridSpec(0.0, 2.0, 1.0, 2, 2), 1.0)
    out = resample(src, GridSpec(1.0, 2.0, 1.0, 3, 1), "nearest")
    assert out.nodata_mask.tolist() == [[False, True, True]]


def test_resample_crs_mismatch():
    src = Raster.full(GridSpec(0.0, 2.0, 1.0, 2, 2, "a"), 1.0)
    with pytest.raises(AlignmentError):
        resample(src, GridSpec(0.0, 2.0, 1.0, 2, 2, "b"))


def test_normalize_examples():
    spec = GridSpec(0.0, 1.0, 1.0, 3, 1)
    assert normalize_minmax(Raster(spec, [[0.0, 5.0, 10.0]])).values.tolist() == [[0.0, 0.5, 1.0]]
    assert normalize_minmax(Raster.full(spec, 7.0)).values.tolist() == [[0.5, 0.5, 0.5]]
    with pytest.raises(EmptyInputError):
        normalize_minmax(Raster(spec, [[np.nan] * 3]))


@given(st.integers(0, 2**32 - 1))
def test_normalize_endpoints_range_and_idempotence(seed):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((6, 9)) * 1e3
    vals[rng.random(vals.shape) < 0.2] = np.nan
    vals[0, :2] = [-5e3, 5e3]
    r = Raster(GridSpec(0.0, 6.0, 1.0, 9, 6), vals)
    n = normalize_minmax(r)
    v = n.valid_values()
    assert v.min() == 0.0 and v.max() == 1.0
    np.testing.assert_array_equal(n.nodata_mask, r.nodata_mask)
    np.testing.assert_allclose(normalize_minmax(n).values, n.values, atol=1e-15)


def test_normalize_with_reused_stats_clips():
    r = Raster(GridSpec(0.0, 1.0, 1.0, 3, 1), [[-1.0, 0.5, 3.0]])
    assert normalize_minmax(r, {"min": 0.0, "max": 1.0}).values.tolist() == [[0.0, 0.5, 1.0]]


def test_spatial_index_single_and_duplicates():
    idx = build_spatial_index([PointXY(3.0, 4.0)])
    d, i = idx.query([0.0, 3.0], [0.0, 4.0])
    assert d.tolist() == [5.0, 0.0] and i.tolist() == [0, 0]
    dup = SpatialIndex([1.0, 1.0, 2.0], [1.0, 1.0, 2.0])
    d, i = dup.query([1.0], [1.0])
    assert d[0] == 0.0 and i[0] == 0
    with pytest.raises(EmptyInputError):
        build_spatial_index([])


def test_spatial_index_matches_linear_scan():
    rng = np.random.default_rng(5)
    px, py = rng.uniform(0, 1000, (2, 1000))
    qx, qy = rng.uniform(-100, 1100, (2, 1000))
    d, i = SpatialIndex(px, py).query(qx, qy)
    ref = nearest_distance_linear_scan(qx, qy, px, py)
    assert d.tobytes() == ref.tobytes()
    for k in range(1000):
        dx = qx[k] - px
        dy = qy[k] - py
        assert i[k] == np.flatnonzero(np.sqrt(dx * dx + dy * dy) == ref[k])[0]


def test_ties_resolve_to_lowest_index():
    # four points symmetric about the query
    idx = SpatialIndex([1.0, -1.0, 0.0, 0.0] * 3, [0.0, 0.0, 1.0, -1.0] * 3)
    d, i = idx.query([0.0], [0.0])
    assert d[0] == 1.0 and i[0] == 0


def _pois(xs, ys, kind="waterway"):
    return [wio.PoiRecord(kind, PointXY(float(x), float(y))) for x, y in zip(xs, ys)]


def test_distance_surface_at_centroid_and_single_point():
    spec = GridSpec(0.0, 1000.0, 250.0, 4, 4)
    ds = distance_surface(spec, _pois([125.0], [875.0]), "waterway")
    assert ds.raster.values[0, 0] == 0.0
    cx, cy = spec.centroids()
    dx, dy = cx - 125.0, cy - 875.0
    assert ds.raster.values.tobytes() == np.sqrt(dx * dx + dy * dy).tobytes()


def test_distance_surface_missing_type_named():
    with pytest.raises(EmptyInputError, match="airport"):
        distance_surface(GridSpec(0.0, 1.0, 1.0, 1, 1), _pois([0], [0]), "airport")


def _check_exact_and_lipschitz(spec, px, py):
    ds = distance_surface(spec, _pois(px, py), "waterway").raster.values
    cx, cy = spec.centroids()
    ref = nearest_distance_linear_scan(cx.ravel(), cy.ravel(), np.asarray(px), np.asarray(py))
    assert ds.ravel().tobytes() == ref.tobytes()
    cs = spec.cell_size
    tol = 1e-9 * max(1.0, float(ds.max()))
    assert np.all(np.abs(np.diff(ds, axis=0)) <= cs + tol)
    assert np.all(np.abs(np.diff(ds, axis=1)) <= cs + tol)


def test_distance_surface_50x50_exact():
    rng = np.random.default_rng(9)
    spec = GridSpec(0.0, 50 * 250.0, 250.0, 50, 50)
    _check_exact_and_lipschitz(spec, *rng.uniform(0, 50 * 250.0, (2, 200)))


@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 40), st.integers(1, 300),
       st.booleans())
def test_distance_surface_exact_property(seed, nr, nc, npoi, on_centroids):
    rng = np.random.default_rng(seed)
    spec = GridSpec(float(rng.uniform(-1e5, 1e5)), float(rng.uniform(-1e5, 1e5)), 250.0, nc, nr)
    if on_centroids:
        cx, cy = spec.centroids()
        pick = rng.integers(0, spec.n_cells, npoi)
        px, py = cx.ravel()[pick], cy.ravel()[pick]
    else:
        px = spec.origin_x + rng.uniform(-0.2, 1.2, npoi) * nc * 250.0
        py = spec.origin_y - rng.uniform(-0.2, 1.2, npoi) * nr * 250.0
    _check_exact_and_lipschitz(spec, px, py)


def test_low_access_flag_is_strict():
    spec = GridSpec(0.0, 1.0, 1.0, 3, 1)
    ds = DistanceSurface(Raster(spec, [[5000.0, 5000.1, 0.0]]), "waterway")
    assert low_access_flag(ds).values.tolist() == [[0.0, 1.0, 0.0]]
    zero = DistanceSurface(Raster.full(spec, 0.0), "waterway")
    assert not low_access_flag(zero).values.any()


def _tiny_manifest(tmp_path, spec, crs_override=None):
    rng = np.random.default_rng(0)
    layers = []
    for k, name in enumerate(SATELLITE_LAYERS):
        p = tmp_path / f"{name}.asc"
        s = spec if name != crs_override else GridSpec(spec.origin_x, spec.origin_y, spec.cell_size,
                                                      spec.n_cols, spec.n_rows, "other")
        wio.write_ascii_grid(Raster(s, rng.random(spec.shape) * (k + 1)), p)
        layers.append(wio.LayerSource(name, [p], "bilinear"))
    pois = [wio.PoiRecord(t, PointXY(float(x), float(y)))
            for t in POI_TYPES for x, y in rng.uniform(0, 1000, (3, 2))]
    wio.write_poi_csv(pois, tmp_path / "pois.csv")
    return wio.DatasetManifest(spec, layers, tmp_path / "pois.csv", list(POI_TYPES), None, [])


def test_assemble_stack_13_aligned_normalized_layers(tmp_path):
    spec = GridSpec(0.0, 1000.0, 100.0, 10, 10)
    stack = assemble_stack(_tiny_manifest(tmp_path, spec))
    assert len(stack.layers) == 13
    assert stack.names == list(SATELLITE_LAYERS) + [f"dist_{t}" for t in POI_TYPES]
    for r in stack.layers.values():
        assert r.spec == spec
        v = r.valid_values()
        assert v.min() >= 0.0 and v.max() <= 1.0
    assert "low_access_waterway" in stack.auxiliary
    assert stack.provenance["dist_airport"]["distance_to"] == "airport"


def test_assemble_stack_threads_do_not_change_output(tmp_path):
    spec = GridSpec(0.0, 1000.0, 100.0, 10, 10)
    m = _tiny_manifest(tmp_path, spec)
    a, b = assemble_stack(m, threads=1), assemble_stack(m, threads=4)
    assert all(a.layers[n] == b.layers[n] for n in a.names)


def test_assemble_stack_reuses_normalization(tmp_path):
    spec = GridSpec(0.0, 1000.0, 100.0, 10, 10)
    m = _tiny_manifest(tmp_path, spec)
    norm = {n: {"min": 0.0, "max": 100.0} for n in ["vegetation"]}
    stack = assemble_stack(m, normalization=norm)
    assert stack.provenance["vegetation"]["normalization"] == {"min": 0.0, "max": 100.0}
    assert stack.layers["vegetation"].valid_values().max() <= 0.01 + 1e-12


def test_assemble_stack_empty_manifest():
    with pytest.raises(EmptyInputError):
        assemble_stack(wio.DatasetManifest(SPEC1, [], None, [], None, []))


def test_assemble_stack_misaligned_crs_names_layer(tmp_path):
    spec = GridSpec(0.0, 1000.0, 100.0, 10, 10)
    with pytest.raises(AlignmentError, match="temperature"):
        assemble_stack(_tiny_manifest(tmp_path, spec, crs_override="temperature"))
