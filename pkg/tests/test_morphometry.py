import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from callosum.dataset import MosaicManifest
from callosum.morphometry import (
    CSV_HEADER,
    METRICS,
    EmptyRoiError,
    MetricGridSpec,
    MissingLabelsError,
    MorphometryGrid,
    MorphometryRecord,
    equivalent_diameter,
    g_ratio_from_fractions,
    label_components,
    map_image,
    normalize_map,
    patch_metrics,
    read_metrics_csv,
    render_maps,
    slide_morphometry,
)
from callosum.synthgen import SyntheticSceneSpec, generate_mosaic

from .oracles import diameter_bisection, flood_fill_components, g_ratio_counts


def test_components_examples(backend):
    m = np.zeros((10, 10), np.uint8)
    m[0:3, 0:3] = 1
    m[5:8, 5:8] = 1
    labels, areas = label_components(m, 1, backend=backend)
    assert sorted(areas.tolist()) == [9, 9] and labels.max() == 2 and labels[9, 0] == 0
    assert label_components(np.zeros((4, 4), np.uint8), 1, backend=backend)[1].size == 0
    d = np.eye(4, dtype=np.uint8)
    assert label_components(d, 1, backend=backend)[1].tolist() == [4]


def test_components_match_flood_fill(backend):
    rng = np.random.default_rng(5)
    for _ in range(40):
        m = rng.integers(0, 3, (32, 32)).astype(np.uint8)
        labels, areas = label_components(m, 1, backend=backend)
        assert sorted(areas.tolist()) == flood_fill_components(m.tolist(), 1)
        assert areas.sum() == (m == 1).sum()
        assert np.array_equal(labels > 0, m == 1)


def test_equivalent_diameter_examples():
    assert equivalent_diameter(100) == pytest.approx(11.2838, abs=5e-5)
    assert equivalent_diameter(1) == pytest.approx(1.1284, abs=5e-5)
    yy, xx = np.mgrid[-15:16, -15:16]
    area = int((xx**2 + yy**2 <= 100).sum())
    assert abs(equivalent_diameter(area) - 20) / 20 < 0.03
    assert np.allclose(equivalent_diameter([1, 100]), [1.1284, 11.2838], atol=5e-5)
    for bad in (0, -3):
        with pytest.raises(ValueError):
            equivalent_diameter(bad)


def test_equivalent_diameter_vs_bisection():
    for a in np.random.default_rng(1).integers(1, 10**6, 200):
        assert abs(equivalent_diameter(int(a)) - diameter_bisection(int(a))) < 1e-10 * max(1, diameter_bisection(int(a)))


def test_g_ratio_examples():
    m = np.zeros((4, 4), np.uint8)
    m[0, :2] = 1
    m[1, :2] = 2
    assert patch_metrics(m).g_ratio == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    m[1, :2] = 0
    assert patch_metrics(m).g_ratio == 1.0
    assert g_ratio_from_fractions(0.0, 0.3) is None


def test_five_disks():
    m = np.zeros((200, 200), np.uint8)
    yy, xx = np.mgrid[0:200, 0:200]
    for cy, cx in [(30, 30), (30, 120), (100, 70), (160, 30), (160, 160)]:
        m[(yy - cy) ** 2 + (xx - cx) ** 2 <= 100] = 1
    rec = patch_metrics(m)
    assert rec.density == 5
    assert abs(rec.diam_mean - 20) / 20 < 0.03
    assert rec.diam_std < 1e-9


def test_small_components_filtered():
    m = np.zeros((20, 20), np.uint8)
    m[0, 0] = 1
    m[5:8, 5:8] = 1
    rec = patch_metrics(m, min_area=4)
    assert rec.density == 1 and rec.diam_std == 0.0
    assert patch_metrics(m, min_area=1).density == 2


def test_background_and_non_roi():
    rec = patch_metrics(np.zeros((8, 8), np.uint8))
    assert (rec.density, rec.avf, rec.mvf, rec.g_ratio, rec.diam_mean) == (0, 0.0, 0.0, None, None)
    assert patch_metrics(np.ones((8, 8), np.uint8), roi=False) == MorphometryRecord(roi=False)


@settings(max_examples=80, deadline=None)
@given(arrays(np.uint8, (12, 12), elements=st.integers(0, 2)))
def test_record_invariants(m):
    rec = patch_metrics(m, min_area=1)
    n = m.size
    bg = int((m == 0).sum())
    assert rec.avf * n + rec.mvf * n + bg == n
    assert rec.avf + rec.mvf <= 1
    assert (rec.diam_mean is not None) == (rec.density > 0)
    if rec.avf > 0:
        assert abs(rec.g_ratio - 1 / math.sqrt(1 + rec.mvf / rec.avf)) < 1e-12
        assert abs(rec.g_ratio - g_ratio_counts(m.tolist())) < 1e-12
        assert 0 < rec.g_ratio <= 1


def test_grid_dims_full_slide():
    m = MosaicManifest(448, 1408, 1024, 4.0)
    assert MetricGridSpec(1024, 4).grid_dims(m) == (112, 352)
    assert MetricGridSpec(100, 1).grid_dims(MosaicManifest(3, 1, 64, 4.0)) == (2, 1)


def test_normalize_map():
    d = normalize_map([2.0, 4.0, 6.0])
    assert d.normalized.tolist() == [0.0, 0.5, 1.0]
    assert normalize_map([3.0, 3.0]).normalized.tolist() == [0.0, 0.0]
    with pytest.raises(EmptyRoiError):
        normalize_map([np.nan, np.nan])
    v = np.random.default_rng(0).normal(size=(5, 7))
    v[2, 3] = np.nan
    n = normalize_map(v).normalized
    assert np.nanargmax(n) == np.nanargmax(v) and np.nanargmin(n) == np.nanargmin(v)
    assert np.nanmin(n) == 0 and np.nanmax(n) == 1 and np.isnan(n[2, 3])


@pytest.fixture(scope="module")
def mosaic(tmp_path_factory):
    out = tmp_path_factory.mktemp("mosaic")
    grid = [[SyntheticSceneSpec(patch_px=128, fiber_count=4, inner_radius_range=(5, 9), seed=10 * iy + ix)
             for ix in range(3)] for iy in range(2)]
    return generate_mosaic(grid, out)


def test_slide_per_patch(mosaic, backend):
    spec = MetricGridSpec(128, 1, min_area=4)
    g = slide_morphometry(mosaic, spec, backend=backend)
    assert g.shape == (3, 2) and g.roi_cells == 6
    assert all(r.density == 4 for _, _, r in g.cells())
    assert g.summary_line().startswith("SLIDE-SUMMARY v1 mean_g_ratio=0.") and g.summary_line().endswith("roi_cells=6")


def test_slide_downsampled_and_roi(mosaic, tmp_path):
    spec = MetricGridSpec(64, 2)
    roi = np.array([[True, False, True], [True, True, False]])
    g = slide_morphometry(mosaic, spec, roi=roi, workers=2)
    assert g.roi_cells == 4 and not g.records[0][1].roi
    assert g.diameter_nm(10.0) == 10.0 * 4.0 * 2
    log = tmp_path / "cells.jsonl"
    first = slide_morphometry(mosaic, spec, roi=roi, resume_path=log)
    assert len(log.read_text().splitlines()) == 4
    again = slide_morphometry(mosaic, spec, roi=roi, resume_path=log)
    assert len(log.read_text().splitlines()) == 4
    assert again.records == first.records == g.records


def test_missing_labels_enumerated(mosaic):
    m = mosaic.copy()
    m.entries[(2, 1)].annotated = False
    with pytest.raises(MissingLabelsError) as exc:
        slide_morphometry(m, MetricGridSpec(128, 1))
    assert (2, 1) in exc.value.coords
    roi = np.ones((2, 3), bool)
    roi[1, 2] = False
    assert slide_morphometry(m, MetricGridSpec(128, 1), roi=roi).roi_cells == 5


def _grid2x2():
    recs = [[MorphometryRecord(True, 3, 10.0, 1.0, 0.2, 0.1, 1 / math.sqrt(1.5)),
             MorphometryRecord(True, 5, 12.0, 2.0, 0.3, 0.2, 1 / math.sqrt(1 + 2 / 3))],
            [MorphometryRecord(True, 0, None, None, 0.0, 0.0, None), MorphometryRecord(roi=False)]]
    return MorphometryGrid(recs, MetricGridSpec(16, 1), 4.0)


def test_render_maps(tmp_path):
    grid = _grid2x2()
    written = render_maps(grid, tmp_path)
    assert len(written) == 12
    for metric in METRICS:
        img = np.array(Image.open(tmp_path / f"{metric}.png"))
        assert img.shape == (2, 2) and img.dtype == np.uint8
        raw = (tmp_path / f"{metric}_raw.csv").read_text().splitlines()
        assert raw[1].split(",")[1] == "-"
        norm = normalize_map(grid.values(metric), metric).normalized
        assert np.array_equal(img, np.where(np.isfinite(norm), np.rint(255 * np.nan_to_num(norm)), 0))
    dens = np.array(Image.open(tmp_path / "density.png"))
    assert dens.tolist() == [[153, 255], [0, 0]]
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) and lines[-1] == "1,1,-,-,-,-,-,-,0"
    back = read_metrics_csv(tmp_path / "metrics.csv")
    assert back.records == grid.records
    assert (tmp_path / "summary.txt").read_text().startswith("SLIDE-SUMMARY v1")


def test_map_image_encoding():
    d = normalize_map(np.array([[0.0, 1.0], [np.nan, 0.25]]))
    assert map_image(d).tolist() == [[0, 255], [0, 64]]


def test_resume_after_torn_line(mosaic, tmp_path):
    spec = MetricGridSpec(128, 1)
    log = tmp_path / "cells.jsonl"
    full = slide_morphometry(mosaic, spec, resume_path=log)
    lines = log.read_text().splitlines()
    log.write_text("\n".join(lines[:2]) + "\n" + lines[2][:15])
    again = slide_morphometry(mosaic, spec, resume_path=log)
    assert again.records == full.records
    reread = slide_morphometry(mosaic, spec, resume_path=log)
    assert reread.records == full.records
