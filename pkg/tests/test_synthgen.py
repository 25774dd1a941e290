import math

import numpy as np
import pytest
from scipy import ndimage

from callosum.dataset import load_manifest, read_label
from callosum.synthgen import (
    InfeasiblePacking,
    SpecError,
    SyntheticSceneSpec,
    generate_mosaic,
    generate_scene,
    load_fiber_truth,
    scene_seed,
    spec_grid_from_config,
)

EIGHT = np.ones((3, 3), bool)


def _scene(**kw):
    kw.setdefault("patch_px", 192)
    kw.setdefault("inner_radius_range", (5, 12))
    return generate_scene(SyntheticSceneSpec(**kw))


def test_empty_scene():
    image, mask, records = _scene(fiber_count=0)
    assert not mask.any() and records == []
    assert image.shape == (192, 192) and image.dtype == np.uint8


def test_five_fibers_ringed():
    _, mask, records = _scene(fiber_count=5, seed=3)
    lab, n = ndimage.label(mask == 1, structure=EIGHT)
    assert n == 5 == len(records)
    for k in range(1, n + 1):
        comp = lab == k
        ring = ndimage.binary_dilation(comp, structure=EIGHT) & ~comp
        assert np.all(mask[ring] == 2)


def test_single_fiber_g_ratio_and_area():
    _, mask, (rec,) = _scene(fiber_count=1, inner_radius_range=(10, 10), g_ratio_range=(10 / 14, 10 / 14))
    assert rec.inner_radius == 10 and rec.outer_radius == pytest.approx(14)
    assert rec.g_ratio == pytest.approx(0.714, abs=5e-4)
    assert abs(rec.axon_area - math.pi * 100) / (math.pi * 100) < 0.03


@pytest.mark.parametrize("seed", range(6))
def test_mask_record_consistency(seed):
    _, mask, records = _scene(fiber_count=6, seed=seed, elongation_prob=0.4, node_prob=0.5,
                              demyelination_prob=0.5)
    assert int((mask == 1).sum()) == sum(r.axon_area for r in records)
    assert int((mask == 2).sum()) == sum(r.myelin_area for r in records)
    assert ndimage.label(mask == 1, structure=EIGHT)[1] == len(records)
    for r in records:
        assert r.outer_radius > r.inner_radius > 0
        assert r.axon_area > 0 and r.myelin_area > 0
        assert 0 < r.g_ratio < 1


def test_elongated_area_matches_capsule():
    _, _, records = _scene(patch_px=256, fiber_count=3, elongation_prob=1.0, seed=2, inner_radius_range=(8, 10))
    for r in records:
        assert r.elongated and r.half_length > 0
        assert abs(r.axon_area - r.analytic_axon_area) / r.analytic_axon_area < 0.03


@pytest.mark.parametrize("elong", [0.0, 1.0])
def test_node_gap_exposes_axon(elong):
    _, mask, records = _scene(patch_px=256, fiber_count=3, node_prob=1.0, elongation_prob=elong, seed=4,
                              inner_radius_range=(8, 10))
    lab, n = ndimage.label(mask == 1, structure=EIGHT)
    assert n == 3 and all(r.node for r in records)
    for k in range(1, n + 1):
        comp = lab == k
        ring = ndimage.binary_dilation(comp, structure=EIGHT) & ~comp
        assert (mask[ring] == 0).any()


def test_demyelination_thins_sheath():
    base = _scene(fiber_count=4, seed=9, inner_radius_range=(8, 10))[2]
    thin = _scene(fiber_count=4, seed=9, inner_radius_range=(8, 10), demyelination_prob=1.0)[2]
    for a, b in zip(base, thin):
        if b.demyelinated and not a.demyelinated:
            assert b.myelin_area < a.myelin_area


def test_deterministic():
    a = _scene(fiber_count=4, seed=11, node_prob=0.5)
    b = _scene(fiber_count=4, seed=11, node_prob=0.5)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2] == b[2]


def test_render_levels():
    image, mask, _ = _scene(fiber_count=4, seed=5, noise_level=0.0)
    assert image[mask == 2].mean() < image[mask == 1].mean() < image[mask == 0].mean()


@pytest.mark.parametrize(
    "kw",
    [
        {"g_ratio_range": (1.2, 1.5)},
        {"g_ratio_range": (0.8, 0.6)},
        {"inner_radius_range": (0, 5)},
        {"node_prob": 1.5},
        {"noise_level": -1},
        {"fiber_count": -1},
    ],
)
def test_spec_validation(kw):
    with pytest.raises(SpecError):
        SyntheticSceneSpec(**kw)


def test_infeasible_packing():
    with pytest.raises(InfeasiblePacking):
        generate_scene(SyntheticSceneSpec(patch_px=64, fiber_count=50, inner_radius_range=(8, 8)))
    with pytest.raises(InfeasiblePacking):
        generate_scene(SyntheticSceneSpec(patch_px=32, fiber_count=1, inner_radius_range=(20, 20)))


def test_mosaic(tmp_path):
    grid = [[SyntheticSceneSpec(patch_px=96, fiber_count=3, inner_radius_range=(4, 8), seed=scene_seed(1, ix, iy))
             for ix in range(2)] for iy in range(2)]
    grid[1][0] = SyntheticSceneSpec(patch_px=96, fiber_count=0)
    m = generate_mosaic(grid, tmp_path / "a", splits={0: "train"})
    assert len(m.annotated_rows()) == 2 and len(m.entries) == 4
    assert all(e.annotated for e in m.entries.values())
    reread = load_manifest(tmp_path / "a" / "manifest.tsv")
    assert not read_label(reread, 0, 1).any()
    assert reread.entries[(1, 0)].split == "train" and reread.entries[(1, 1)].split == "unassigned"
    truth = load_fiber_truth(tmp_path / "a" / "fibers.json")
    assert sum(r.axon_area for r in truth[(1, 1)]) == int((read_label(reread, 1, 1) == 1).sum())

    generate_mosaic(grid, tmp_path / "b")
    for name in ("images/p_1_1.png", "labels/l_1_1.png", "labels/l_0_0.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_mosaic_rejects_mixed_patch_size(tmp_path):
    grid = [[SyntheticSceneSpec(patch_px=64, fiber_count=0), SyntheticSceneSpec(patch_px=96, fiber_count=0)]]
    with pytest.raises(SpecError):
        generate_mosaic(grid, tmp_path)


def test_config_grid():
    grid, pixel_nm, splits = spec_grid_from_config(
        {"grid": [3, 2], "patch_px": 64, "pixel_nm": 16, "seed": 7, "scene": {"fiber_count": 2},
         "overrides": [{"ix": 1, "iy": 0, "fiber_count": 0}], "splits": {"train": [0, 1], "val": [1, 2]}}
    )
    assert len(grid) == 2 and len(grid[0]) == 3 and pixel_nm == 16.0
    assert grid[0][1].fiber_count == 0 and grid[1][2].fiber_count == 2
    assert grid[0][0].seed != grid[0][2].seed
    assert splits == {0: "train", 1: "val"}
    with pytest.raises(SpecError):
        spec_grid_from_config({"grid": [1, 1], "scene": {"bogus": 1}})
