"""Synthetic EM-like patches with exactly known axon/myelin ground truth.

Fibers are circles, or capsules (a rectangle with semicircular caps) for
long-range axons. Each fiber is an axon interior surrounded by a sheath
annulus; optional features are a Node of Ranvier (a full-thickness sheath
gap) and demyelination (a thinned sheath over half the perimeter).
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import AXON, MYELIN, MosaicManifest, PatchEntry, save_manifest, write_label, write_patch

MAX_TRIES = 1000
PLACEMENT_MARGIN = 2

AXOPLASM_LEVEL = 0.45
SHEATH_LEVEL = 0.12
BACKGROUND_LEVEL = 0.72


class SpecError(ValueError):
    pass


class InfeasiblePacking(RuntimeError):
    pass


@dataclasses.dataclass
class SyntheticSceneSpec:
    patch_px: int = 512
    fiber_count: int = 8
    inner_radius_range: tuple = (8.0, 20.0)
    g_ratio_range: tuple = (0.6, 0.8)
    elongation_prob: float = 0.0
    node_prob: float = 0.0
    demyelination_prob: float = 0.0
    noise_level: float = 0.02
    seed: int = 0
    node_arc_deg: float = 30.0
    demyelination_fraction: float = 0.3
    elongation_range: tuple = (1.5, 3.0)
    axoplasm_level: float = AXOPLASM_LEVEL
    background_level: float = BACKGROUND_LEVEL

    def __post_init__(self):
        self.inner_radius_range = tuple(float(v) for v in self.inner_radius_range)
        self.g_ratio_range = tuple(float(v) for v in self.g_ratio_range)
        self.elongation_range = tuple(float(v) for v in self.elongation_range)
        self.validate()

    def validate(self):
        if self.patch_px <= 0:
            raise SpecError(f"patch_px must be positive, got {self.patch_px}")
        if self.fiber_count < 0:
            raise SpecError(f"fiber_count must be >= 0, got {self.fiber_count}")
        rmin, rmax = self.inner_radius_range
        if not 0 < rmin <= rmax:
            raise SpecError(f"inner_radius_range must satisfy 0 < min <= max, got {self.inner_radius_range}")
        gmin, gmax = self.g_ratio_range
        if not 0 < gmin <= gmax < 1:
            raise SpecError(f"g_ratio_range must satisfy 0 < min <= max < 1, got {self.g_ratio_range}")
        for name in ("elongation_prob", "node_prob", "demyelination_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1], got {p}")
        if self.noise_level < 0:
            raise SpecError(f"noise_level must be >= 0, got {self.noise_level}")
        if not 0 < self.node_arc_deg < 360:
            raise SpecError("node_arc_deg must lie in (0, 360)")
        if not 0 < self.demyelination_fraction <= 1:
            raise SpecError("demyelination_fraction must lie in (0, 1]")
        if not 0 < self.elongation_range[0] <= self.elongation_range[1]:
            raise SpecError("elongation_range must be positive and ordered")
        for name in ("axoplasm_level", "background_level"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)


@dataclasses.dataclass
class FiberRecord:
    center: tuple
    orientation: float
    inner_radius: float
    outer_radius: float
    half_length: float
    elongated: bool
    node: bool
    demyelinated: bool
    axon_area: int
    myelin_area: int

    @property
    def g_ratio(self):
        return self.inner_radius / self.outer_radius

    @property
    def analytic_axon_area(self):
        r = self.inner_radius
        return math.pi * r * r + 4.0 * r * self.half_length


def _fiber_geometry(h, w, cy, cx, theta, half_len):
    """Local (u, v) coords along/across the axis and distance to the axis segment."""
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(theta), math.sin(theta)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    du = u - np.clip(u, -half_len, half_len)
    return u, v, np.hypot(du, v)


def _rasterize(fiber, h, w, rng_params):
    cy, cx = fiber["center"]
    r_in, r_out, half_len = fiber["r_in"], fiber["r_out"], fiber["half_len"]
    u, v, d = _fiber_geometry(h, w, cy, cx, fiber["theta"], half_len)
    axon = d <= r_in
    outer = np.full(d.shape, r_out)
    if fiber["demyelinated"]:
        outer = np.where(v > 0, r_in + rng_params["demyelination_fraction"] * (r_out - r_in), outer)
    sheath = (d > r_in) & (d <= outer)
    if fiber["node"]:
        if half_len > 0:
            # capsule: axial band crossing the sheath on both sides of the body
            gap = np.abs(u - fiber["node_pos"]) <= fiber["node_width"] / 2.0
        else:
            ang = np.arctan2(v, u)
            delta = np.angle(np.exp(1j * (ang - fiber["node_pos"])))
            gap = np.abs(delta) <= math.radians(rng_params["node_arc_deg"]) / 2.0
        sheath &= ~gap
    return axon, sheath


def _background_texture(rng, size, level):
    noise = rng.standard_normal((size, size))
    tex = ndimage.gaussian_filter(noise, sigma=3.0, mode="wrap")
    tex /= tex.std() + 1e-12
    return level + 0.05 * tex


def generate_scene(spec: SyntheticSceneSpec):
    """Return ``(image uint8, class mask uint8, [FiberRecord])`` for one patch."""
    spec.validate()
    n = spec.patch_px
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros((n, n), dtype=np.uint8)
    occupied = np.zeros((n, n), dtype=bool)
    records = []
    params = {"node_arc_deg": spec.node_arc_deg, "demyelination_fraction": spec.demyelination_fraction}

    for k in range(spec.fiber_count):
        r_in = rng.uniform(*spec.inner_radius_range)
        r_out = r_in / rng.uniform(*spec.g_ratio_range)
        elongated = rng.random() < spec.elongation_prob
        node = rng.random() < spec.node_prob
        demyelinated = rng.random() < spec.demyelination_prob
        half_len = rng.uniform(*spec.elongation_range) * r_out if elongated else 0.0
        reach = r_out + half_len + PLACEMENT_MARGIN
        if 2 * reach + 2 > n:
            raise InfeasiblePacking(f"fiber {k} (reach {reach:.1f}px) does not fit in a {n}px patch")
        for _ in range(MAX_TRIES):
            theta = rng.uniform(0, math.pi)
            ext_x = abs(half_len * math.cos(theta)) + r_out + PLACEMENT_MARGIN
            ext_y = abs(half_len * math.sin(theta)) + r_out + PLACEMENT_MARGIN
            cx = rng.uniform(ext_x + 1, n - 1 - ext_x)
            cy = rng.uniform(ext_y + 1, n - 1 - ext_y)
            y0, y1 = max(0, int(cy - ext_y) - 1), min(n, int(cy + ext_y) + 2)
            x0, x1 = max(0, int(cx - ext_x) - 1), min(n, int(cx + ext_x) + 2)
            _, _, d = _fiber_geometry(y1 - y0, x1 - x0, cy - y0, cx - x0, theta, half_len)
            footprint = d <= r_out + PLACEMENT_MARGIN
            if not (footprint & occupied[y0:y1, x0:x1]).any():
                break
        else:
            raise InfeasiblePacking(f"could not place fiber {k} of {spec.fiber_count} after {MAX_TRIES} tries")
        fiber = {
            "center": (cy - y0, cx - x0), "theta": theta, "r_in": r_in, "r_out": r_out,
            "half_len": half_len, "node": node, "demyelinated": demyelinated,
            "node_pos": rng.uniform(-half_len, half_len) if half_len > 0 else rng.uniform(-math.pi, math.pi),
            "node_width": max(2.0, r_out - r_in),
        }
        axon, sheath = _rasterize(fiber, y1 - y0, x1 - x0, params)
        occupied[y0:y1, x0:x1] |= footprint
        win = mask[y0:y1, x0:x1]
        win[sheath] = MYELIN
        win[axon] = AXON
        records.append(
            FiberRecord(
                center=(float(cx), float(cy)), orientation=float(theta), inner_radius=float(r_in),
                outer_radius=float(r_out), half_length=float(half_len), elongated=bool(elongated),
                node=bool(node), demyelinated=bool(demyelinated),
                axon_area=int(axon.sum()), myelin_area=int(sheath.sum()),
            )
        )

    image = _background_texture(rng, n, spec.background_level)
    axo = spec.axoplasm_level + 0.02 * rng.standard_normal((n, n))
    image = np.where(mask == AXON, axo, image)
    image = np.where(mask == MYELIN, SHEATH_LEVEL, image)
    if spec.noise_level > 0:
        image = image + rng.normal(0.0, spec.noise_level, size=image.shape)
    image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    return image, mask, records


def scene_seed(base_seed, ix, iy):
    return int(np.random.SeedSequence([int(base_seed), int(ix), int(iy)]).generate_state(1)[0])


def generate_mosaic(spec_grid, out_dir, pixel_nm=4.0, splits=None):
    """Write a grid of independent scenes plus a manifest; return the manifest.

    ``spec_grid[iy][ix]`` is the scene spec for patch ``(ix, iy)``. ``splits``
    optionally maps row index to a split tag. Fiber ground truth goes to
    ``fibers.json`` beside the manifest.
    """
    out_dir = Path(out_dir)
    ny, nx = len(spec_grid), len(spec_grid[0])
    if any(len(row) != nx for row in spec_grid):
        raise SpecError("spec grid rows have unequal length")
    patch_px = spec_grid[0][0].patch_px
    if any(s.patch_px != patch_px for row in spec_grid for s in row):
        raise SpecError("all scene specs must share patch_px")
    manifest = MosaicManifest(nx, ny, patch_px, float(pixel_nm))
    truth = {}
    for iy in range(ny):
        for ix in range(nx):
            image, mask, records = generate_scene(spec_grid[iy][ix])
            img_path = out_dir / "images" / f"p_{ix}_{iy}.png"
            lbl_path = out_dir / "labels" / f"l_{ix}_{iy}.png"
            write_patch(image, img_path)
            write_label(mask, lbl_path)
            split = (splits or {}).get(iy, "unassigned")
            manifest.entries[(ix, iy)] = PatchEntry(img_path.resolve(), lbl_path.resolve(), split, True)
            truth[f"{ix},{iy}"] = [dataclasses.asdict(r) for r in records]
    (out_dir / "fibers.json").write_text(json.dumps(truth, indent=1))
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


def load_fiber_truth(path):
    raw = json.loads(Path(path).read_text())
    out = {}
    for key, recs in raw.items():
        ix, iy = (int(t) for t in key.split(","))
        out[(ix, iy)] = [FiberRecord(**{**r, "center": tuple(r["center"])}) for r in recs]
    return out


def spec_grid_from_config(cfg):
    """Build ``(spec_grid, pixel_nm, splits)`` from a parsed synth config mapping.

    Keys: ``grid: [nx, ny]``, ``patch_px``, ``pixel_nm``, ``seed``, ``scene``
    (defaults for every cell), ``overrides`` (list of ``{ix, iy, ...}``) and
    ``splits`` (``{train: [y0, y1], val: ..., test: ...}``).
    """
    try:
        nx, ny = (int(v) for v in cfg["grid"])
    except (KeyError, TypeError, ValueError):
        raise SpecError("config needs 'grid: [nx, ny]'") from None
    if nx <= 0 or ny <= 0:
        raise SpecError("grid dims must be positive")
    base = dict(cfg.get("scene") or {})
    base["patch_px"] = int(cfg.get("patch_px", base.get("patch_px", 512)))
    seed = int(cfg.get("seed", 0))
    overrides = {}
    for ov in cfg.get("overrides") or []:
        ov = dict(ov)
        overrides[(int(ov.pop("ix")), int(ov.pop("iy")))] = ov
    grid = []
    for iy in range(ny):
        row = []
        for ix in range(nx):
            d = {**base, **overrides.get((ix, iy), {})}
            d.setdefault("seed", scene_seed(seed, ix, iy))
            row.append(SyntheticSceneSpec.from_dict(d))
        grid.append(row)
    splits = {}
    for tag, rng_ in (cfg.get("splits") or {}).items():
        if tag not in ("train", "val", "test"):
            raise SpecError(f"unknown split {tag!r}")
        for iy in range(int(rng_[0]), int(rng_[1])):
            splits[iy] = tag
    return grid, float(cfg.get("pixel_nm", 4.0)), splits
