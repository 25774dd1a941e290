"""Sliding-window inference with blended stitching, and band-by-band annotation expansion.

A *tile function* maps a ``(B, 1, T, T)`` float32 batch in [0, 1] to
``(B, 2, T, T)`` probabilities. :func:`as_tile_fn` wraps a ``SegModel``;
any other callable with that contract (e.g. a fixed convolution) works too.
"""

from __future__ import annotations

import dataclasses
import logging
import re
import shutil
from pathlib import Path

import numpy as np

from . import kernels
from .dataset import (
    DataError,
    InvalidClassError,
    PatchShapeError,
    atomic_write_text,
    read_label_file,
    read_patch,
    save_manifest,
    write_label,
)
from .model import SegModel, to_class_mask

logger = logging.getLogger(__name__)

BAND_INFO = "BAND-INFO"
BAND_INFO_MAGIC = "BAND-INFO v1"
PRED_RE = re.compile(r"^pred_(\d+)_(\d+)\.png$")


# -- tiling ------------------------------------------------------------------


def _axis_origins(length, tile, stride):
    if length <= tile:
        return [0]
    origins = list(range(0, length - tile + 1, stride))
    if origins[-1] != length - tile:
        origins.append(length - tile)
    return origins


def _profile(tile, margin, low_border, high_border):
    a = 0 if low_border else margin
    b = tile if high_border else tile - margin
    i = np.arange(tile, dtype=np.float64)
    w = np.sin(np.pi * (i - a + 0.5) / (b - a)) ** 2
    w[:a] = 0.0
    w[b:] = 0.0
    return w


@dataclasses.dataclass
class TilingPlan:
    """Tile origins over an extent and the raised-cosine blend weights.

    Tile windows are zero within ``margin`` pixels of any tile edge that lies
    inside the extent, so predictions near interior tile borders never enter
    the blend. ``weight_sum`` is the per-pixel sum of windows used to
    normalise blend weights to 1.
    """

    extent_w: int
    extent_h: int
    tile_px: int
    stride_px: int
    origins: list
    margin: int
    weight_sum: np.ndarray

    def window(self, k):
        y0, x0 = self.origins[k]
        t, m = self.tile_px, self.margin
        wy = _profile(t, m, y0 == 0, y0 + t >= self.extent_h)
        wx = _profile(t, m, x0 == 0, x0 + t >= self.extent_w)
        return np.outer(wy, wx)

    def weights(self, k):
        """Normalised blend weights of tile ``k`` over its in-extent part."""
        y0, x0 = self.origins[k]
        h = min(self.tile_px, self.extent_h - y0)
        w = min(self.tile_px, self.extent_w - x0)
        return self.window(k)[:h, :w] / self.weight_sum[y0:y0 + h, x0:x0 + w]


def plan_tiles(extent_w, extent_h, tile_px, stride_px=None) -> TilingPlan:
    tile_px = int(tile_px)
    stride_px = tile_px // 2 if stride_px is None else int(stride_px)
    if stride_px < 1:
        raise ValueError(f"stride must be positive, got {stride_px}")
    if tile_px < 1 or extent_w < 1 or extent_h < 1:
        raise ValueError("tile and extent must be positive")
    if stride_px > tile_px:
        raise ValueError(f"stride {stride_px} exceeds tile {tile_px}; pixels would go uncovered")
    margin = (tile_px - stride_px) // 4
    ys = _axis_origins(extent_h, tile_px, stride_px)
    xs = _axis_origins(extent_w, tile_px, stride_px)
    origins = [(y, x) for y in ys for x in xs]
    plan = TilingPlan(extent_w, extent_h, tile_px, stride_px, origins, margin, np.zeros((extent_h, extent_w)))
    for k, (y0, x0) in enumerate(origins):
        h = min(tile_px, extent_h - y0)
        w = min(tile_px, extent_w - x0)
        plan.weight_sum[y0:y0 + h, x0:x0 + w] += plan.window(k)[:h, :w]
    if not (plan.weight_sum > 0).all():
        raise RuntimeError("tiling plan leaves pixels uncovered")
    return plan


# -- prediction --------------------------------------------------------------


def as_tile_fn(model, device=None):
    """Wrap a ``SegModel`` (or return a plain callable unchanged)."""
    if not isinstance(model, SegModel):
        return model
    import torch

    model.eval()
    param = next(model.parameters())
    device = device or param.device

    def tile_fn(batch):
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(batch)).to(device=device, dtype=param.dtype)
            return model(x).float().cpu().numpy()

    tile_fn.tile_px = model.cfg.input_px
    return tile_fn


def _tile_input(image, y0, x0, tile):
    crop = image[y0:y0 + tile, x0:x0 + tile]
    ph, pw = tile - crop.shape[0], tile - crop.shape[1]
    if ph or pw:
        crop = np.pad(crop, ((0, ph), (0, pw)), mode="reflect" if min(crop.shape) > 1 else "edge")
    return crop


def predict_image(tile_fn, image, plan: TilingPlan, batch_size=2, record=None, backend=None):
    """Stitched ``(2, H, W)`` float32 prediction for an in-memory grayscale image.

    ``image`` may be ``uint8`` (scaled by 1/255) or float in [0, 1]. If
    ``record`` is a list, each tile's raw prediction is appended to it in
    plan order.
    """
    image = np.asarray(image)
    if image.shape != (plan.extent_h, plan.extent_w):
        raise ValueError(f"image {image.shape[::-1]} does not match plan extent {(plan.extent_w, plan.extent_h)}")
    img = image.astype(np.float32) / 255.0 if image.dtype == np.uint8 else image.astype(np.float32)
    out = None
    t = plan.tile_px
    # fixed tile order keeps the float accumulation bit-reproducible
    for start in range(0, len(plan.origins), batch_size):
        ks = range(start, min(start + batch_size, len(plan.origins)))
        batch = np.stack([_tile_input(img, *plan.origins[k], t)[None] for k in ks])
        pred = np.asarray(tile_fn(batch), dtype=np.float32)
        if pred.ndim != 4 or pred.shape[0] != len(ks) or pred.shape[2:] != (t, t):
            raise ValueError(f"tile function returned shape {pred.shape}")
        if out is None:
            out = np.zeros((pred.shape[1], plan.extent_h, plan.extent_w), dtype=np.float64)
        for j, k in enumerate(ks):
            y0, x0 = plan.origins[k]
            w = plan.weights(k)
            tile_pred = np.ascontiguousarray(pred[j, :, :w.shape[0], :w.shape[1]])
            if record is not None:
                record.append(pred[j].copy())
            kernels.blend_accumulate(out, tile_pred, w, y0, x0, backend=backend)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def region_image(manifest, x_range, y_range):
    (x0, x1), (y0, y1) = x_range, y_range
    if not (0 <= x0 < x1 <= manifest.grid_nx and 0 <= y0 < y1 <= manifest.grid_ny):
        raise DataError(f"region x[{x0},{x1}) y[{y0},{y1}) outside {manifest.grid_nx}x{manifest.grid_ny} grid")
    p = manifest.patch_px
    img = np.zeros(((y1 - y0) * p, (x1 - x0) * p), dtype=np.uint8)
    for iy in range(y0, y1):
        for ix in range(x0, x1):
            img[(iy - y0) * p:(iy - y0 + 1) * p, (ix - x0) * p:(ix - x0 + 1) * p] = read_patch(manifest, ix, iy)
    return img


def predict_region(model, manifest, x_range, y_range, plan=None, batch_size=2, record=None, backend=None):
    """Stitched probabilities over patch columns ``x_range`` and rows ``y_range`` (half-open)."""
    tile_fn = as_tile_fn(model)
    tile_px = getattr(tile_fn, "tile_px", None) or (plan.tile_px if plan else None)
    if tile_px is None:
        raise ValueError("a plan is required when the tile function does not declare tile_px")
    p = manifest.patch_px
    ew = (x_range[1] - x_range[0]) * p
    eh = (y_range[1] - y_range[0]) * p
    if plan is None:
        plan = plan_tiles(ew, eh, tile_px)
    if (plan.extent_w, plan.extent_h) != (ew, eh):
        raise ValueError(f"plan extent {(plan.extent_w, plan.extent_h)} does not match region {(ew, eh)}")
    if plan.tile_px != tile_px:
        raise ValueError(f"plan tile {plan.tile_px} != model input {tile_px}")
    image = region_image(manifest, x_range, y_range)
    return predict_image(tile_fn, image, plan, batch_size, record, backend)


def predict_patches(model, manifest, coords, halo=1, chunk_cols=4, stride_px=None, batch_size=2):
    """Yield ``((ix, iy), probs)`` for patches, predicted with ``halo`` patches of context."""
    tile_fn = as_tile_fn(model)
    p = manifest.patch_px
    rows = {}
    for ix, iy in coords:
        rows.setdefault(iy, []).append(ix)
    for iy in sorted(rows):
        cols = sorted(rows[iy])
        for c in range(0, len(cols), chunk_cols):
            chunk = cols[c:c + chunk_cols]
            xr = (max(0, chunk[0] - halo), min(manifest.grid_nx, chunk[-1] + 1 + halo))
            yr = (max(0, iy - halo), min(manifest.grid_ny, iy + 1 + halo))
            ew, eh = (xr[1] - xr[0]) * p, (yr[1] - yr[0]) * p
            plan = plan_tiles(ew, eh, tile_fn.tile_px, stride_px)
            probs = predict_region(tile_fn, manifest, xr, yr, plan, batch_size)
            oy = (iy - yr[0]) * p
            for ix in chunk:
                ox = (ix - xr[0]) * p
                yield (ix, iy), probs[:, oy:oy + p, ox:ox + p]


# -- band expansion ----------------------------------------------------------


@dataclasses.dataclass
class BandState:
    """Progress of the expand/proofread/ingest cycle along the y axis (half-open row ranges)."""

    grid_ny: int
    annotated: tuple
    pending: tuple | None = None
    proofread: tuple | None = None
    iteration: int = 0
    complete: bool = False

    def __post_init__(self):
        a0, a1 = self.annotated
        if not 0 <= a0 <= a1 <= self.grid_ny:
            raise ValueError(f"annotated range {self.annotated} outside [0, {self.grid_ny})")
        if self.proofread is not None:
            r0, r1 = self.proofread
            if r0 < r1 and not (a0 <= r0 and r1 <= a1):
                raise ValueError("proofread range must lie inside the annotated range")

    @classmethod
    def from_manifest(cls, manifest):
        rows = manifest.annotated_rows()
        if not rows:
            raise DataError("manifest has no fully annotated rows to expand from")
        a0 = a1 = rows[0]
        rowset = set(rows)
        while a1 in rowset:
            a1 += 1
        return cls(manifest.grid_ny, (a0, a1))

    def next_band(self, band_height):
        a0, a1 = self.annotated
        if a1 < self.grid_ny:
            return a1, min(a1 + band_height, self.grid_ny), a1 + band_height > self.grid_ny
        if a0 > 0:
            return max(0, a0 - band_height), a0, a0 - band_height < 0
        return None


@dataclasses.dataclass
class BandExport:
    directory: Path
    y_range: tuple
    files: list
    clipped: bool = False


def write_band_info(directory, info):
    lines = [BAND_INFO_MAGIC] + [f"{k}={v}" for k, v in info.items()]
    atomic_write_text(Path(directory) / BAND_INFO, "\n".join(lines) + "\n")


def read_band_info(path):
    path = Path(path)
    if path.is_dir():
        path = path / BAND_INFO
    if not path.is_file():
        raise DataError(f"{path}: band info not found")
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != BAND_INFO_MAGIC:
        raise DataError(f"{path}: not a {BAND_INFO_MAGIC} file")
    info = {}
    for line in lines[1:]:
        if line.strip():
            k, _, v = line.partition("=")
            info[k.strip()] = v.strip()
    for key in ("y_start", "y_end"):
        if key not in info:
            raise DataError(f"{path}: missing {key}")
    return info


def expand_band(state: BandState, model, manifest, band_height, out_dir, threshold=0.5, snapshot="",
                chunk_cols=4, stride_px=None):
    """Predict the next band of patch rows and export it for external proofreading.

    Returns ``(new_state, export)``; ``export`` is ``None`` once every row is
    annotated. Exported rows become *pending*, not annotated: that happens in
    :func:`ingest_corrections`.
    """
    if band_height < 1:
        raise ValueError("band_height must be >= 1")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if state.pending:
        raise DataError(f"band {state.pending} is still pending; ingest its corrections first")
    nxt = state.next_band(band_height)
    if nxt is None:
        logger.info("all %d rows annotated; nothing to expand", state.grid_ny)
        return dataclasses.replace(state, complete=True), None
    y0, y1, clipped = nxt
    if clipped:
        logger.warning("band clipped to grid: rows [%d, %d)", y0, y1)
    iteration = state.iteration + 1
    band_dir = Path(out_dir) / f"band_{iteration:03d}"
    band_dir.mkdir(parents=True, exist_ok=True)
    coords = [(ix, iy) for iy in range(y0, y1) for ix in range(manifest.grid_nx)]
    files = []
    for (ix, iy), probs in predict_patches(model, manifest, coords, chunk_cols=chunk_cols, stride_px=stride_px):
        path = band_dir / f"pred_{ix}_{iy}.png"
        write_label(to_class_mask(probs, threshold), path)
        files.append(path)
    write_band_info(band_dir, {
        "y_start": y0, "y_end": y1, "x_start": 0, "x_end": manifest.grid_nx,
        "threshold": threshold, "snapshot": snapshot or "-", "patch_px": manifest.patch_px,
        "pixel_nm": manifest.pixel_nm, "iteration": iteration,
    })
    new_state = dataclasses.replace(state, pending=(y0, y1), iteration=iteration)
    return new_state, BandExport(band_dir, (y0, y1), files, clipped)


class CorrectionsError(DataError):
    def __init__(self, missing=(), invalid=()):
        self.missing = sorted(missing, key=lambda c: (c[1], c[0]))
        self.invalid = list(invalid)
        parts = []
        if self.missing:
            parts.append("missing corrected file(s) for " + ", ".join(f"({ix}, {iy})" for ix, iy in self.missing))
        if self.invalid:
            parts.append("invalid file(s): " + "; ".join(self.invalid))
        super().__init__(". ".join(parts))


def ingest_corrections(state: BandState, manifest, corrected_dir, manifest_path=None, label_dir=None):
    """Attach proofread labels for the pending band and commit them to the manifest.

    All files are validated before anything is written; the manifest is
    replaced atomically as the last step, so a failure at any point leaves
    the previous manifest in place. Returns ``(new_state, new_manifest)``.
    """
    if not state.pending:
        raise DataError("no pending band to ingest")
    y0, y1 = state.pending
    corrected_dir = Path(corrected_dir)
    coords = [(ix, iy) for iy in range(y0, y1) for ix in range(manifest.grid_nx)]
    missing, invalid, masks = [], [], {}
    for ix, iy in coords:
        path = corrected_dir / f"pred_{ix}_{iy}.png"
        if not path.is_file():
            missing.append((ix, iy))
            continue
        try:
            masks[(ix, iy)] = read_label_file(path, manifest.patch_px)
        except (InvalidClassError, PatchShapeError, DataError) as exc:
            invalid.append(str(exc))
    if missing or invalid:
        raise CorrectionsError(missing, invalid)

    if label_dir is None:
        base = Path(manifest_path).parent if manifest_path else corrected_dir.parent
        label_dir = base / "labels"
    label_dir = Path(label_dir)
    new_manifest = manifest.copy()
    for (ix, iy), mask in masks.items():
        dst = (label_dir / f"l_{ix}_{iy}.png").resolve()
        write_label(mask, dst)
        e = new_manifest.entry(ix, iy)
        e.label_path = dst
        e.annotated = True
    if manifest_path is not None:
        save_manifest(new_manifest, manifest_path)

    a0, a1 = state.annotated
    r = state.proofread
    new_annot = (min(a0, y0), max(a1, y1))
    new_proof = (y0, y1) if not r or r[0] == r[1] else (min(r[0], y0), max(r[1], y1))
    new_state = dataclasses.replace(state, annotated=new_annot, pending=None, proofread=new_proof)
    return new_state, new_manifest


def copy_band(src_dir, dst_dir):
    """Copy an exported band (e.g. to seed a corrections directory)."""
    src_dir, dst_dir = Path(src_dir), Path(dst_dir)
    dst_dir.mkdir(parents=True, exist_ok=True)
    for f in src_dir.iterdir():
        if PRED_RE.match(f.name) or f.name == BAND_INFO:
            shutil.copy2(f, dst_dir / f.name)
    return dst_dir
