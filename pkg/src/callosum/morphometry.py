"""Aggregate axon/myelin morphometry per metric patch and normalised distribution maps.

Per metric patch: mean and population std of equivalent axon diameters,
axon count, axon and myelin area fractions (AVF, MVF) and the aggregate
g-ratio ``1 / sqrt(1 + MVF / AVF)``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .dataset import AXON, MYELIN, DataError, atomic_write_text, downsample_labels, read_label

logger = logging.getLogger(__name__)

METRICS = ("diam_mean", "diam_std", "density", "avf", "mvf", "g_ratio")
CSV_HEADER = ("gx", "gy", *METRICS, "roi")


class MissingLabelsError(DataError):
    SHOWN = 50

    def __init__(self, coords):
        self.coords = sorted(coords, key=lambda c: (c[1], c[0]))
        listed = ", ".join(f"({ix}, {iy})" for ix, iy in self.coords[:self.SHOWN])
        more = len(self.coords) - self.SHOWN
        tail = f" ... and {more} more" if more > 0 else ""
        super().__init__(f"{len(self.coords)} patch(es) lack labels: {listed}{tail}")


class EmptyRoiError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class MetricGridSpec:
    metric_patch_px: int = 1024
    downsample_factor: int = 4
    min_area: int = 4

    def __post_init__(self):
        if self.metric_patch_px <= 0:
            raise ValueError("metric_patch_px must be positive")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        if self.min_area < 1:
            raise ValueError("min_area must be >= 1")

    def grid_dims(self, manifest):
        """``(gx, gy)`` metric cells covering the downsampled slide."""
        if manifest.patch_px % self.downsample_factor:
            raise ValueError(f"patch_px {manifest.patch_px} not divisible by factor {self.downsample_factor}")
        dp = manifest.patch_px // self.downsample_factor
        m = self.metric_patch_px
        return -(-manifest.grid_nx * dp // m), -(-manifest.grid_ny * dp // m)


@dataclasses.dataclass
class MorphometryRecord:
    roi: bool = True
    density: int | None = None
    diam_mean: float | None = None
    diam_std: float | None = None
    avf: float | None = None
    mvf: float | None = None
    g_ratio: float | None = None

    def value(self, metric):
        return getattr(self, metric)


def label_components(mask, class_id=AXON, backend=None):
    """8-connected components of ``class_id``: ``(labels, areas)``; background label 0."""
    return kernels.label8(mask, class_id, backend=backend)


def equivalent_diameter(area):
    """Diameter of the circle with the given area, ``sqrt(4 * area / pi)``."""
    a = np.asarray(area, dtype=np.float64)
    if np.any(a <= 0):
        raise ValueError("area must be positive")
    d = np.sqrt(4.0 * a / math.pi)
    return float(d) if d.ndim == 0 else d


def g_ratio_from_fractions(avf, mvf):
    if avf <= 0:
        return None
    return 1.0 / math.sqrt(1.0 + mvf / avf)


def patch_metrics(mask, roi=True, min_area=4, backend=None) -> MorphometryRecord:
    """Metrics for one metric patch (components are clipped to the patch)."""
    if not roi:
        return MorphometryRecord(roi=False)
    mask = np.asarray(mask)
    total = mask.size
    n_axon = int(np.count_nonzero(mask == AXON))
    n_myelin = int(np.count_nonzero(mask == MYELIN))
    avf, mvf = n_axon / total, n_myelin / total
    rec = MorphometryRecord(roi=True, density=0, avf=avf, mvf=mvf, g_ratio=g_ratio_from_fractions(avf, mvf))
    if n_axon:
        _, areas = label_components(mask, AXON, backend=backend)
        areas = areas[areas >= min_area]
        if areas.size:
            diams = np.sqrt(4.0 * areas / math.pi)
            rec.density = int(areas.size)
            rec.diam_mean = float(diams.mean())
            rec.diam_std = float(diams.std())
    return rec


@dataclasses.dataclass
class MorphometryGrid:
    records: list  # [gy][gx]
    spec: MetricGridSpec | None = None
    pixel_nm: float | None = None

    @property
    def shape(self):
        return len(self.records[0]) if self.records else 0, len(self.records)

    def cells(self):
        for gy, row in enumerate(self.records):
            for gx, rec in enumerate(row):
                yield gx, gy, rec

    def values(self, metric):
        """``(gy, gx)`` float array; NaN outside the ROI or where undefined."""
        gx, gy = self.shape
        out = np.full((gy, gx), np.nan)
        for x, y, rec in self.cells():
            v = rec.value(metric) if rec.roi else None
            if v is not None:
                out[y, x] = v
        return out

    @property
    def n_roi(self):
        return sum(1 for _, _, r in self.cells() if r.roi)

    @property
    def roi_cells(self):
        """ROI cells with a defined g-ratio, i.e. the cells averaged by :attr:`mean_g_ratio`."""
        return sum(1 for _, _, r in self.cells() if r.roi and r.g_ratio is not None)

    @property
    def mean_g_ratio(self):
        vals = [r.g_ratio for _, _, r in self.cells() if r.roi and r.g_ratio is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def diameter_nm(self, diam_px):
        """Convert a diameter at metric pitch to nanometres."""
        return diam_px * self.pixel_nm * self.spec.downsample_factor

    def summary_line(self):
        g = self.mean_g_ratio
        gtxt = "nan" if math.isnan(g) else f"{g:.6f}"
        return f"SLIDE-SUMMARY v1 mean_g_ratio={gtxt} roi_cells={self.roi_cells}"


def _covering(manifest, spec, gx, gy):
    f, m, p = spec.downsample_factor, spec.metric_patch_px, manifest.patch_px
    x0, y0 = gx * m * f, gy * m * f
    ixs = range(x0 // p, min(manifest.grid_nx, -(-(x0 + m * f) // p)))
    iys = range(y0 // p, min(manifest.grid_ny, -(-(y0 + m * f) // p)))
    return [(ix, iy) for iy in iys for ix in ixs]


def metric_patch_mask(manifest, spec, gx, gy, backend=None):
    """Downsampled class mask of metric cell ``(gx, gy)``; area beyond the slide is background."""
    f, m, p = spec.downsample_factor, spec.metric_patch_px, manifest.patch_px
    dp = p // f
    canvas = np.zeros((m, m), dtype=np.uint8)
    ox, oy = gx * m, gy * m
    for ix, iy in _covering(manifest, spec, gx, gy):
        small = downsample_labels(read_label(manifest, ix, iy), f, backend=backend)
        px, py = ix * dp - ox, iy * dp - oy
        sx0, sy0 = max(0, -px), max(0, -py)
        sx1, sy1 = min(dp, m - px), min(dp, m - py)
        if sx1 > sx0 and sy1 > sy0:
            canvas[py + sy0:py + sy1, px + sx0:px + sx1] = small[sy0:sy1, sx0:sx1]
    return canvas


def slide_morphometry(manifest, spec: MetricGridSpec, roi=None, workers=1, resume_path=None, backend=None):
    """Morphometry over every metric cell of a slide.

    ``roi`` is a ``(gy, gx)`` boolean array (``None`` = whole slide). Cells
    already present in ``resume_path`` (JSON lines) are reused; new ones are
    appended, so an interrupted run can continue.
    """
    gx_n, gy_n = spec.grid_dims(manifest)
    if roi is None:
        roi = np.ones((gy_n, gx_n), dtype=bool)
    roi = np.asarray(roi, dtype=bool)
    if roi.shape != (gy_n, gx_n):
        raise DataError(f"ROI shape {roi.shape[::-1]} does not match metric grid {gx_n}x{gy_n}")

    missing = set()
    for gy in range(gy_n):
        for gx in range(gx_n):
            if roi[gy, gx]:
                for c in _covering(manifest, spec, gx, gy):
                    e = manifest.entries.get(c)
                    if e is None or not e.annotated or e.label_path is None:
                        missing.add(c)
    if missing:
        raise MissingLabelsError(missing)

    done = {}
    if resume_path is not None and Path(resume_path).exists():
        for line in Path(resume_path).read_text().splitlines():
            if line.strip():
                try:
                    d = json.loads(line)
                except json.JSONDecodeError:
                    continue  # torn last line of an interrupted run
                cell = (d.pop("gx"), d.pop("gy"))
                done[cell] = MorphometryRecord(**d)

    todo = [(gx, gy) for gy in range(gy_n) for gx in range(gx_n) if roi[gy, gx] and (gx, gy) not in done]

    def work(cell):
        gx, gy = cell
        return cell, patch_metrics(metric_patch_mask(manifest, spec, gx, gy, backend), True, spec.min_area, backend)

    sink = open(resume_path, "a", encoding="utf-8") if resume_path is not None else None
    if sink and sink.tell() > 0 and not Path(resume_path).read_bytes().endswith(b"\n"):
        sink.write("\n")
    try:
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = pool.map(work, todo)
                for cell, rec in results:
                    done[cell] = rec
                    if sink:
                        sink.write(json.dumps({"gx": cell[0], "gy": cell[1], **dataclasses.asdict(rec)}) + "\n")
        else:
            for cell in todo:
                cell, rec = work(cell)
                done[cell] = rec
                if sink:
                    sink.write(json.dumps({"gx": cell[0], "gy": cell[1], **dataclasses.asdict(rec)}) + "\n")
                    sink.flush()
    finally:
        if sink:
            sink.close()

    records = [
        [done[(gx, gy)] if roi[gy, gx] else MorphometryRecord(roi=False) for gx in range(gx_n)]
        for gy in range(gy_n)
    ]
    return MorphometryGrid(records, spec, manifest.pixel_nm)


@dataclasses.dataclass
class DistributionMap:
    name: str
    raw: np.ndarray
    normalized: np.ndarray


def normalize_map(values, name=""):
    """Max-min normalise the finite cells of ``values`` to [0, 1]; NaN cells stay NaN.

    A constant map normalises to all zeros.
    """
    raw = np.asarray(values, dtype=np.float64)
    valid = np.isfinite(raw)
    if not valid.any():
        raise EmptyRoiError(f"map {name!r} has no ROI cells with values")
    lo, hi = raw[valid].min(), raw[valid].max()
    norm = np.full(raw.shape, np.nan)
    norm[valid] = 0.0 if hi == lo else (raw[valid] - lo) / (hi - lo)
    return DistributionMap(name, raw, norm)


def map_image(dmap: DistributionMap):
    return np.where(np.isfinite(dmap.normalized), np.rint(255.0 * np.nan_to_num(dmap.normalized)), 0).astype(np.uint8)


def _fmt(v, metric):
    if v is None:
        return "-"
    return str(int(v)) if metric == "density" else repr(float(v))


def render_maps(grid: MorphometryGrid, out_dir):
    """Write one normalised PNG and one raw CSV grid per metric, plus ``metrics.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in METRICS:
        raw = grid.values(metric)
        try:
            dmap = normalize_map(raw, metric)
        except EmptyRoiError:
            dmap = DistributionMap(metric, raw, np.full(raw.shape, np.nan))
        img_path = out_dir / f"{metric}.png"
        Image.fromarray(map_image(dmap), mode="L").save(img_path)
        lines = []
        for y in range(raw.shape[0]):
            lines.append(",".join(_fmt(None if not np.isfinite(v) else v, metric) for v in raw[y]))
        raw_path = out_dir / f"{metric}_raw.csv"
        atomic_write_text(raw_path, "\n".join(lines) + "\n")
        written += [img_path, raw_path]
    atomic_write_text(out_dir / "metrics.csv", metrics_csv(grid))
    atomic_write_text(out_dir / "summary.txt", grid.summary_line() + "\n")
    return written


def metrics_csv(grid: MorphometryGrid):
    lines = [",".join(CSV_HEADER)]
    for gx, gy, rec in grid.cells():
        vals = [_fmt(rec.value(m) if rec.roi else None, m) for m in METRICS]
        lines.append(",".join([str(gx), str(gy), *vals, str(int(rec.roi))]))
    return "\n".join(lines) + "\n"


def read_metrics_csv(path) -> MorphometryGrid:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise DataError(f"{path}: unexpected header {header}")
        cells = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                gx, gy = int(row[0]), int(row[1])
                vals = {
                    m: (None if t == "-" else (int(t) if m == "density" else float(t)))
                    for m, t in zip(METRICS, row[2:8])
                }
                cells[(gx, gy)] = MorphometryRecord(roi=row[8] == "1", **vals)
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: malformed row") from None
    if not cells:
        raise DataError(f"{path}: no cells")
    gx_n = max(c[0] for c in cells) + 1
    gy_n = max(c[1] for c in cells) + 1
    try:
        records = [[cells[(x, y)] for x in range(gx_n)] for y in range(gy_n)]
    except KeyError as exc:
        raise DataError(f"{path}: missing cell {exc.args[0]}") from None
    return MorphometryGrid(records)
