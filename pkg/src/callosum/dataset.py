"""Mosaic manifests, patch/label IO, label downsampling, region splits and ROI masks.

A slide is addressed as a ``grid_nx x grid_ny`` grid of square patches. The
manifest is a tab-separated text file::

    CALLOSUM-MANIFEST v1 <grid_nx> <grid_ny> <patch_px> <pixel_nm>
    ix  iy  image_path  label_path_or_dash  split_tag  annotated_0_or_1

Relative paths are resolved against the manifest's directory.

Class masks are plain ``uint8`` arrays holding 0 (background), 1 (myelinated
axon) and 2 (myelin sheath).
"""

from __future__ import annotations

import dataclasses
import logging
import os
import tempfile
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels

logger = logging.getLogger(__name__)

MAGIC = "CALLOSUM-MANIFEST"
VERSION = "v1"
SPLITS = ("train", "val", "test", "unassigned")
BACKGROUND, AXON, MYELIN = 0, 1, 2
CLASS_IDS = (BACKGROUND, AXON, MYELIN)


class DataError(Exception):
    """Raised for malformed or missing input data."""


class ManifestError(DataError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class MissingEntryError(DataError, KeyError):
    def __str__(self):
        return str(self.args[0])


class PatchShapeError(DataError):
    pass


class InvalidClassError(DataError):
    def __init__(self, values, source=None):
        values = sorted(int(v) for v in values)
        src = f" in {source}" if source else ""
        super().__init__(f"invalid class value(s) {values}{src}; expected a subset of {{0, 1, 2}}")
        self.values = values


class NoLabelError(DataError):
    pass


@dataclasses.dataclass
class PatchEntry:
    image_path: Path
    label_path: Path | None = None
    split: str = "unassigned"
    annotated: bool = False


@dataclasses.dataclass
class MosaicManifest:
    grid_nx: int
    grid_ny: int
    patch_px: int
    pixel_nm: float
    entries: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.grid_nx <= 0 or self.grid_ny <= 0:
            raise ManifestError(f"grid dims must be positive, got {self.grid_nx}x{self.grid_ny}")
        if self.patch_px <= 0:
            raise ManifestError(f"patch_px must be positive, got {self.patch_px}")
        if not self.pixel_nm > 0:
            raise ManifestError(f"pixel_nm must be positive, got {self.pixel_nm}")

    def entry(self, ix, iy) -> PatchEntry:
        try:
            return self.entries[(ix, iy)]
        except KeyError:
            raise MissingEntryError(f"no manifest entry at ({ix}, {iy})") from None

    def in_grid(self, ix, iy):
        return 0 <= ix < self.grid_nx and 0 <= iy < self.grid_ny

    def split_coords(self, split):
        return sorted((c for c, e in self.entries.items() if e.split == split), key=lambda c: (c[1], c[0]))

    def annotated_rows(self):
        """Rows ``iy`` whose every grid cell is present and annotated."""
        counts = np.zeros(self.grid_ny, dtype=np.int64)
        for (ix, iy), e in self.entries.items():
            if e.annotated and e.label_path is not None:
                counts[iy] += 1
        return [iy for iy in range(self.grid_ny) if counts[iy] == self.grid_nx]

    def copy(self):
        return dataclasses.replace(
            self, entries={c: dataclasses.replace(e) for c, e in self.entries.items()}
        )


def _resolve(base: Path, text: str) -> Path:
    p = Path(text)
    return p if p.is_absolute() else Path(os.path.normpath(base / p))


def load_manifest(path) -> MosaicManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError("manifest file not found", path)
    base = path.parent.resolve()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 6 or parts[0] != MAGIC:
            raise ManifestError(f"bad header {header.strip()!r}", path, 1)
        if parts[1] != VERSION:
            raise ManifestError(f"unsupported manifest version {parts[1]!r}", path, 1)
        try:
            nx, ny, ppx = int(parts[2]), int(parts[3]), int(parts[4])
            pnm = float(parts[5])
        except ValueError:
            raise ManifestError(f"bad header {header.strip()!r}", path, 1) from None
        try:
            manifest = MosaicManifest(nx, ny, ppx, pnm)
        except ManifestError as exc:
            raise ManifestError(str(exc), path, 1) from None
        entries = manifest.entries
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 6:
                raise ManifestError(f"expected 6 tab-separated fields, got {len(fields)}", path, lineno)
            sx, sy, img, lbl, split, ann = fields
            try:
                ix, iy = int(sx), int(sy)
            except ValueError:
                raise ManifestError(f"non-integer coordinate ({sx!r}, {sy!r})", path, lineno) from None
            if not (0 <= ix < nx and 0 <= iy < ny):
                raise ManifestError(f"coordinate ({ix}, {iy}) outside {nx}x{ny} grid", path, lineno)
            if (ix, iy) in entries:
                raise ManifestError(f"duplicate coordinate ({ix}, {iy})", path, lineno)
            if split not in SPLITS:
                raise ManifestError(f"unknown split tag {split!r}", path, lineno)
            if ann not in ("0", "1"):
                raise ManifestError(f"annotated flag must be 0 or 1, got {ann!r}", path, lineno)
            if not img:
                raise ManifestError("empty image path", path, lineno)
            entries[(ix, iy)] = PatchEntry(
                image_path=_resolve(base, img),
                label_path=None if lbl == "-" else _resolve(base, lbl),
                split=split,
                annotated=ann == "1",
            )
    return manifest


def _rel(p: Path, base: Path) -> str:
    try:
        return os.path.relpath(p, base)
    except ValueError:
        return str(p)


def atomic_write_text(path, text):
    """Write via a temp file in the same directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_manifest(manifest: MosaicManifest, path):
    path = Path(path)
    base = path.parent.resolve()
    lines = [f"{MAGIC} {VERSION} {manifest.grid_nx} {manifest.grid_ny} {manifest.patch_px} {manifest.pixel_nm!r}"]
    for (ix, iy) in sorted(manifest.entries, key=lambda c: (c[1], c[0])):
        e = manifest.entries[(ix, iy)]
        lbl = "-" if e.label_path is None else _rel(Path(e.label_path), base)
        lines.append(
            f"{ix}\t{iy}\t{_rel(Path(e.image_path), base)}\t{lbl}\t{e.split}\t{int(bool(e.annotated))}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def _read_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise DataError(f"{path}: expected 8-bit single-channel image, got mode {im.mode}")
            # palette images keep their raw indices
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def _write_gray(arr, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.stem}.", suffix=path.suffix, dir=path.parent)
    os.close(fd)
    try:
        Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8), mode="L").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_patch(image, path):
    _write_gray(image, path)


def write_label(mask, path):
    validate_class_mask(mask, source=str(path))
    _write_gray(mask, path)


def read_image_file(path, patch_px=None):
    img = _read_gray(path)
    if patch_px is not None and img.shape != (patch_px, patch_px):
        raise PatchShapeError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, expected {patch_px}x{patch_px}")
    return img


def read_label_file(path, patch_px=None):
    mask = read_image_file(path, patch_px)
    validate_class_mask(mask, source=str(path))
    return mask


def read_patch(manifest: MosaicManifest, ix, iy) -> np.ndarray:
    e = manifest.entry(ix, iy)
    return read_image_file(e.image_path, manifest.patch_px)


def read_label(manifest: MosaicManifest, ix, iy) -> np.ndarray:
    e = manifest.entry(ix, iy)
    if not e.annotated or e.label_path is None:
        raise NoLabelError(f"patch ({ix}, {iy}) has no label")
    return read_label_file(e.label_path, manifest.patch_px)


def validate_class_mask(mask, source=None):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"class mask must be 2-D, got shape {mask.shape}")
    bad = np.setdiff1d(np.unique(mask), CLASS_IDS)
    if bad.size:
        raise InvalidClassError(bad, source)
    return mask


def downsample_labels(mask, factor, backend=None) -> np.ndarray:
    """Majority-vote downsampling of a class mask.

    Each output pixel takes the most frequent class of its ``factor x factor``
    source block; ties go to the higher class id so thin sheaths survive.
    """
    factor = int(factor)
    mask = np.asarray(mask)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask {w}x{h} is not divisible by factor {factor}")
    if factor == 1:
        return mask.astype(np.uint8, copy=True)
    return kernels.majority_downsample(mask, factor, backend=backend)


def _check_range(r, ny, name):
    start, stop = int(r[0]), int(r[1])
    if not (0 <= start <= stop <= ny):
        raise ValueError(f"{name} range [{start}, {stop}) outside [0, {ny})")
    return start, stop


def assign_splits(manifest, genu_range, body_range, splenium_range) -> MosaicManifest:
    """Tag rows in the genu/body/splenium y-ranges as train/val/test.

    Ranges are half-open ``(start, stop)`` row intervals; rows outside all of
    them become ``unassigned``. Returns a new manifest.
    """
    named = [
        ("train", _check_range(genu_range, manifest.grid_ny, "genu")),
        ("val", _check_range(body_range, manifest.grid_ny, "body")),
        ("test", _check_range(splenium_range, manifest.grid_ny, "splenium")),
    ]
    for i in range(3):
        for j in range(i + 1, 3):
            (a0, a1), (b0, b1) = named[i][1], named[j][1]
            if max(a0, b0) < min(a1, b1):
                raise ValueError(f"{named[i][0]} range [{a0}, {a1}) overlaps {named[j][0]} range [{b0}, {b1})")
    for split, (a, b) in named:
        if a == b:
            warnings.warn(f"{split} split is empty", stacklevel=2)
    row_split = ["unassigned"] * manifest.grid_ny
    for split, (a, b) in named:
        for iy in range(a, b):
            row_split[iy] = split
    out = manifest.copy()
    for (ix, iy), e in out.entries.items():
        e.split = row_split[iy]
    return out


def load_roi(path, grid_shape) -> np.ndarray:
    """Read a ROI image at metric-grid resolution; nonzero pixels are inside.

    ``grid_shape`` is ``(gx, gy)``; the returned boolean array has shape ``(gy, gx)``.
    """
    gx, gy = grid_shape
    roi = _read_gray(path) != 0
    if roi.shape != (gy, gx):
        raise DataError(f"ROI {path} is {roi.shape[1]}x{roi.shape[0]}, metric grid is {gx}x{gy}")
    return roi


def save_roi(roi, path):
    _write_gray(np.where(np.asarray(roi, dtype=bool), 255, 0), path)
