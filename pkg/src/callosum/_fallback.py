"""Pure numpy/scipy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from scipy import ndimage

_EIGHT = np.ones((3, 3), dtype=bool)


def majority_downsample(mask, factor):
    h, w = mask.shape
    blocks = mask.reshape(h // factor, factor, w // factor, factor)
    c0 = (blocks == 0).sum(axis=(1, 3))
    c1 = (blocks == 1).sum(axis=(1, 3))
    c2 = factor * factor - c0 - c1
    # ties resolve toward the higher class id
    out = np.where((c2 >= c1) & (c2 >= c0), 2, np.where(c1 >= c0, 1, 0))
    return out.astype(np.uint8)


def label8(mask, class_id):
    raw, n = ndimage.label(mask == class_id, structure=_EIGHT)
    if n == 0:
        return np.zeros(mask.shape, dtype=np.int32), np.zeros(0, dtype=np.int64)
    # renumber by first raster-order pixel so both backends agree label-for-label
    flat = raw.ravel()
    ids, first = np.unique(flat, return_index=True)
    ids, first = ids[1:], first[1:]
    order = np.argsort(first, kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[ids[order]] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return labels, areas


def blend_accumulate(out, tile, weights, y0, x0):
    th, tw = weights.shape
    out[:, y0:y0 + th, x0:x0 + tw] += weights * tile
