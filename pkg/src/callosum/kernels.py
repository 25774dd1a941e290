"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise, or when
``CALLOSUM_PURE_PYTHON=1`` is set, the numpy/scipy fallback is used. Both
backends return identical results.
"""

import os

import numpy as np

from . import _fallback

try:
    if os.environ.get("CALLOSUM_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def _impl(backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    if backend == "python":
        return _fallback
    raise ValueError(f"unknown backend {backend!r}")


def majority_downsample(mask, factor, backend=None):
    """Block-wise majority vote over ``factor x factor`` blocks (ties -> higher id)."""
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    return _impl(backend).majority_downsample(mask, int(factor))


def label8(mask, class_id, backend=None):
    """Return ``(labels, areas)`` for 8-connected components of ``class_id``.

    Labels run 1..n in order of each component's first pixel in raster order;
    ``areas[k]`` is the pixel count of label ``k + 1``.
    """
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    return _impl(backend).label8(mask, int(class_id))


def blend_accumulate(out, tile, weights, y0, x0, backend=None):
    """``out[:, y0:y0+h, x0:x0+w] += weights * tile`` in place (float64 accumulator)."""
    tile = np.ascontiguousarray(tile, dtype=np.float32)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    _impl(backend).blend_accumulate(out, tile, weights, int(y0), int(x0))
