# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Semantics must match ``callosum._fallback`` exactly."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def majority_downsample(const cnp.uint8_t[:, ::1] mask, int factor):
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1]
    cdef Py_ssize_t oh = h // factor, ow = w // factor
    cdef Py_ssize_t oy, ox, y, x
    cdef int c0, c1, c2
    cdef cnp.uint8_t v
    out = np.empty((oh, ow), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] o = out
    for oy in range(oh):
        for ox in range(ow):
            c0 = 0
            c1 = 0
            c2 = 0
            for y in range(oy * factor, (oy + 1) * factor):
                for x in range(ox * factor, (ox + 1) * factor):
                    v = mask[y, x]
                    if v == 0:
                        c0 += 1
                    elif v == 1:
                        c1 += 1
                    else:
                        c2 += 1
            # ties resolve toward the higher class id
            if c2 >= c1 and c2 >= c0:
                o[oy, ox] = 2
            elif c1 >= c0:
                o[oy, ox] = 1
            else:
                o[oy, ox] = 0
    return out


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t i) nogil:
    cdef Py_ssize_t root = i, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


cdef inline void _union(Py_ssize_t[::1] parent, Py_ssize_t a, Py_ssize_t b) nogil:
    a = _find(parent, a)
    b = _find(parent, b)
    if a < b:
        parent[b] = a
    elif b < a:
        parent[a] = b


def label8(const cnp.uint8_t[:, ::1] mask, int class_id):
    """8-connected labelling; labels numbered by first raster-order pixel."""
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1]
    cdef Py_ssize_t y, x, i, r
    cdef cnp.uint8_t c = <cnp.uint8_t>class_id
    parent_arr = np.arange(h * w, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_arr
    labels_arr = np.zeros((h, w), dtype=np.int32)
    cdef cnp.int32_t[:, ::1] labels = labels_arr

    for y in range(h):
        for x in range(w):
            if mask[y, x] != c:
                continue
            i = y * w + x
            if x > 0 and mask[y, x - 1] == c:
                _union(parent, i, i - 1)
            if y > 0:
                if mask[y - 1, x] == c:
                    _union(parent, i, i - w)
                if x > 0 and mask[y - 1, x - 1] == c:
                    _union(parent, i, i - w - 1)
                if x + 1 < w and mask[y - 1, x + 1] == c:
                    _union(parent, i, i - w + 1)

    # roots are the minimal flat index of each component, so a root is always
    # visited before any other member in raster order
    root_label_arr = np.zeros(h * w, dtype=np.int32)
    cdef cnp.int32_t[::1] root_label = root_label_arr
    cdef cnp.int32_t n = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x] != c:
                continue
            i = y * w + x
            r = _find(parent, i)
            if r == i:
                n += 1
                root_label[i] = n
            labels[y, x] = root_label[r]

    areas_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] areas = areas_arr
    for y in range(h):
        for x in range(w):
            if labels[y, x] > 0:
                areas[labels[y, x] - 1] += 1
    return labels_arr, areas_arr


def blend_accumulate(double[:, :, ::1] out, const float[:, :, ::1] tile,
                     const double[:, ::1] weights, Py_ssize_t y0, Py_ssize_t x0):
    cdef Py_ssize_t nc = tile.shape[0], th = tile.shape[1], tw = tile.shape[2]
    cdef Py_ssize_t c, y, x
    cdef double wv
    for c in range(nc):
        for y in range(th):
            for x in range(tw):
                wv = weights[y, x]
                if wv != 0.0:
                    out[c, y0 + y, x0 + x] += wv * tile[c, y, x]
