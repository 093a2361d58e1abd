# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pairwise geometry kernels.

Loop-based equivalents of graphmot._kernels_py; the per-frame association
step calls these on every frame, which makes them the hottest code in the
tracker. Keep both implementations in sync.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU between (N, 4) and (M, 4) arrays of (x, y, w, h) boxes."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = np.ascontiguousarray(
        boxes_a, dtype=np.float64).reshape(-1, 4)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] b = np.ascontiguousarray(
        boxes_b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, m), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double ax1, ay1, ax2, ay2, area_a
    cdef double ix, iy, inter, union

    for i in range(n):
        ax1 = a[i, 0]
        ay1 = a[i, 1]
        ax2 = a[i, 0] + a[i, 2]
        ay2 = a[i, 1] + a[i, 3]
        area_a = a[i, 2] * a[i, 3]
        for j in range(m):
            ix = min(ax2, b[j, 0] + b[j, 2]) - max(ax1, b[j, 0])
            if ix <= 0.0:
                continue
            iy = min(ay2, b[j, 1] + b[j, 3]) - max(ay1, b[j, 1])
            if iy <= 0.0:
                continue
            inter = ix * iy
            union = area_a + b[j, 2] * b[j, 3] - inter
            if union > 0.0:
                # min() guards against x+w rounding pushing past 1
                out[i, j] = min(1.0, inter / union)
    return out


def center_dist_matrix(boxes_a, boxes_b):
    """Pairwise Euclidean distance between box centers."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = np.ascontiguousarray(
        boxes_a, dtype=np.float64).reshape(-1, 4)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] b = np.ascontiguousarray(
        boxes_b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, m), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double acx, acy, dx, dy

    for i in range(n):
        acx = a[i, 0] + 0.5 * a[i, 2]
        acy = a[i, 1] + 0.5 * a[i, 3]
        for j in range(m):
            dx = acx - (b[j, 0] + 0.5 * b[j, 2])
            dy = acy - (b[j, 1] + 0.5 * b[j, 3])
            out[i, j] = sqrt(dx * dx + dy * dy)
    return out


def feature_dist_matrix(feats_a, feats_b):
    """Pairwise Euclidean distance between feature rows of (N, d) and (M, d)."""
    a_arr = np.ascontiguousarray(feats_a, dtype=np.float64)
    b_arr = np.ascontiguousarray(feats_b, dtype=np.float64)
    if a_arr.ndim != 2 or b_arr.ndim != 2 or a_arr.shape[1] != b_arr.shape[1]:
        raise ValueError(f"feature shapes incompatible: {a_arr.shape} vs {b_arr.shape}")
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = a_arr
    cdef cnp.ndarray[cnp.float64_t, ndim=2] b = b_arr
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, m), dtype=np.float64)
    cdef Py_ssize_t i, j, k
    cdef double acc, diff

    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                acc += diff * diff
            out[i, j] = sqrt(acc)
    return out
