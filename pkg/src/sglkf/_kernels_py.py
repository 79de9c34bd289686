"""Pure-Python/numpy versions of the hot kernels.

These mirror ``_kernels.pyx`` one to one and are used whenever the compiled
extension is unavailable (or ``SGLKF_PURE_PYTHON=1`` is set).
"""
import math

import numpy as np


def iou_matrix_2d(a, b):
    """Pairwise IoU of center-size boxes ``[x, y, w, h]``.

    Args:
        a: (n, 4) array.
        b: (m, 4) array.

    Returns:
        (n, m) float64 array with entries in [0, 1].
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    a_lo = a[:, None, :2] - a[:, None, 2:] / 2
    a_hi = a[:, None, :2] + a[:, None, 2:] / 2
    b_lo = b[None, :, :2] - b[None, :, 2:] / 2
    b_hi = b[None, :, :2] + b[None, :, 2:] / 2
    side = np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0, None)
    inter = side[..., 0] * side[..., 1]
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.minimum(inter / union, 1.0)


def iou_matrix_3d(a, b):
    """Pairwise axis-aligned IoU of boxes ``[x, y, z, w, h, l]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 6)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 6)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    a_lo = a[:, None, :3] - a[:, None, 3:] / 2
    a_hi = a[:, None, :3] + a[:, None, 3:] / 2
    b_lo = b[None, :, :3] - b[None, :, 3:] / 2
    b_hi = b[None, :, :3] + b[None, :, 3:] / 2
    side = np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0, None)
    inter = side[..., 0] * side[..., 1] * side[..., 2]
    vol_a = a[:, 3] * a[:, 4] * a[:, 5]
    vol_b = b[:, 3] * b[:, 4] * b[:, 5]
    return np.minimum(inter / (vol_a[:, None] + vol_b[None, :] - inter), 1.0)


def _lsa_wide(cost):
    # Shortest augmenting path with row/column potentials; requires n <= m.
    n, m = len(cost), len(cost[0])
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = cost[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    rows = np.empty(n, dtype=np.int64)
    cols = np.empty(n, dtype=np.int64)
    k = 0
    for j in range(1, m + 1):
        if p[j]:
            rows[k] = p[j] - 1
            cols[k] = j - 1
            k += 1
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order]


def linear_sum_assignment(cost):
    """Minimum-cost assignment of ``min(n, m)`` pairs.

    Args:
        cost: (n, m) finite cost matrix.

    Returns:
        ``(rows, cols)`` int64 arrays sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be 2-D")
    n, m = cost.shape
    if n == 0 or m == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy()
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    if n <= m:
        return _lsa_wide(cost.tolist())
    cols, rows = _lsa_wide(cost.T.tolist())
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order]
