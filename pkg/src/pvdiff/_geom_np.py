"""Pure numpy geometry kernels (fallback when the C extension is absent).

Both backends must be bit-identical: distances are squared Euclidean in
float64, accumulated as dx*dx + dy*dy + dz*dz in that order, and all ties
resolve to the lowest index.
"""

from __future__ import annotations

import numpy as np


def sqdist_to(pts: np.ndarray, ref: np.ndarray) -> np.ndarray:
    dx = pts[:, 0] - ref[0]
    dy = pts[:, 1] - ref[1]
    dz = pts[:, 2] - ref[2]
    return dx * dx + dy * dy + dz * dz


def fps_indices(pts: np.ndarray, m: int, start: int) -> np.ndarray:
    """Greedy farthest-point selection from a fixed start index."""
    sel = np.empty(m, dtype=np.int64)
    sel[0] = start
    if m == 1:
        return sel
    best = sqdist_to(pts, pts[start])
    for i in range(1, m):
        nxt = int(np.argmax(best))  # argmax takes the first max, lowest index wins
        sel[i] = nxt
        np.minimum(best, sqdist_to(pts, pts[nxt]), out=best)
    return sel


def knn_indices(pts: np.ndarray, center_idx: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points to each center, (distance, index) order."""
    m = len(center_idx)
    out = np.empty((m, k), dtype=np.int64)
    for row, ci in enumerate(center_idx):
        d = sqdist_to(pts, pts[ci])
        order = np.argsort(d, kind="stable")  # stable: equal distances keep index order
        out[row] = order[:k]
    return out
