"""Non-differentiable geometric kernels.

Everything here works on plain ``(N, 3)`` float arrays. Functions never
mutate their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

PLANES = {"xy": 2, "yz": 0, "xz": 1}


@dataclass
class PointCloud:
    """A point set with optional bookkeeping labels."""

    points: np.ndarray
    category: Optional[str] = None
    frame_id: Optional[int] = None

    def __post_init__(self):
        self.points = as_points(self.points)

    def __len__(self):
        return len(self.points)


def as_points(cloud, allow_empty=False) -> np.ndarray:
    """Validate and return ``cloud`` as an ``(N, 3)`` float array."""
    if isinstance(cloud, PointCloud):
        cloud = cloud.points
    pts = np.asarray(cloud)
    if pts.dtype.kind not in "fiu":
        raise ValueError(f"expected numeric points, got dtype {pts.dtype}")
    if pts.dtype.kind != "f":
        pts = pts.astype(np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array, got shape {pts.shape}")
    if len(pts) == 0 and not allow_empty:
        raise ValueError("point cloud is empty")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


def fps_indices(cloud, k: int, start: int = 0) -> np.ndarray:
    """Farthest point sampling; returns selected indices in selection order.

    Each new point maximizes its squared distance to the already selected
    set. Ties go to the lowest index. Already-selected points are never
    picked twice, even when the cloud has duplicates.
    """
    pts = as_points(cloud)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start
    min_d = np.sum((pts - pts[start]) ** 2, axis=1)
    min_d[start] = -np.inf
    for i in range(1, k):
        j = int(np.argmax(min_d))
        selected[i] = j
        d = np.sum((pts - pts[j]) ** 2, axis=1)
        np.minimum(min_d, d, out=min_d)
        min_d[j] = -np.inf
    return selected


def fps(cloud, k: int, start: int = 0) -> np.ndarray:
    pts = as_points(cloud)
    return pts[fps_indices(pts, k, start)]


def mirror(cloud, plane: str = "xy") -> np.ndarray:
    """Reflect through a coordinate plane (negates the axis normal to it)."""
    try:
        axis = PLANES[plane.lower()]
    except KeyError:
        raise ValueError(f"unknown symmetry plane {plane!r}; expected one of {sorted(PLANES)}") from None
    out = np.array(as_points(cloud, allow_empty=True), copy=True)
    out[:, axis] = -out[:, axis]
    return out


def grid2d(rows: int, cols: int, extent: float = 0.05) -> np.ndarray:
    """``rows * cols`` 2D points spanning ``[-extent, extent]^2``, row-major.

    A dimension of size 1 collapses to the center coordinate 0.
    """
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be >= 1")
    if not extent > 0:
        raise ValueError("extent must be positive")

    def axis(n):
        return np.zeros(1) if n == 1 else np.linspace(-extent, extent, n)

    u, v = np.meshgrid(axis(rows), axis(cols), indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1)


class NNIndex:
    """Exact nearest-neighbor index over a fixed cloud.

    Candidate search goes through a k-d tree; the reported squared distance
    is recomputed directly from coordinates so it carries no sqrt round-off.
    Read-only after construction.
    """

    def __init__(self, cloud):
        self.points = np.array(as_points(cloud), dtype=np.float64, copy=True)
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest indices and squared distances for each row of ``queries``."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        _, idx = self._tree.query(q, k=1)
        idx = np.asarray(idx, dtype=np.int64)
        d2 = np.sum((q - self.points[idx]) ** 2, axis=1)
        return idx, d2


def nearest(index: NNIndex, p) -> tuple[np.ndarray, float]:
    """Exact nearest point of ``index`` to ``p`` and its squared distance."""
    idx, d2 = index.query(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return index.points[idx[0]].copy(), float(d2[0])


def synthesis_pool(partial, coarse, plane: Optional[str] = "xy") -> np.ndarray:
    """Stack ``partial``, its mirror image, and ``coarse`` (in that order)."""
    partial = as_points(partial)
    coarse = as_points(coarse)
    parts = [partial]
    if plane is not None:
        parts.append(mirror(partial, plane))
    parts.append(coarse)
    return np.concatenate(parts, axis=0)


def synthesize(partial, coarse, target_n: int, plane: Optional[str] = "xy") -> np.ndarray:
    """Merge input, mirrored input and coarse prediction, then FPS to ``target_n``."""
    if target_n < 1:
        raise ValueError("target_n must be >= 1")
    pool = synthesis_pool(partial, coarse, plane)
    return pool[fps_indices(pool, target_n)]
