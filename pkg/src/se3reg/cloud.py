from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .liegroup import RigidMotion


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An (n, 3) array of points with optional (n, 3) normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=float).reshape(-1, 3)
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points in shape")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return self.points.shape[0]

    def transformed(self, m: RigidMotion) -> PointCloud:
        normals = None if self.normals is None else self.normals @ m.rotation.T
        return PointCloud(m.apply(self.points), normals)

    def select(self, idx) -> PointCloud:
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals)
