"""Point clouds, similarity transforms, pinhole cameras, and the two
distance metrics (Chamfer, F-score) used throughout the toolkit.

All coordinates are in meters in a right-handed world frame. Metric
reporting converts to millimeters at the reporting boundary (see
``losses.evaluate``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

_ORTHO_TOL = 1e-9


class BehindCameraError(ValueError):
    """A point with non-positive depth was projected or unprojected."""


def _as_points(array) -> np.ndarray:
    pts = np.asarray(array, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("point coordinates must be finite")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Ordered collection of 3D points with an optional integer label per point."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", _as_points(self.points))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (len(self.points),):
                raise ValueError("labels must be one integer per point")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("empty cloud has no centroid")
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class SimilarityTransform:
    """Rotation + translation + uniform scale acting as p -> s*R*p + t."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if tra.shape != (3,):
            raise ValueError("translation must be a 3-vector")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=_ORTHO_TOL, rtol=0.0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant must be +1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)
        object.__setattr__(self, "scale", float(self.scale))

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(np.eye(3), np.zeros(3), 1.0)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """self after other: (self ∘ other)(p) = self(other(p))."""
        return SimilarityTransform(
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
            self.scale * other.scale,
        )

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix with the scale folded into the linear part."""
        mat = np.eye(4)
        mat[:3, :3] = self.scale * self.rotation
        mat[:3, 3] = self.translation
        return mat

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "SimilarityTransform":
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        linear = mat[:3, :3]
        scale = float(np.cbrt(np.linalg.det(linear)))
        if not scale > 0:
            raise ValueError("linear part must have positive determinant")
        return SimilarityTransform(linear / scale, mat[:3, 3], scale)


def apply(transform: SimilarityTransform, cloud: PointCloud) -> PointCloud:
    """Map every point through the similarity transform, preserving order."""
    return PointCloud(transform.transform_points(cloud.points), cloud.labels)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


def project(camera: CameraIntrinsics, point) -> tuple[float, float]:
    """Pinhole projection of a single 3D point to pixel coordinates."""
    x, y, z = np.asarray(point, dtype=np.float64)
    if not z > 0:
        raise BehindCameraError(f"cannot project point with depth {z}")
    return camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy


def project_points(camera: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """Vectorized projection; returns an (N, 2) array of (u, v)."""
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    if np.any(z <= 0):
        raise BehindCameraError("cannot project points with non-positive depth")
    uv = np.empty((points.shape[0], 2))
    uv[:, 0] = camera.fx * points[:, 0] / z + camera.cx
    uv[:, 1] = camera.fy * points[:, 1] / z + camera.cy
    return uv


def unproject(camera: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray:
    """Lift pixel coordinates plus metric depth back to a 3D point."""
    if not depth > 0:
        raise BehindCameraError(f"cannot unproject non-positive depth {depth}")
    return np.array([
        (u - camera.cx) * depth / camera.fx,
        (v - camera.cy) * depth / camera.fy,
        depth,
    ])


class SpatialIndex:
    """Immutable nearest-neighbor structure over a point cloud.

    Queries return exactly the brute-force result, with ties broken to the
    lowest point index. Backed by the compiled batch kernel (see
    ``kernels``), which is the hot loop of ICP and the Chamfer metric.
    """

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise ValueError("cannot index an empty cloud")
        self._points = np.ascontiguousarray(cloud.points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def nearest(self, query) -> tuple[int, float]:
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (3,) or not np.isfinite(query).all():
            raise ValueError("query must be a finite 3-vector")
        idx, d2 = kernels.nn_batch(self._points, np.ascontiguousarray(query[np.newaxis]))
        return int(idx[0]), float(d2[0])

    def nearest_batch(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[1] != 3:
            raise ValueError("queries must be (Q, 3)")
        if not np.isfinite(queries).all():
            raise ValueError("queries must be finite")
        return kernels.nn_batch(self._points, queries)


def build_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def chamfer(p: PointCloud, q: PointCloud) -> float:
    """Symmetric Chamfer distance: mean squared nearest-neighbor distance
    in both directions, summed. Units are meters² on meter-scaled clouds."""
    if len(p) == 0 or len(q) == 0:
        raise ValueError("chamfer requires non-empty clouds")
    _, d2_pq = kernels.nn_batch(
        np.ascontiguousarray(q.points), np.ascontiguousarray(p.points))
    _, d2_qp = kernels.nn_batch(
        np.ascontiguousarray(p.points), np.ascontiguousarray(q.points))
    return float(d2_pq.mean() + d2_qp.mean())


def f_score(p: PointCloud, q: PointCloud, tau: float) -> float:
    """Harmonic mean of precision/recall of point coverage at threshold tau."""
    if len(p) == 0 or len(q) == 0:
        raise ValueError("f_score requires non-empty clouds")
    if not tau > 0:
        raise ValueError("tau must be positive")
    tau2 = tau * tau
    _, d2_pq = kernels.nn_batch(
        np.ascontiguousarray(q.points), np.ascontiguousarray(p.points))
    _, d2_qp = kernels.nn_batch(
        np.ascontiguousarray(p.points), np.ascontiguousarray(q.points))
    precision = float(np.mean(d2_pq <= tau2))
    recall = float(np.mean(d2_qp <= tau2))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)
