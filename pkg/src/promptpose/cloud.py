"""Core point-cloud types, rigid transforms and neighbor queries."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError

ORTHO_TOL = 1e-9
UNIT_NORM_TOL = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Similarity transform ``q = scale * R @ p + t`` (scale is 1 for a rigid pose)."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        s = float(self.scale)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t)) and np.isfinite(s)):
            raise ValidationError("transform contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
            raise ValidationError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValidationError("rotation determinant is not +1")
        if s <= 0:
            raise ValidationError(f"scale must be positive, got {s}")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, R, t, scale=1.0, project=False) -> "RigidTransform":
        """Build a transform, optionally snapping ``R`` onto SO(3) first.

        Projection is meant for rotations read back from text files, where
        rounding breaks orthonormality at the 1e-9 level.
        """
        if project:
            R = project_to_so3(np.asarray(R, dtype=float))
        return cls(R, t, scale)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        inv_s = 1.0 / self.scale
        return RigidTransform(Rt, -inv_s * Rt @ self.translation, inv_s)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        R = self.rotation @ other.rotation
        t = self.scale * self.rotation @ other.translation + self.translation
        return RigidTransform(project_to_so3(R), t, self.scale * other.scale)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation
        T[:3, 3] = self.translation
        return T


def project_to_so3(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


@dataclass(frozen=True, eq=False)
class EmbeddedCloud:
    """Point cloud with optional per-point color, language embedding, label and relevancy.

    ``points`` is (N, 3) in meters, ``colors`` (N, 3) in [0, 1], ``embeddings``
    (N, D) with unit rows, ``labels`` (N,) integer instance ids (-1 for clutter),
    ``relevancy`` (N,) scalar scores as stored in PLY files.
    """

    points: np.ndarray
    colors: Optional[np.ndarray] = None
    embeddings: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    relevancy: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValidationError("points contain NaN or Inf")
        n = len(pts)
        object.__setattr__(self, "points", _frozen(pts))

        if self.colors is not None:
            c = np.array(self.colors, dtype=float).reshape(-1, 3)
            self._check_len("colors", len(c), n)
            if c.size and (not np.all(np.isfinite(c)) or c.min() < 0 or c.max() > 1):
                raise ValidationError("color channels must lie in [0, 1]")
            object.__setattr__(self, "colors", _frozen(c))

        if self.embeddings is not None:
            e = np.array(self.embeddings, dtype=float)
            if e.ndim != 2:
                raise ValidationError("embeddings must be a 2-D matrix")
            self._check_len("embeddings", len(e), n)
            if len(e):
                norms = np.linalg.norm(e, axis=1)
                bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
                if bad.size:
                    raise ValidationError(f"embedding row {bad[0]} is not unit norm")
            object.__setattr__(self, "embeddings", _frozen(e))

        if self.labels is not None:
            lab = np.array(self.labels).reshape(-1)
            if lab.size and not np.issubdtype(lab.dtype, np.integer):
                if not np.all(lab == np.round(lab)):
                    raise ValidationError("labels must be integers")
            lab = lab.astype(np.int64)
            self._check_len("labels", len(lab), n)
            object.__setattr__(self, "labels", _frozen(lab))

        if self.relevancy is not None:
            r = np.array(self.relevancy, dtype=float).reshape(-1)
            self._check_len("relevancy", len(r), n)
            object.__setattr__(self, "relevancy", _frozen(r))

    @staticmethod
    def _check_len(name, got, n):
        if got != n:
            raise ValidationError(f"{name} has {got} entries but the cloud has {n} points")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def embedding_dim(self) -> Optional[int]:
        return None if self.embeddings is None else self.embeddings.shape[1]

    def replace(self, **changes) -> "EmbeddedCloud":
        return dataclasses.replace(self, **changes)

    def subset(self, indices) -> "EmbeddedCloud":
        idx = np.asarray(indices, dtype=np.int64)

        def take(a):
            return None if a is None else a[idx]

        return EmbeddedCloud(
            self.points[idx],
            take(self.colors),
            take(self.embeddings),
            take(self.labels),
            take(self.relevancy),
        )

    @cached_property
    def tree(self) -> cKDTree:
        if len(self.points) == 0:
            raise ValidationError("cannot index an empty cloud")
        return cKDTree(self.points)


def apply_transform(cloud: EmbeddedCloud, t: RigidTransform) -> EmbeddedCloud:
    if not isinstance(t, RigidTransform):
        raise ValidationError("expected a RigidTransform")
    return cloud.replace(points=t.apply(cloud.points))


def knn_query(cloud: EmbeddedCloud, q, k: int) -> list[tuple[int, float]]:
    """Exact k nearest neighbors of ``q``, ascending by distance then index."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    n = len(cloud)
    if n == 0:
        raise ValidationError("knn_query on an empty cloud")
    q = np.asarray(q, dtype=float).reshape(3)
    k = min(k, n)
    d, _ = cloud.tree.query(q, k=k)
    kth = float(np.atleast_1d(d)[-1])
    # widen the ball so every point tied with the k-th distance is a candidate
    cand = np.asarray(cloud.tree.query_ball_point(q, kth * (1 + 1e-9) + 1e-12), dtype=np.int64)
    dist = np.sqrt(((cloud.points[cand] - q) ** 2).sum(axis=1))
    order = np.lexsort((cand, dist))[:k]
    return [(int(cand[i]), float(dist[i])) for i in order]


def knn_indices(cloud: EmbeddedCloud, k: int) -> np.ndarray:
    """(N, k) neighbor indices of every point, self included."""
    _, idx = cloud.tree.query(cloud.points, k=k)
    return np.asarray(idx).reshape(len(cloud), k)


def estimate_normals(cloud: EmbeddedCloud, k: int, viewpoint=(0.0, 0.0, 0.0)):
    """PCA normals over the k nearest neighbors (self included).

    Returns ``(normals, valid)``. Normals are oriented toward ``viewpoint``;
    rows whose neighborhood covariance has rank < 2 are NaN with
    ``valid[i] == False``.
    """
    n = len(cloud)
    if k < 3:
        raise ValidationError("normal estimation needs k >= 3")
    if n < k:
        raise ValidationError(f"cloud has {n} points, fewer than k={k}")
    idx = knn_indices(cloud, k)
    nb = cloud.points[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0].copy()
    scale = np.maximum(w[:, 2], 1e-300)
    valid = (w[:, 1] > 1e-10 * scale) & (w[:, 2] > 0)

    to_view = np.asarray(viewpoint, dtype=float).reshape(-1, 3) - cloud.points
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[~valid] = np.nan
    return normals, valid


def centroid(points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=float).mean(axis=0)
