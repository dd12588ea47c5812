from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import sparse

ORTHONORMAL_TOL = 1e-9


def _frozen_array(values, shape: Tuple[int, ...], dtype=np.float64) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    if shape is not None:
        array = array.reshape(shape)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points in millimeters; row i is the point with index i."""
    points: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.points, dtype=np.float64)
        if raw.size == 0:
            raw = raw.reshape(0, 3)
        if raw.ndim != 2 or raw.shape[1] != 3:
            raise InvalidPointCloudError(f"Point cloud must have shape (n, 3), got {raw.shape}.")
        if not np.all(np.isfinite(raw)):
            bad_rows = np.flatnonzero(~np.all(np.isfinite(raw), axis=1))
            raise InvalidPointCloudError(f"Point cloud contains non-finite coordinates at indices {bad_rows[:5].tolist()}.")
        object.__setattr__(self, "points", _frozen_array(raw, (-1, 3)))

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, index: int) -> np.ndarray:
        return self.points[index]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def diameter(self) -> float:
        """Diagonal of the axis-aligned bounding box, a cheap upper bound on the true diameter."""
        if self.size == 0:
            return 0.0
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


@dataclass(frozen=True)
class RigidTransform:
    """A proper rigid motion phi(y) = R y + t."""
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise InvalidTransformError(f"Expected a 3x3 rotation and a 3-vector, got {rotation.shape} and {translation.shape}.")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise InvalidTransformError("Transform contains non-finite values.")
        orthonormality = np.linalg.norm(rotation.T @ rotation - np.eye(3))
        if orthonormality > ORTHONORMAL_TOL:
            raise InvalidTransformError(f"Rotation is not orthonormal (|RtR - I|_F = {orthonormality:.3e}).")
        determinant = np.linalg.det(rotation)
        if abs(determinant - 1.0) > ORTHONORMAL_TOL:
            raise InvalidTransformError(f"Rotation determinant is {determinant:.12f}, expected +1.")
        object.__setattr__(self, "rotation", _frozen_array(rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen_array(translation, (3,)))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        """Builds a transform from a homogeneous 4x4 matrix [R t; 0 0 0 1]."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise InvalidTransformError(f"Homogeneous matrix must be 4x4, got {matrix.shape}.")
        return cls(matrix[:3, :3], matrix[:3, 3])

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Returns self o other, i.e. applies `other` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def change_from(self, other: "RigidTransform") -> float:
        """Rotation Frobenius delta plus translation norm delta."""
        return float(np.linalg.norm(self.rotation - other.rotation) + np.linalg.norm(self.translation - other.translation))


@dataclass(frozen=True)
class NeighborGraph:
    """Symmetric binary adjacency over scanned-cloud indices, stored as unordered edges (i < j)."""
    n: int
    edges: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.intp).reshape(-1, 2)
        if edges.size:
            if np.any(edges[:, 0] == edges[:, 1]):
                raise GeometryError("Neighbor graph cannot contain self-loops.")
            if edges.min() < 0 or edges.max() >= self.n:
                raise GeometryError(f"Edge index out of range for a graph of {self.n} vertices.")
            edges = np.unique(np.sort(edges, axis=1), axis=0)
        object.__setattr__(self, "edges", _frozen_array(edges, (-1, 2), dtype=np.intp))

    @classmethod
    def empty(cls, n: int) -> "NeighborGraph":
        return cls(n, np.empty((0, 2), dtype=np.intp))

    @property
    def edge_count(self) -> int:
        return self.edges.shape[0]

    def ordered_edges(self) -> Tuple[np.ndarray, np.ndarray]:
        """Both orientations of every edge, matching the double sum over (i, j) with w_ij = 1."""
        heads = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        tails = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return heads, tails

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.n)

    def adjacency(self) -> sparse.csr_matrix:
        heads, tails = self.ordered_edges()
        weights = np.ones(heads.shape[0])
        return sparse.csr_matrix((weights, (heads, tails)), shape=(self.n, self.n))

    def has_edge(self, i: int, j: int) -> bool:
        a, b = min(i, j), max(i, j)
        return bool(np.any((self.edges[:, 0] == a) & (self.edges[:, 1] == b)))


@dataclass(frozen=True)
class Alignment:
    """Result of a weighted Procrustes fit; `rank_deficient` flags a degenerate cross-covariance."""
    transform: RigidTransform
    rank_deficient: bool = False
    singular_values: Optional[np.ndarray] = None


class GeometryError(Exception):
    """Base exception for geometry errors."""
    pass

class InvalidPointCloudError(GeometryError, ValueError):
    """Raised when point data is malformed or non-finite."""
    pass

class InvalidTransformError(GeometryError, ValueError):
    """Raised when a rotation/translation violates the rigid-transform invariants."""
    pass

class ZeroWeightError(GeometryError, ArithmeticError):
    """Raised when a weighted mean or fit receives weights that sum to zero."""
    pass
