import logging
from typing import Optional, Tuple, Union

import numpy as np

from config import BOUNDING_PADDING, MIN_EXTENT
from ..models.cloud import (
    PointCloud, RigidTransform, Alignment, InvalidPointCloudError, ZeroWeightError,
)

logger = logging.getLogger(__name__)

CloudLike = Union[PointCloud, np.ndarray]

# Singular values below this fraction of the largest one count as zero
RANK_TOL = 1e-12


def as_points(cloud: CloudLike) -> np.ndarray:
    """Returns the (n, 3) coordinate array of a cloud, validating raw arrays on the way."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    return PointCloud(cloud).points


def apply_transform(cloud: CloudLike, transform: RigidTransform) -> PointCloud:
    """Maps every point through phi(y) = R y + t, keeping length and order."""
    points = as_points(cloud)
    return PointCloud(points @ transform.rotation.T + transform.translation)


def invert(transform: RigidTransform) -> RigidTransform:
    rotation_t = transform.rotation.T
    return RigidTransform(rotation_t, -rotation_t @ transform.translation)


def _check_weights(weights: Optional[np.ndarray], n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != n:
        raise InvalidPointCloudError(f"Expected {n} weights, got {weights.shape[0]}.")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise InvalidPointCloudError("Weights must be finite and nonnegative.")
    return weights


def centroid(cloud: CloudLike, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Weighted mean of the points; unit weights when none are given."""
    points = as_points(cloud)
    if points.shape[0] == 0:
        raise InvalidPointCloudError("Cannot take the centroid of an empty cloud.")
    weights = _check_weights(weights, points.shape[0])
    total = weights.sum()
    if not total > 0:
        raise ZeroWeightError("Centroid weights sum to zero.")
    return weights @ points / total


def project_to_rotation(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest proper rotation (Frobenius sense) to `matrix` via SVD, with the
    determinant correction that excludes reflections. Returns the rotation and
    the singular values of `matrix`.
    """
    u, s, vt = np.linalg.svd(matrix)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt, s


def rotation_from_cross_covariance(h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Solves argmax_R Tr(R H) over proper rotations.

    With H = U S V^T the maximizer is R = V diag(1, 1, det(V U^T)) U^T.
    Returns R and the singular values of H.
    """
    u, s, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T)) or 1.0
    return v @ np.diag([1.0, 1.0, d]) @ u.T, s


def is_rank_deficient(singular_values: np.ndarray) -> bool:
    """True when H has rank < 2, the case where the optimal rotation is not unique."""
    largest = singular_values[0]
    if not largest > 0:
        return True
    return bool(singular_values[1] <= RANK_TOL * largest)


def kabsch(source: CloudLike, target: CloudLike, weights: Optional[np.ndarray] = None) -> Alignment:
    """
    Weighted Procrustes fit: the rigid transform minimizing
    sum_i w_i ||target_i - (R source_i + t)||^2.

    A rank-deficient cross-covariance still yields the SVD rotation (with the
    determinant fixed to +1) but the result is flagged and a warning is logged.
    """
    src = as_points(source)
    dst = as_points(target)
    if src.shape != dst.shape:
        raise InvalidPointCloudError(f"Source and target must pair up point for point, got {src.shape} and {dst.shape}.")
    weights = _check_weights(weights, src.shape[0])
    total = weights.sum()
    if not total > 0:
        raise ZeroWeightError("Kabsch weights sum to zero.")

    mu_src = weights @ src / total
    mu_dst = weights @ dst / total
    h = (src - mu_src).T @ ((dst - mu_dst) * weights[:, None])

    rotation, singular_values = rotation_from_cross_covariance(h)
    rank_deficient = is_rank_deficient(singular_values)
    if rank_deficient:
        logger.warning(f"Kabsch cross-covariance is rank deficient (singular values {singular_values}); rotation is not unique.")

    transform = RigidTransform(rotation, mu_dst - rotation @ mu_src)
    return Alignment(transform=transform, rank_deficient=rank_deficient, singular_values=singular_values)


def padded_bounds(cloud: CloudLike, padding_fraction: float = BOUNDING_PADDING) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounding box grown by `padding_fraction` of each extent on every side."""
    points = as_points(cloud)
    if points.shape[0] == 0:
        raise InvalidPointCloudError("Cannot bound an empty cloud.")
    lower, upper = points.min(axis=0), points.max(axis=0)
    margin = (upper - lower) * padding_fraction
    return lower - margin, upper + margin


def bounding_volume(cloud: CloudLike, padding_fraction: float = BOUNDING_PADDING) -> float:
    """Volume of the padded bounding box; flat axes are floored to MIN_EXTENT mm."""
    lower, upper = padded_bounds(cloud, padding_fraction)
    extents = np.maximum(upper - lower, MIN_EXTENT)
    return float(np.prod(extents))
