import logging

import numpy as np

from config import CLOUD_RMSE_THRESHOLD
from ..models.cloud import RigidTransform, GeometryError
from ..models.experiment import ErrorTriple, RmseConvention
from .geometry import CloudLike, as_points, apply_transform
from .spatial import SpatialIndex

logger = logging.getLogger(__name__)


class NoCorrespondenceError(GeometryError, ArithmeticError):
    """Raised when every scanned point lies beyond the cloud RMSE threshold."""
    pass


def transform_rmse(Y: CloudLike, T_gt: RigidTransform, T_est: RigidTransform,
                   convention: RmseConvention = RmseConvention.MEAN_THEN_SQRT) -> float:
    """
    Point-wise discrepancy between the ground-truth and estimated placements of
    the model. `mean_then_sqrt` is the conventional RMSE; `paper_literal`
    divides the root of the sum by M instead.
    """
    y = as_points(Y)
    if y.shape[0] == 0:
        raise GeometryError("RMSE needs a non-empty model cloud.")
    gap = apply_transform(y, T_gt).points - apply_transform(y, T_est).points
    total = float(np.sum(gap ** 2))
    if RmseConvention(convention) is RmseConvention.PAPER_LITERAL:
        return float(np.sqrt(total) / y.shape[0])
    return float(np.sqrt(total / y.shape[0]))


def rotation_error(R_gt: np.ndarray, R_est: np.ndarray) -> float:
    """Frobenius norm of R_gt - R_est."""
    return float(np.linalg.norm(np.asarray(R_gt) - np.asarray(R_est), ord="fro"))


def translation_error(t_gt: np.ndarray, t_est: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(t_gt, dtype=np.float64) - np.asarray(t_est, dtype=np.float64)))


def error_triple(Y: CloudLike, T_gt: RigidTransform, T_est: RigidTransform,
                 convention: RmseConvention = RmseConvention.MEAN_THEN_SQRT) -> ErrorTriple:
    return ErrorTriple(
        rmse=transform_rmse(Y, T_gt, T_est, convention),
        rot_error=rotation_error(T_gt.rotation, T_est.rotation),
        trans_error=translation_error(T_gt.translation, T_est.translation),
    )


def cloud_rmse(scanned: CloudLike, model: CloudLike, threshold: float = CLOUD_RMSE_THRESHOLD) -> float:
    """
    RMSE of scanned-to-model nearest distances, ignoring distances above
    `threshold` (mm).
    """
    if not threshold > 0:
        raise GeometryError(f"Threshold must be positive, got {threshold}.")
    scanned_points = as_points(scanned)
    if scanned_points.shape[0] == 0:
        raise GeometryError("Cloud RMSE needs a non-empty scanned cloud.")
    _, distances = SpatialIndex(model).nearest_many(scanned_points)
    kept = distances[distances <= threshold]
    if kept.size == 0:
        raise NoCorrespondenceError(f"No scanned point lies within {threshold} mm of the model.")
    logger.debug(f"Cloud RMSE kept {kept.size}/{distances.size} correspondences within {threshold} mm.")
    return float(np.sqrt(np.mean(kept ** 2)))
