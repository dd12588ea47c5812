import logging
import time
from typing import Optional

import numpy as np

from ..models.cloud import RigidTransform
from ..models.mixture import (
    IcpConfig, RegistrationReport, ConvergedBy, InvalidConfigError, CorrespondenceError,
)
from .geometry import CloudLike, as_points, apply_transform, centroid, kabsch
from .spatial import SpatialIndex

logger = logging.getLogger(__name__)

MIN_PAIRS = 3


def _trim(residuals: np.ndarray, trim_fraction: float) -> np.ndarray:
    """Indices of the pairs kept after dropping the worst `trim_fraction` residuals (stable order)."""
    n = residuals.shape[0]
    keep = n - int(np.floor(trim_fraction * n))
    if keep >= n:
        return np.arange(n)
    return np.sort(np.argsort(residuals, kind="stable")[:keep])


def icp(X: CloudLike, Y: CloudLike, cfg: Optional[IcpConfig] = None) -> RegistrationReport:
    """
    Point-to-point ICP. Every transformed model point is matched to its
    nearest scanned point, optionally the worst residuals are trimmed, and a
    Kabsch fit on the surviving pairs gives the next transform. The objective
    trace holds the mean squared residual of each iteration's correspondences.
    """
    cfg = cfg or IcpConfig()
    cfg.validate()
    x = as_points(X)
    y = as_points(Y)
    if x.shape[0] < MIN_PAIRS or y.shape[0] < MIN_PAIRS:
        raise InvalidConfigError(f"ICP needs at least {MIN_PAIRS} points per cloud, got N = {x.shape[0]}, M = {y.shape[0]}.")

    started = time.perf_counter()
    index = SpatialIndex(x)
    if cfg.align_centroids:
        transform = RigidTransform(np.eye(3), centroid(x) - centroid(y))
    else:
        transform = RigidTransform.identity()

    trace, degenerate_iterations = [], []
    converged_by = ConvergedBy.MAX_ITERATIONS
    iteration = 0

    for iteration in range(1, cfg.max_iterations + 1):
        moved = apply_transform(y, transform).points
        matches, distances = index.nearest_many(moved)
        kept = _trim(distances, cfg.trim_fraction)
        if kept.shape[0] < MIN_PAIRS:
            raise CorrespondenceError(f"Iteration {iteration}: only {kept.shape[0]} correspondences survive trimming.")

        before = float(np.mean(distances[kept] ** 2))
        trace.append(before)

        alignment = kabsch(y[kept], x[matches[kept]])
        if alignment.rank_deficient:
            degenerate_iterations.append(iteration)
        transform = alignment.transform

        after_residuals = apply_transform(y[kept], transform).points - x[matches[kept]]
        after = float(np.mean(np.sum(after_residuals ** 2, axis=1)))
        logger.debug(f"ICP iteration {iteration}: mean squared residual {before:.6g} -> {after:.6g}")

        if iteration >= cfg.max_iterations:
            break
        if abs(np.sqrt(before) - np.sqrt(after)) < cfg.convergence_tol:
            converged_by = ConvergedBy.TRANSFORM_TOLERANCE
            break

    report = RegistrationReport(
        transform=transform,
        iterations_run=iteration,
        objective_trace=trace,
        final_variances=np.empty(0),
        converged_by=converged_by,
        wall_time=time.perf_counter() - started,
        method="icp",
        degenerate_iterations=degenerate_iterations,
    )
    logger.info(report.summary())
    return report
