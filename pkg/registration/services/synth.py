"""
Synthetic scanned clouds for the simulation experiments.

Every generator is a pure function of its inputs and an integer seed. Random
numbers come from numpy's PCG64 bit generator, and derived seeds go through
numpy's SeedSequence, so trials replay identically on every platform.
"""
import logging
from dataclasses import replace
from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from config import BOUNDING_PADDING, MODEL_POINTS
from ..models.cloud import PointCloud, RigidTransform, InvalidPointCloudError
from ..models.experiment import CorruptionSpec
from ..models.mixture import InvalidConfigError
from .geometry import CloudLike, as_points, apply_transform, padded_bounds

logger = logging.getLogger(__name__)

# Blade geometry (mm)
BLADE_SPAN = 150.0
BLADE_ROOT_CHORD = 60.0
BLADE_TIP_CHORD = 40.0
BLADE_TWIST_DEG = 30.0
BLADE_CAMBER = 0.04
BLADE_CAMBER_POSITION = 0.4
BLADE_THICKNESS = 0.12

# Model-frame slabs (axis, lower, upper) for the thinned-region experiments
BLADE_REGIONS = {
    "leading_edge": (0, -20.0, -6.0),
    "low_curvature": (0, 3.0, 15.0),
    "trailing_edge": (0, 24.0, 50.0),
}


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(*keys: int) -> int:
    """Mixes integer keys into one 63-bit seed; adding keys never changes other combinations."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def subsample(cloud: CloudLike, n: int, seed: int) -> PointCloud:
    """Uniform sample of `n` points without replacement, kept in original order."""
    points = as_points(cloud)
    if n < 1 or n > points.shape[0]:
        raise InvalidPointCloudError(f"Cannot sample {n} points from a cloud of {points.shape[0]}.")
    chosen = np.sort(make_rng(seed).choice(points.shape[0], size=n, replace=False))
    return PointCloud(points[chosen])


def euler_zyx(angles_deg: np.ndarray) -> np.ndarray:
    """R = Rz(gamma) Ry(beta) Rx(alpha) for angles (alpha, beta, gamma) about x, y, z in degrees."""
    alpha, beta, gamma = np.asarray(angles_deg, dtype=np.float64)
    return Rotation.from_euler("ZYX", [gamma, beta, alpha], degrees=True).as_matrix()


def random_rigid(spec: CorruptionSpec) -> RigidTransform:
    """Per-axis angles uniform in +-angle_range_deg, translation uniform in +-trans_range."""
    rng = make_rng(spec.seed)
    angles = rng.uniform(-spec.angle_range_deg, spec.angle_range_deg, size=3)
    translation = rng.uniform(-spec.trans_range, spec.trans_range, size=3)
    return RigidTransform(euler_zyx(angles), translation)


def add_gaussian_noise(cloud: CloudLike, sigma: float, seed: int) -> PointCloud:
    """Independent zero-mean isotropic displacement with std `sigma` mm per coordinate."""
    if sigma < 0:
        raise InvalidPointCloudError(f"Noise sigma cannot be negative, got {sigma}.")
    points = as_points(cloud)
    if sigma == 0:
        return PointCloud(points)
    return PointCloud(points + make_rng(seed).normal(0.0, sigma, size=points.shape))


def outlier_count(n: int, ratio: float) -> int:
    return int(np.floor(ratio * n + 0.5))


def add_outliers(cloud: CloudLike, ratio: float, seed: int, padding: float = BOUNDING_PADDING) -> PointCloud:
    """Appends round(ratio * n) points uniform in the padded bounding box; originals stay first."""
    if not 0.0 <= ratio < 1.0:
        raise InvalidPointCloudError(f"Outlier ratio must lie in [0, 1), got {ratio}.")
    points = as_points(cloud)
    count = outlier_count(points.shape[0], ratio)
    if count == 0:
        return PointCloud(points)
    lower, upper = padded_bounds(points, padding)
    extra = make_rng(seed).uniform(lower, upper, size=(count, 3))
    return PointCloud(np.vstack([points, extra]))


def blade_model(n_points: int = MODEL_POINTS, seed: int = 0) -> PointCloud:
    """
    Blade-like model surface: a cambered NACA-style airfoil whose chord tapers
    and twists along a 150 mm span, sampled at `n_points` random surface points.
    """
    if n_points < 1:
        raise InvalidPointCloudError(f"n_points must be >= 1, got {n_points}.")
    rng = make_rng(seed)
    span = rng.uniform(0.0, 1.0, n_points)
    chord_pos = 0.5 * (1.0 - np.cos(np.pi * rng.uniform(0.0, 1.0, n_points)))
    side = np.where(rng.uniform(0.0, 1.0, n_points) < 0.5, 1.0, -1.0)

    x = chord_pos
    thickness = 5.0 * BLADE_THICKNESS * (0.2969 * np.sqrt(x) - 0.1260 * x - 0.3516 * x ** 2
                                         + 0.2843 * x ** 3 - 0.1036 * x ** 4)
    m, p = BLADE_CAMBER, BLADE_CAMBER_POSITION
    camber = np.where(x < p, m / p ** 2 * (2 * p * x - x ** 2),
                      m / (1 - p) ** 2 * ((1 - 2 * p) + 2 * p * x - x ** 2))
    profile_x = x - 0.25
    profile_y = camber + side * thickness

    chord = BLADE_ROOT_CHORD + (BLADE_TIP_CHORD - BLADE_ROOT_CHORD) * span
    twist = np.radians(BLADE_TWIST_DEG) * span
    cos_t, sin_t = np.cos(twist), np.sin(twist)
    px, py = chord * profile_x, chord * profile_y
    points = np.column_stack([cos_t * px - sin_t * py, sin_t * px + cos_t * py, BLADE_SPAN * span])
    return PointCloud(points)


def thin_region(cloud: CloudLike, axis: int, lower: float, upper: float, keep_fraction: float, seed: int) -> PointCloud:
    """Drops points inside the slab lower <= coord[axis] <= upper, keeping `keep_fraction` of them."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise InvalidPointCloudError(f"keep_fraction must lie in [0, 1], got {keep_fraction}.")
    points = as_points(cloud)
    inside = (points[:, axis] >= lower) & (points[:, axis] <= upper)
    keep = ~inside | (make_rng(seed).uniform(0.0, 1.0, points.shape[0]) < keep_fraction)
    logger.debug(f"Thinned {int(np.sum(~keep))} of {int(np.sum(inside))} points in slab [{lower}, {upper}] on axis {axis}.")
    return PointCloud(points[keep])


def with_thinned_region(spec: CorruptionSpec, region: str, keep_fraction: float) -> CorruptionSpec:
    """Returns `spec` thinning one of the named BLADE_REGIONS."""
    if region not in BLADE_REGIONS:
        raise InvalidConfigError(f"Unknown thinning region '{region}'; expected one of {sorted(BLADE_REGIONS)}.")
    axis, lower, upper = BLADE_REGIONS[region]
    return replace(spec, thin_axis=axis, thin_lower=lower, thin_upper=upper, thin_keep=keep_fraction)


def make_scanned(model: CloudLike, spec: CorruptionSpec) -> Tuple[PointCloud, RigidTransform]:
    """
    Builds one simulated scan: subsample the model, optionally thin one slab,
    move it by a random rigid transform, add noise, then append outliers.
    Returns the scan and the ground-truth transform mapping the model into the
    scanned frame. The outlier count is relative to the thinned sample.
    """
    spec.validate()
    sample_seed, motion_seed, noise_seed, outlier_seed, thin_seed = (derive_seed(spec.seed, k) for k in range(5))
    sample = subsample(model, spec.n_points, sample_seed)
    if spec.thin_axis is not None:
        sample = thin_region(sample, spec.thin_axis, spec.thin_lower, spec.thin_upper, spec.thin_keep, thin_seed)
    ground_truth = random_rigid(replace(spec, seed=motion_seed))
    noisy = add_gaussian_noise(apply_transform(sample, ground_truth), spec.noise_sigma, noise_seed)
    scanned = add_outliers(noisy, spec.outlier_ratio, outlier_seed)
    return scanned, ground_truth
