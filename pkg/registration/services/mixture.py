"""
Locally consistent Gaussian mixture registration.

The transformed model points phi(y_m) = R y_m + t are the centers of M
isotropic Gaussian components; the scanned points x_n are samples of that
mixture plus a uniform outlier component over the scanned bounding volume.
Neighboring scanned points are pushed towards similar posteriors by a
symmetric-KL penalty weighted by lambda. Every EM step has a closed form.

Shapes used throughout: X is N x 3, Y is M x 3, the posterior matrix is
N x (M+1) with the outlier column last, distance matrices are N x M.
"""
import logging
import math
import time
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from config import VARIANCE_FLOOR_SCALE
from ..models.cloud import PointCloud, RigidTransform, NeighborGraph, Alignment
from ..models.mixture import (
    MixtureState, PosteriorMatrix, RegistrationConfig, RegistrationReport, ConvergedBy,
    InvalidConfigError, PosteriorCollapseError, DegenerateGeometryError,
)
from .geometry import (
    CloudLike, as_points, apply_transform, centroid, bounding_volume,
    rotation_from_cross_covariance, is_rank_deficient,
)
from .spatial import build_knn_graph

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
# H counts as zero when its largest singular value is below this share of its natural scale
DEGENERACY_TOL = 1e-14


# ========== HELPERS ==========

def squared_distances(X: CloudLike, Y: CloudLike, transform: RigidTransform) -> np.ndarray:
    """N x M matrix of ||x_n - phi(y_m)||^2."""
    moved = apply_transform(Y, transform).points
    return cdist(as_points(X), moved, metric="sqeuclidean")


def default_variance_floor(X: CloudLike) -> float:
    """Floor on sigma_m^2: a fixed share of the squared scanned-cloud diameter."""
    diameter = PointCloud(as_points(X)).diameter()
    return max(VARIANCE_FLOOR_SCALE * diameter ** 2, np.finfo(np.float64).tiny)


def _edge_displacements(X: np.ndarray, graph: NeighborGraph) -> np.ndarray:
    """L_i = sum_j w_ij (x_j - x_i), accumulated over both orientations of every edge."""
    heads, tails = graph.ordered_edges()
    displacement = np.zeros_like(X)
    np.add.at(displacement, heads, X[tails] - X[heads])
    return displacement


def _consistency_by_component(P: PosteriorMatrix, graph: NeighborGraph, distances: np.ndarray) -> np.ndarray:
    """
    C_m = sum_i sum_j w_ij (p_mi - p_mj)(d_jm - d_im) for every component m.

    By symmetry of w the double sum equals 2 sum_i p_mi ((A D)_im - deg_i d_im),
    which avoids materializing an edges x M array.
    """
    if graph.edge_count == 0:
        return np.zeros(distances.shape[1])
    components = P.components
    neighbor_sums = graph.adjacency() @ distances
    degrees = graph.degrees()[:, None]
    return 2.0 * np.einsum("nm,nm->m", components, neighbor_sums - degrees * distances)


# ========== INITIALIZATION ==========

def init_state(X: CloudLike, Y: CloudLike, cfg: RegistrationConfig) -> Tuple[MixtureState, RigidTransform]:
    """
    Centroid-aligned identity start. Every sigma_m^2 starts at the mean squared
    cross distance over 3NM after centroid alignment, clamped to the floor.
    """
    x = as_points(X)
    y = as_points(Y)
    n, m = x.shape[0], y.shape[0]
    if n == 0 or m == 0:
        raise InvalidConfigError(f"Registration needs non-empty clouds, got N = {n}, M = {m}.")

    mu_x, mu_y = centroid(x), centroid(y)
    transform = RigidTransform(np.eye(3), mu_x - mu_y)

    # sum_n sum_m ||a_n - b_m||^2 = M sum ||a||^2 + N sum ||b||^2 when both sets are centered
    x_c, y_c = x - mu_x, y - mu_y
    cross_total = m * np.sum(x_c ** 2) + n * np.sum(y_c ** 2)
    floor = cfg.variance_floor if cfg.variance_floor is not None else default_variance_floor(x)
    sigma2 = max(cross_total / (3.0 * n * m), floor)

    state = MixtureState(
        variances=np.full(m, sigma2),
        outlier_weight=cfg.outlier_weight,
        volume=bounding_volume(x, cfg.bounding_padding),
        variance_floor=floor,
    )
    return state, transform


# ========== E-STEP ==========

def e_step(X: CloudLike, Y: CloudLike, T: RigidTransform, state: MixtureState,
           truncation: float = 0.0, distances: Optional[np.ndarray] = None) -> PosteriorMatrix:
    """
    Posterior responsibilities p_nm of every component for every scanned point,
    evaluated in log space with a per-row max shift. The uniform outlier term
    enters as log(omega / V).
    """
    if distances is None:
        distances = squared_distances(X, Y, T)
    variances = state.variances
    omega = state.outlier_weight

    with np.errstate(divide="ignore"):
        log_prior = np.log(state.component_prior)
        log_outlier = np.log(omega) - np.log(state.volume)
    log_gauss = log_prior - 1.5 * (LOG_2PI + np.log(variances)) - distances / (2.0 * variances)
    logits = np.hstack([log_gauss, np.full((log_gauss.shape[0], 1), log_outlier)])

    log_evidence = logsumexp(logits, axis=1)
    resp = np.exp(logits - log_evidence[:, None])
    resp /= resp.sum(axis=1, keepdims=True)

    if truncation > 0.0:
        keep = resp >= truncation
        keep[np.arange(resp.shape[0]), np.argmax(resp, axis=1)] = True
        resp = np.where(keep, resp, 0.0)
        resp /= resp.sum(axis=1, keepdims=True)

    return PosteriorMatrix(resp, log_evidence=log_evidence)


# ========== LOCAL CONSISTENCY ==========

def pairwise_divergence(i: int, j: int, P: PosteriorMatrix, X: CloudLike, Y: CloudLike,
                        T: RigidTransform, state: MixtureState) -> float:
    """
    Closed-form symmetric KL between the posteriors of scanned points i and j:
    D_ij = sum_m (p_mi - p_mj)(||x_j - phi(y_m)||^2 - ||x_i - phi(y_m)||^2) / (4 sigma_m^2).
    The outlier-normalizer terms of the two directed divergences cancel exactly.
    """
    if i == j:
        return 0.0
    x = as_points(X)
    moved = apply_transform(Y, T).points
    d_i = ((moved - x[i]) ** 2).sum(axis=1)
    d_j = ((moved - x[j]) ** 2).sum(axis=1)
    p_i = P.components[i]
    p_j = P.components[j]
    return float(np.sum((p_i - p_j) * (d_j - d_i) / (4.0 * state.variances)))


def local_consistency(P: PosteriorMatrix, graph: NeighborGraph, X: CloudLike, Y: CloudLike,
                      T: RigidTransform, state: MixtureState,
                      distances: Optional[np.ndarray] = None) -> float:
    """Q_LC = sum_i sum_j w_ij D_ij; every unordered neighbor pair counts twice."""
    if graph.n != P.shape[0]:
        raise InvalidConfigError(f"Graph has {graph.n} vertices but the posterior has {P.shape[0]} rows.")
    if graph.edge_count == 0:
        return 0.0
    if distances is None:
        distances = squared_distances(X, Y, T)
    per_component = _consistency_by_component(P, graph, distances)
    return float(np.sum(per_component / (4.0 * state.variances)))


def objective(P: PosteriorMatrix, graph: NeighborGraph, X: CloudLike, Y: CloudLike,
              T: RigidTransform, state: MixtureState, lam: float,
              distances: Optional[np.ndarray] = None) -> Tuple[float, float, float]:
    """
    Regularized EM objective (to be minimized). Returns (Q, Q_GMM, Q_LC) with
    Q_GMM = sum p_nm d_nm / (2 sigma_m^2) + 3/2 sum p_nm log sigma_m^2 over the
    Gaussian columns only; the outlier column is constant in the M-step.
    """
    if distances is None:
        distances = squared_distances(X, Y, T)
    components = P.components
    variances = state.variances
    q_gmm = float(np.sum(components * distances / (2.0 * variances))
                  + 1.5 * np.sum(components.sum(axis=0) * np.log(variances)))
    q_lc = local_consistency(P, graph, X, Y, T, state, distances=distances)
    return q_gmm + lam * q_lc, q_gmm, q_lc


# ========== M-STEP ==========

def weighted_centroids(P: PosteriorMatrix, graph: NeighborGraph, X: CloudLike, Y: CloudLike,
                       state: MixtureState, lam: float, iteration: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Centroids that make the translation update closed-form, t* = mu_x - R mu_y.
    mu_x carries the lambda correction
    (lambda/2) sum_i sum_j w_ij (x_j - x_i) sum_m (p_mi - p_mj) / sigma_m^2.
    """
    x = as_points(X)
    y = as_points(Y)
    scaled = P.components / state.variances
    row_weight = scaled.sum(axis=1)
    total = row_weight.sum()
    if not total > 0:
        raise PosteriorCollapseError(state.outlier_weight, iteration)

    mu_y = scaled.sum(axis=0) @ y / total
    weighted_x = row_weight @ x
    if lam > 0 and graph.edge_count:
        heads, tails = graph.ordered_edges()
        spread = (x[tails] - x[heads]) * (row_weight[heads] - row_weight[tails])[:, None]
        weighted_x = weighted_x + 0.5 * lam * spread.sum(axis=0)
    return weighted_x / total, mu_y


def cross_covariance(P: PosteriorMatrix, graph: NeighborGraph, X: CloudLike, Y: CloudLike,
                     state: MixtureState, lam: float, mu_x: np.ndarray, mu_y: np.ndarray) -> np.ndarray:
    """
    H = H1 + H2 with
    H1 = sum_n sum_m (p_nm / sigma_m^2) y'_m x'_n^T and
    H2 = (lambda/2) sum_i sum_j w_ij sum_m ((p_mi - p_mj) / sigma_m^2) y'_m (x'_j - x'_i)^T.
    """
    x_c = as_points(X) - mu_x
    y_c = as_points(Y) - mu_y
    scaled = P.components / state.variances
    h = y_c.T @ (scaled.T @ x_c)
    if lam > 0 and graph.edge_count:
        # Over both orientations the double sum collapses to 2 sum_i G_i (x) L_i
        displacement = _edge_displacements(x_c, graph)
        h = h + lam * (y_c.T @ (scaled.T @ displacement))
    return h


def update_rotation(P: PosteriorMatrix, graph: NeighborGraph, X: CloudLike, Y: CloudLike,
                    state: MixtureState, lam: float, mu_x: np.ndarray, mu_y: np.ndarray,
                    iteration: int = 0) -> Alignment:
    """
    R* = V diag(1, 1, det(V U^T)) U^T from the SVD H = U S V^T, then
    t* = mu_x - R* mu_y so the translation uses the new rotation.
    """
    h = cross_covariance(P, graph, X, Y, state, lam, mu_x, mu_y)

    if state.n_components == 1:
        logger.warning(f"Iteration {iteration}: a single model point leaves the rotation unobservable; keeping identity.")
        return Alignment(RigidTransform(np.eye(3), mu_x - mu_y), rank_deficient=True,
                         singular_values=np.linalg.svd(h, compute_uv=False))

    x_c = as_points(X) - mu_x
    y_c = as_points(Y) - mu_y
    scale = P.components.sum() * np.sqrt(np.mean(x_c ** 2) * np.mean(y_c ** 2)) / state.variances.min()
    rotation, singular_values = rotation_from_cross_covariance(h)
    if not scale > 0 or singular_values[0] <= DEGENERACY_TOL * scale:
        raise DegenerateGeometryError(iteration)

    rank_deficient = is_rank_deficient(singular_values)
    if rank_deficient:
        logger.warning(f"Iteration {iteration}: cross-covariance has rank < 2, rotation is not unique.")
    return Alignment(RigidTransform(rotation, mu_x - rotation @ mu_y),
                     rank_deficient=rank_deficient, singular_values=singular_values)


def unclamped_variances(P: PosteriorMatrix, graph: NeighborGraph, X: CloudLike, Y: CloudLike,
                        T_new: RigidTransform, lam: float,
                        distances: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Stationary point of Q in every sigma_m^2:
    (sum_n p_nm d_nm + (lambda/2) C_m) / (3 sum_n p_nm), NaN where sum_n p_nm = 0.
    """
    if distances is None:
        distances = squared_distances(X, Y, T_new)
    components = P.components
    mass = components.sum(axis=0)
    numerator = np.einsum("nm,nm->m", components, distances)
    if lam > 0:
        numerator = numerator + 0.5 * lam * _consistency_by_component(P, graph, distances)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(mass > 0, numerator / (3.0 * mass), np.nan)


def update_variances(P: PosteriorMatrix, graph: NeighborGraph, X: CloudLike, Y: CloudLike,
                     T_new: RigidTransform, lam: float, floor: float,
                     previous: Optional[np.ndarray] = None,
                     distances: Optional[np.ndarray] = None) -> np.ndarray:
    """Closed-form variances clamped to `floor`; components with no mass keep `previous`."""
    raw = unclamped_variances(P, graph, X, Y, T_new, lam, distances=distances)
    empty = np.isnan(raw)
    if np.any(empty):
        fallback = previous if previous is not None else np.full(raw.shape, floor)
        raw = np.where(empty, fallback, raw)
    return np.maximum(raw, floor)


# ========== REGISTRATION LOOP ==========

def register(X: CloudLike, Y: CloudLike, cfg: Optional[RegistrationConfig] = None) -> RegistrationReport:
    """
    Runs EM until max_iterations or until the transform change (rotation
    Frobenius delta plus translation delta) drops below convergence_tol.
    Returns the transform mapping Y into the frame of X.
    """
    cfg = cfg or RegistrationConfig()
    cfg.validate()
    x = as_points(X)
    y = as_points(Y)
    if x.shape[0] < 2 or y.shape[0] < 1:
        raise InvalidConfigError(f"Registration needs N >= 2 and M >= 1, got N = {x.shape[0]}, M = {y.shape[0]}.")

    started = time.perf_counter()
    logger.info(f"LCGMM registration: N = {x.shape[0]}, M = {y.shape[0]}, lambda = {cfg.lam}, "
                f"omega = {cfg.outlier_weight}, k = {cfg.knn_k}")

    graph = build_knn_graph(x, cfg.knn_k)  # X never moves, so the graph is built once
    state, transform = init_state(x, y, cfg)

    objective_trace, gmm_trace, consistency_trace, likelihood_trace = [], [], [], []
    degenerate_iterations = []
    converged_by = ConvergedBy.MAX_ITERATIONS
    iteration = 0

    for iteration in range(1, cfg.max_iterations + 1):
        posterior = e_step(x, y, transform, state, truncation=cfg.posterior_truncation)
        likelihood_trace.append(float(-posterior.log_evidence.sum()))

        mu_x, mu_y = weighted_centroids(posterior, graph, x, y, state, cfg.lam, iteration=iteration)
        alignment = update_rotation(posterior, graph, x, y, state, cfg.lam, mu_x, mu_y, iteration=iteration)
        if alignment.rank_deficient:
            degenerate_iterations.append(iteration)
        new_transform = alignment.transform

        distances = squared_distances(x, y, new_transform)
        variances = update_variances(posterior, graph, x, y, new_transform, cfg.lam, state.variance_floor,
                                     previous=state.variances, distances=distances)
        state = state.with_variances(variances)

        q, q_gmm, q_lc = objective(posterior, graph, x, y, new_transform, state, cfg.lam, distances=distances)
        objective_trace.append(q)
        gmm_trace.append(q_gmm)
        consistency_trace.append(q_lc)

        change = new_transform.change_from(transform)
        transform = new_transform
        logger.debug(f"Iteration {iteration}: Q = {q:.10g} (GMM {q_gmm:.10g}, LC {q_lc:.10g}), change = {change:.3e}")

        if iteration >= cfg.max_iterations:
            break
        if change < cfg.convergence_tol:
            converged_by = ConvergedBy.TRANSFORM_TOLERANCE
            break

    wall_time = time.perf_counter() - started
    report = RegistrationReport(
        transform=transform,
        iterations_run=iteration,
        objective_trace=objective_trace,
        final_variances=state.variances.copy(),
        converged_by=converged_by,
        wall_time=wall_time,
        method="lcgmm",
        gmm_trace=gmm_trace,
        consistency_trace=consistency_trace,
        likelihood_trace=likelihood_trace,
        degenerate_iterations=degenerate_iterations,
    )
    logger.info(report.summary())
    return report
