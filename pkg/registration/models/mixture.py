from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional

import numpy as np

from config import (
    DEFAULT_LAMBDA, DEFAULT_OMEGA, DEFAULT_KNN_K, DEFAULT_MAX_ITERATIONS, DEFAULT_CONVERGENCE_TOL,
    DEFAULT_POSTERIOR_TRUNCATION, DEFAULT_SEED, BOUNDING_PADDING,
    ICP_MAX_ITERATIONS, ICP_CONVERGENCE_TOL, ICP_TRIM_FRACTION,
)
from .cloud import RigidTransform

POSTERIOR_ROW_TOL = 1e-12


@dataclass
class RegistrationConfig:
    """Configuration for one LCGMM registration run."""
    lam: float = DEFAULT_LAMBDA  # weight of the local-consistency term
    outlier_weight: float = DEFAULT_OMEGA
    knn_k: int = DEFAULT_KNN_K
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    convergence_tol: float = DEFAULT_CONVERGENCE_TOL  # mm, transform change
    variance_floor: Optional[float] = None  # mm^2; None -> scale * diameter(X)^2
    posterior_truncation: float = DEFAULT_POSTERIOR_TRUNCATION
    bounding_padding: float = BOUNDING_PADDING
    seed: int = DEFAULT_SEED

    def validate(self):
        """Validate configuration values."""
        if not np.isfinite(self.lam) or self.lam < 0:
            raise InvalidConfigError(f"lambda must be a finite value >= 0, got {self.lam}.")
        if not 0.0 <= self.outlier_weight <= 1.0:
            raise InvalidConfigError(f"Outlier weight must lie in [0, 1], got {self.outlier_weight}.")
        if self.knn_k < 1:
            raise InvalidConfigError(f"knn_k must be >= 1, got {self.knn_k}.")
        if self.max_iterations < 1:
            raise InvalidConfigError(f"max_iterations must be >= 1, got {self.max_iterations}.")
        if self.convergence_tol < 0:
            raise InvalidConfigError("convergence_tol cannot be negative.")
        if self.variance_floor is not None and not self.variance_floor > 0:
            raise InvalidConfigError(f"variance_floor must be > 0, got {self.variance_floor}.")
        if not 0.0 <= self.posterior_truncation < 1.0:
            raise InvalidConfigError(f"posterior_truncation must lie in [0, 1), got {self.posterior_truncation}.")
        if self.bounding_padding < 0:
            raise InvalidConfigError("bounding_padding cannot be negative.")


@dataclass
class IcpConfig:
    """Configuration for the point-to-point ICP baseline."""
    max_iterations: int = ICP_MAX_ITERATIONS
    convergence_tol: float = ICP_CONVERGENCE_TOL  # mm, change of RMS residual
    trim_fraction: float = ICP_TRIM_FRACTION
    align_centroids: bool = True

    def validate(self):
        if self.max_iterations < 1:
            raise InvalidConfigError(f"max_iterations must be >= 1, got {self.max_iterations}.")
        if not 0.0 <= self.trim_fraction < 1.0:
            raise InvalidConfigError(f"trim_fraction must lie in [0, 1), got {self.trim_fraction}.")
        if self.convergence_tol < 0:
            raise InvalidConfigError("convergence_tol cannot be negative.")


@dataclass(frozen=True)
class MixtureState:
    """GMM parameters besides the transform: per-component variances, outlier weight and volume."""
    variances: np.ndarray
    outlier_weight: float
    volume: float
    variance_floor: float

    def __post_init__(self):
        variances = np.array(self.variances, dtype=np.float64).reshape(-1)
        if variances.size == 0:
            raise InvalidConfigError("A mixture needs at least one Gaussian component.")
        if not self.variance_floor > 0:
            raise InvalidConfigError("variance_floor must be > 0.")
        if np.any(variances < self.variance_floor):
            raise InvalidConfigError("Every component variance must be >= variance_floor.")
        if not 0.0 <= self.outlier_weight <= 1.0:
            raise InvalidConfigError(f"Outlier weight must lie in [0, 1], got {self.outlier_weight}.")
        if not self.volume > 0:
            raise InvalidConfigError(f"Outlier volume must be positive, got {self.volume}.")
        variances.setflags(write=False)
        object.__setattr__(self, "variances", variances)

    @property
    def n_components(self) -> int:
        return self.variances.shape[0]

    @property
    def component_prior(self) -> float:
        """pi_m = (1 - omega) / M, identical for every Gaussian component."""
        return (1.0 - self.outlier_weight) / self.n_components

    def with_variances(self, variances: np.ndarray) -> "MixtureState":
        return replace(self, variances=variances)


@dataclass(frozen=True)
class PosteriorMatrix:
    """N x (M+1) responsibilities; the last column belongs to the uniform outlier component."""
    responsibilities: np.ndarray
    log_evidence: Optional[np.ndarray] = None  # log p(x_n; theta) per row, when known

    def __post_init__(self):
        resp = np.asarray(self.responsibilities, dtype=np.float64)
        if resp.ndim != 2 or resp.shape[1] < 2:
            raise InvalidConfigError(f"Posterior matrix must be N x (M+1) with M >= 1, got {resp.shape}.")
        if np.any(resp < -POSTERIOR_ROW_TOL) or np.any(resp > 1.0 + POSTERIOR_ROW_TOL):
            raise InvalidConfigError("Posterior responsibilities must lie in [0, 1].")
        worst = float(np.max(np.abs(resp.sum(axis=1) - 1.0))) if resp.shape[0] else 0.0
        if not worst <= POSTERIOR_ROW_TOL:
            raise InvalidConfigError(f"Posterior rows must sum to one, worst row is off by {worst:.3g}.")
        object.__setattr__(self, "responsibilities", resp)

    @property
    def components(self) -> np.ndarray:
        """N x M block of Gaussian responsibilities."""
        return self.responsibilities[:, :-1]

    @property
    def outliers(self) -> np.ndarray:
        return self.responsibilities[:, -1]

    @property
    def shape(self):
        return self.responsibilities.shape


class ConvergedBy(str, Enum):
    MAX_ITERATIONS = "max_iterations"
    TRANSFORM_TOLERANCE = "transform_tolerance"


@dataclass
class RegistrationReport:
    """Outcome of a registration run (LCGMM or ICP)."""
    transform: RigidTransform
    iterations_run: int
    objective_trace: List[float]
    final_variances: np.ndarray
    converged_by: ConvergedBy
    wall_time: float
    method: str = "lcgmm"
    gmm_trace: List[float] = field(default_factory=list)
    consistency_trace: List[float] = field(default_factory=list)
    likelihood_trace: List[float] = field(default_factory=list)
    degenerate_iterations: List[int] = field(default_factory=list)

    def summary(self) -> str:
        final_objective = self.objective_trace[-1] if self.objective_trace else float("nan")
        return (f"{self.method}: {self.iterations_run} iterations ({self.converged_by.value}), "
                f"objective {final_objective:.6g}, wall time {self.wall_time:.3f} s")


class RegistrationError(Exception):
    """Base exception for registration errors."""
    pass

class InvalidConfigError(RegistrationError, ValueError):
    """Raised when a configuration or input violates its invariants."""
    pass

class NumericalFailure(RegistrationError, ArithmeticError):
    """Raised when the iteration cannot continue for numerical reasons."""
    pass

class PosteriorCollapseError(NumericalFailure):
    """Raised when all responsibility mass falls on the outlier column."""

    def __init__(self, outlier_weight: float, iteration: int):
        self.outlier_weight = outlier_weight
        self.iteration = iteration
        super().__init__(
            f"Posterior collapse at iteration {iteration}: all responsibility lies on the outlier "
            f"component (omega = {outlier_weight:g})."
        )

class DegenerateGeometryError(NumericalFailure):
    """Raised when the rotation cross-covariance vanishes."""

    def __init__(self, iteration: int, detail: str = "cross-covariance H is numerically zero"):
        self.iteration = iteration
        super().__init__(f"Degenerate rotation update at iteration {iteration}: {detail}.")

class CorrespondenceError(NumericalFailure):
    """Raised when ICP is left with too few correspondences to fit a transform."""
    pass
