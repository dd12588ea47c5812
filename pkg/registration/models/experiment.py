import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

from config import (
    SYNTH_ANGLE_RANGE_DEG, SYNTH_TRANS_RANGE, SYNTH_NOISE_SIGMA, SYNTH_OUTLIER_RATIO,
    SWEEP_TRIALS, SWEEP_WORKERS, SWEEP_BASE_SEED, SWEEP_N_POINTS, RMSE_CONVENTION,
)
from .mixture import RegistrationConfig, IcpConfig, InvalidConfigError


class Method(str, Enum):
    LCGMM = "lcgmm"
    ICP = "icp"


class SweepMode(str, Enum):
    LAMBDA = "lambda"
    OUTLIERS = "outliers"
    NOISE = "noise"


class RmseConvention(str, Enum):
    MEAN_THEN_SQRT = "mean_then_sqrt"
    PAPER_LITERAL = "paper_literal"


@dataclass
class CorruptionSpec:
    """How a scanned cloud is derived from the model: sampling, misalignment, noise, outliers."""
    n_points: int
    noise_sigma: float = SYNTH_NOISE_SIGMA  # mm
    outlier_ratio: float = SYNTH_OUTLIER_RATIO
    angle_range_deg: float = SYNTH_ANGLE_RANGE_DEG  # per axis, symmetric
    trans_range: float = SYNTH_TRANS_RANGE  # mm, per axis, symmetric
    seed: int = 0
    # Optional density loss: keep only thin_keep of the sampled points whose
    # model-frame coordinate on thin_axis lies in [thin_lower, thin_upper].
    thin_axis: Optional[int] = None
    thin_lower: float = 0.0
    thin_upper: float = 0.0
    thin_keep: float = 1.0

    def validate(self):
        if self.n_points < 1:
            raise InvalidConfigError(f"n_points must be >= 1, got {self.n_points}.")
        if self.noise_sigma < 0:
            raise InvalidConfigError(f"noise_sigma cannot be negative, got {self.noise_sigma}.")
        if not 0.0 <= self.outlier_ratio < 1.0:
            raise InvalidConfigError(f"outlier_ratio must lie in [0, 1), got {self.outlier_ratio}.")
        if self.angle_range_deg < 0 or self.trans_range < 0:
            raise InvalidConfigError("Misalignment ranges cannot be negative.")
        if self.thin_axis is not None:
            if self.thin_axis not in (0, 1, 2):
                raise InvalidConfigError(f"thin_axis must be 0, 1 or 2, got {self.thin_axis}.")
            if self.thin_lower > self.thin_upper:
                raise InvalidConfigError(f"Thinning slab is empty: [{self.thin_lower}, {self.thin_upper}].")
            if not 0.0 <= self.thin_keep <= 1.0:
                raise InvalidConfigError(f"thin_keep must lie in [0, 1], got {self.thin_keep}.")


@dataclass(frozen=True)
class ErrorTriple:
    """RMSE (mm), rotation Frobenius error and translation error (mm)."""
    rmse: float
    rot_error: float
    trans_error: float


RESULT_FIELDS: Tuple[str, ...] = (
    "trial_id", "method", "lambda", "outlier_ratio", "noise_sigma", "n_points", "k_neighbors",
    "omega", "rmse", "rot_error", "trans_error", "iterations", "wall_seconds", "rmse_convention",
    "status",
)
FAILED_SENTINEL = -1.0


@dataclass
class ResultRow:
    """One registration outcome of a sweep or a single `register` call."""
    trial_id: str
    method: Method
    lam: float
    outlier_ratio: float
    noise_sigma: float
    n_points: int
    k_neighbors: int
    omega: float
    rmse: float
    rot_error: float
    trans_error: float
    iterations: int
    wall_seconds: float
    rmse_convention: RmseConvention = RmseConvention.MEAN_THEN_SQRT
    status: str = "ok"

    def validate(self):
        if not isinstance(self.method, Method):
            self.method = Method(self.method)
        numeric = (self.lam, self.outlier_ratio, self.noise_sigma, self.omega, self.rmse,
                   self.rot_error, self.trans_error, self.wall_seconds)
        if not all(math.isfinite(value) for value in numeric):
            raise InvalidConfigError(f"Result row '{self.trial_id}' has non-finite numeric fields.")

    def to_record(self) -> Dict[str, str]:
        """Serializes the row with 17 significant digits so rereads are exact."""
        return {
            "trial_id": self.trial_id,
            "method": Method(self.method).value,
            "lambda": repr(float(self.lam)),
            "outlier_ratio": repr(float(self.outlier_ratio)),
            "noise_sigma": repr(float(self.noise_sigma)),
            "n_points": str(int(self.n_points)),
            "k_neighbors": str(int(self.k_neighbors)),
            "omega": repr(float(self.omega)),
            "rmse": f"{self.rmse:.17g}",
            "rot_error": f"{self.rot_error:.17g}",
            "trans_error": f"{self.trans_error:.17g}",
            "iterations": str(int(self.iterations)),
            "wall_seconds": f"{self.wall_seconds:.6f}",
            "rmse_convention": RmseConvention(self.rmse_convention).value,
            "status": self.status,
        }

    @classmethod
    def from_record(cls, record: Dict[str, str]) -> "ResultRow":
        return cls(
            trial_id=record["trial_id"],
            method=Method(record["method"]),
            lam=float(record["lambda"]),
            outlier_ratio=float(record["outlier_ratio"]),
            noise_sigma=float(record["noise_sigma"]),
            n_points=int(record["n_points"]),
            k_neighbors=int(record["k_neighbors"]),
            omega=float(record["omega"]),
            rmse=float(record["rmse"]),
            rot_error=float(record["rot_error"]),
            trans_error=float(record["trans_error"]),
            iterations=int(record["iterations"]),
            wall_seconds=float(record["wall_seconds"]),
            rmse_convention=RmseConvention(record["rmse_convention"]),
            status=record.get("status", "ok"),
        )


@dataclass
class SweepSpec:
    """One of the three simulation experiments: a grid of cells, trials per cell and methods to compare."""
    mode: SweepMode
    grid: List[float]
    output_path: str
    trials_per_cell: int = SWEEP_TRIALS
    n_points: List[int] = field(default_factory=lambda: list(SWEEP_N_POINTS))
    base: CorruptionSpec = field(default_factory=lambda: CorruptionSpec(n_points=SWEEP_N_POINTS[0]))
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    methods: List[Method] = field(default_factory=lambda: [Method.LCGMM, Method.ICP])
    base_seed: int = SWEEP_BASE_SEED
    workers: int = SWEEP_WORKERS
    model_path: Optional[str] = None
    model_points: Optional[int] = None
    rmse_convention: RmseConvention = RmseConvention(RMSE_CONVENTION)
    record_timing: bool = True

    def validate(self):
        """Validate sweep structure and the embedded configurations."""
        self.mode = SweepMode(self.mode)
        self.methods = [Method(m) for m in self.methods]
        if not self.grid:
            raise InvalidConfigError("Sweep grid must contain at least one value.")
        if not self.n_points:
            raise InvalidConfigError("Sweep needs at least one n_points value.")
        if self.trials_per_cell < 1:
            raise InvalidConfigError(f"trials_per_cell must be >= 1, got {self.trials_per_cell}.")
        if not self.methods:
            raise InvalidConfigError("Sweep needs at least one method.")
        if self.workers < 1:
            raise InvalidConfigError(f"workers must be >= 1, got {self.workers}.")
        self.base.validate()
        self.registration.validate()
        self.icp.validate()
