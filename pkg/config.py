import os
from dotenv import load_dotenv

load_dotenv()

# --- Logging ---
LOG_LEVEL = os.getenv("LCGMM_LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("LCGMM_LOG_FILE", "")  # empty -> console only

# --- LCGMM Registration Defaults ---
DEFAULT_LAMBDA = float(os.getenv("LCGMM_LAMBDA", 0.5))
DEFAULT_OMEGA = float(os.getenv("LCGMM_OMEGA", 0.1))
DEFAULT_KNN_K = int(os.getenv("LCGMM_KNN_K", 8))
DEFAULT_MAX_ITERATIONS = int(os.getenv("LCGMM_MAX_ITERATIONS", 100))
DEFAULT_CONVERGENCE_TOL = float(os.getenv("LCGMM_CONVERGENCE_TOL", 1e-7))  # mm
VARIANCE_FLOOR_SCALE = float(os.getenv("LCGMM_VARIANCE_FLOOR_SCALE", 1e-9))  # x diameter^2
DEFAULT_POSTERIOR_TRUNCATION = float(os.getenv("LCGMM_POSTERIOR_TRUNCATION", 0.0))
DEFAULT_SEED = int(os.getenv("LCGMM_SEED", 0))

# Padding per side of the scanned bounding box used for the outlier volume V
BOUNDING_PADDING = float(os.getenv("LCGMM_BOUNDING_PADDING", 0.05))
MIN_EXTENT = 1e-6  # mm, floor for flat axes

# --- ICP Baseline ---
ICP_MAX_ITERATIONS = int(os.getenv("LCGMM_ICP_MAX_ITERATIONS", 100))
ICP_CONVERGENCE_TOL = float(os.getenv("LCGMM_ICP_CONVERGENCE_TOL", 1e-9))  # mm
ICP_TRIM_FRACTION = float(os.getenv("LCGMM_ICP_TRIM_FRACTION", 0.0))

# --- Evaluation ---
CLOUD_RMSE_THRESHOLD = float(os.getenv("LCGMM_CLOUD_RMSE_THRESHOLD", 10.0))  # mm
RMSE_CONVENTION = os.getenv("LCGMM_RMSE_CONVENTION", "mean_then_sqrt")

# --- Synthetic Corruption ---
SYNTH_ANGLE_RANGE_DEG = float(os.getenv("LCGMM_SYNTH_ANGLE_RANGE", 60.0))
SYNTH_TRANS_RANGE = float(os.getenv("LCGMM_SYNTH_TRANS_RANGE", 10.0))  # mm
SYNTH_NOISE_SIGMA = float(os.getenv("LCGMM_SYNTH_NOISE", 4.0))  # mm
SYNTH_OUTLIER_RATIO = float(os.getenv("LCGMM_SYNTH_OUTLIERS", 0.1))
SYNTH_THIN_KEEP = float(os.getenv("LCGMM_SYNTH_THIN_KEEP", 0.2))  # share kept inside a thinned region
MODEL_POINTS = int(os.getenv("LCGMM_MODEL_POINTS", 5000))

# --- Sweeps ---
SWEEP_TRIALS = int(os.getenv("LCGMM_SWEEP_TRIALS", 6))
SWEEP_WORKERS = int(os.getenv("LCGMM_SWEEP_WORKERS", 1))
SWEEP_BASE_SEED = int(os.getenv("LCGMM_SWEEP_BASE_SEED", 0))
SWEEP_N_POINTS = [int(n) for n in os.getenv("LCGMM_SWEEP_N_POINTS", "3000,4000,5000").split(",")]
SWEEP_LAMBDA_GRID = [0.0, 0.4, 0.8, 1.2, 1.6, 2.0]
SWEEP_OUTLIER_GRID = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40]
SWEEP_NOISE_GRID = [2.0, 3.0, 4.0, 5.0]

# --- Results Files ---
RESULTS_RETRY_ATTEMPTS = int(os.getenv("LCGMM_RESULTS_RETRY_ATTEMPTS", 3))
