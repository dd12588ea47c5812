"""
Flat key=value sweep configuration.

    # outlier sweep, paired against ICP
    mode = outliers
    grid = 0.05, 0.10, 0.15
    trials = 6
    methods = lcgmm, icp
    out = results/outliers.csv

Blank lines and lines starting with '#' are ignored. Keys mirror the
`sweep` command-line flags; flags given on the command line override the file.
"""
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Union

from config import (
    SWEEP_LAMBDA_GRID, SWEEP_OUTLIER_GRID, SWEEP_NOISE_GRID, MODEL_POINTS, SYNTH_THIN_KEEP,
)
from ..models.experiment import SweepSpec, SweepMode, Method, RmseConvention, CorruptionSpec
from ..models.mixture import RegistrationConfig, IcpConfig, InvalidConfigError
from ..services.synth import with_thinned_region
from .io import MalformedFileError

logger = logging.getLogger(__name__)


def _float_list(text: str) -> List[float]:
    return [float(item) for item in text.split(",") if item.strip()]


def _int_list(text: str) -> List[int]:
    return [int(item) for item in text.split(",") if item.strip()]


def _str_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _boolean(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"'{text}' is not a boolean")


SWEEP_KEYS: Dict[str, Callable[[str], Any]] = {
    "mode": str.strip,
    "grid": _float_list,
    "trials": int,
    "n_points": _int_list,
    "noise_sigma": float,
    "outlier_ratio": float,
    "angle_range": float,
    "trans_range": float,
    "thin_region": str.strip,
    "thin_keep": float,
    "lambda": float,
    "omega": float,
    "k": int,
    "max_iterations": int,
    "tol": float,
    "variance_floor": float,
    "posterior_truncation": float,
    "icp_max_iterations": int,
    "icp_tol": float,
    "icp_trim_fraction": float,
    "methods": _str_list,
    "base_seed": int,
    "workers": int,
    "model": str.strip,
    "model_points": int,
    "rmse_convention": str.strip,
    "record_timing": _boolean,
    "out": str.strip,
}

DEFAULT_GRIDS = {
    SweepMode.LAMBDA: SWEEP_LAMBDA_GRID,
    SweepMode.OUTLIERS: SWEEP_OUTLIER_GRID,
    SweepMode.NOISE: SWEEP_NOISE_GRID,
}


def parse_config_text(text: str, source: Union[str, Path] = "<config>") -> Dict[str, Any]:
    """Parses key=value lines into converted values; errors carry the offending line number."""
    values: Dict[str, Any] = {}
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedFileError(source, line_number, "expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in SWEEP_KEYS:
            raise MalformedFileError(source, line_number, f"unknown key '{key}'")
        if key in values:
            raise MalformedFileError(source, line_number, f"duplicate key '{key}'")
        try:
            values[key] = SWEEP_KEYS[key](value.strip())
        except ValueError as e:
            raise MalformedFileError(source, line_number, f"bad value for '{key}': {e}")
    return values


def parse_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as handle:
        values = parse_config_text(handle.read(), path)
    logger.debug(f"Loaded {len(values)} sweep settings from {path}")
    return values


def build_sweep_spec(values: Dict[str, Any]) -> SweepSpec:
    """
    Assembles a validated SweepSpec from parsed settings. Unset values take
    the experiment defaults: lambda 0.5 for the outlier and noise sweeps,
    10% outliers and noise 4.0 for the lambda sweep, n in {3000, 4000, 5000}.
    """
    if "mode" not in values:
        raise InvalidConfigError("Sweep configuration needs a 'mode' (lambda, outliers or noise).")
    if "out" not in values:
        raise InvalidConfigError("Sweep configuration needs an output path ('out').")
    try:
        mode = SweepMode(values["mode"])
    except ValueError:
        raise InvalidConfigError(f"Unknown sweep mode '{values['mode']}'.")

    spec = SweepSpec(mode=mode, grid=list(values.get("grid", DEFAULT_GRIDS[mode])), output_path=values["out"])

    corruption = {
        "noise_sigma": values.get("noise_sigma"),
        "outlier_ratio": values.get("outlier_ratio"),
        "angle_range_deg": values.get("angle_range"),
        "trans_range": values.get("trans_range"),
    }
    registration = {
        "lam": values.get("lambda"),
        "outlier_weight": values.get("omega"),
        "knn_k": values.get("k"),
        "max_iterations": values.get("max_iterations"),
        "convergence_tol": values.get("tol"),
        "variance_floor": values.get("variance_floor"),
        "posterior_truncation": values.get("posterior_truncation"),
    }
    icp = {
        "max_iterations": values.get("icp_max_iterations"),
        "convergence_tol": values.get("icp_tol"),
        "trim_fraction": values.get("icp_trim_fraction"),
    }

    n_points = list(values.get("n_points", spec.n_points))
    spec.n_points = n_points
    spec.base = replace(CorruptionSpec(n_points=n_points[0] if n_points else 1),
                        **{k: v for k, v in corruption.items() if v is not None})
    if "thin_region" in values:
        spec.base = with_thinned_region(spec.base, values["thin_region"], values.get("thin_keep", SYNTH_THIN_KEEP))
    elif "thin_keep" in values:
        raise InvalidConfigError("'thin_keep' needs a 'thin_region'.")
    spec.registration = replace(RegistrationConfig(), **{k: v for k, v in registration.items() if v is not None})
    spec.icp = replace(IcpConfig(), **{k: v for k, v in icp.items() if v is not None})

    if "trials" in values:
        spec.trials_per_cell = values["trials"]
    if "base_seed" in values:
        spec.base_seed = values["base_seed"]
    if "workers" in values:
        spec.workers = values["workers"]
    if "record_timing" in values:
        spec.record_timing = values["record_timing"]
    spec.model_path = values.get("model")
    spec.model_points = values.get("model_points", MODEL_POINTS)
    try:
        if "methods" in values:
            spec.methods = [Method(m) for m in values["methods"]]
        if "rmse_convention" in values:
            spec.rmse_convention = RmseConvention(values["rmse_convention"])
    except ValueError as e:
        raise InvalidConfigError(str(e))

    spec.validate()
    return spec
