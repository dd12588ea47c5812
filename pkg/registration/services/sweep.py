import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np

from config import MODEL_POINTS
from ..models.cloud import PointCloud, GeometryError
from ..models.experiment import (
    SweepSpec, SweepMode, Method, CorruptionSpec, ResultRow, FAILED_SENTINEL,
)
from ..models.mixture import RegistrationConfig, IcpConfig, RegistrationError, InvalidConfigError
from ..utils.io import read_cloud, write_results
from .baselines import icp
from .metrics import error_triple
from .mixture import register
from .synth import blade_model, derive_seed, make_scanned

logger = logging.getLogger(__name__)

EXPECTED_FAILURES = (RegistrationError, GeometryError)


@dataclass(frozen=True)
class TrialTask:
    """Everything one (cell, trial) needs; methods share the corruption seed so results are paired."""
    mode: SweepMode
    cell_index: int
    trial_index: int
    corruption: CorruptionSpec
    registration: RegistrationConfig
    icp: IcpConfig
    methods: Tuple[Method, ...]
    rmse_convention: str
    record_timing: bool

    @property
    def trial_id(self) -> str:
        return f"{self.mode.value}-c{self.cell_index:03d}-t{self.trial_index:02d}"


# ========== PLANNING ==========

def load_model(spec: SweepSpec) -> PointCloud:
    if spec.model_path:
        model = read_cloud(spec.model_path)
        logger.info(f"Loaded model cloud with {len(model)} points from {spec.model_path}")
        return model
    return blade_model(spec.model_points or MODEL_POINTS)


def plan_trials(spec: SweepSpec) -> List[TrialTask]:
    """
    Expands the sweep into (cell, trial) tasks. Cells enumerate grid values
    (outer) times n_points values (inner); each task's seed is derived from
    (base_seed, cell_index, trial_index) only.
    """
    spec.validate()
    tasks = []
    cell_index = 0
    for value in spec.grid:
        for n_points in spec.n_points:
            registration, corruption = spec.registration, replace(spec.base, n_points=n_points)
            if spec.mode is SweepMode.LAMBDA:
                registration = replace(registration, lam=value)
            elif spec.mode is SweepMode.OUTLIERS:
                corruption = replace(corruption, outlier_ratio=value)
            else:
                corruption = replace(corruption, noise_sigma=value)
            registration.validate()
            corruption.validate()

            for trial_index in range(spec.trials_per_cell):
                seed = derive_seed(spec.base_seed, cell_index, trial_index)
                tasks.append(TrialTask(
                    mode=spec.mode,
                    cell_index=cell_index,
                    trial_index=trial_index,
                    corruption=replace(corruption, seed=seed),
                    registration=replace(registration, seed=seed),
                    icp=spec.icp,
                    methods=tuple(spec.methods),
                    rmse_convention=spec.rmse_convention,
                    record_timing=spec.record_timing,
                ))
            cell_index += 1
    return tasks


# ========== EXECUTION ==========

def _row(task: TrialTask, method: Method, status: str = "ok", rmse: float = FAILED_SENTINEL,
         rot_error: float = FAILED_SENTINEL, trans_error: float = FAILED_SENTINEL,
         iterations: int = int(FAILED_SENTINEL), wall_seconds: float = 0.0) -> ResultRow:
    return ResultRow(
        trial_id=task.trial_id,
        method=method,
        lam=task.registration.lam,
        outlier_ratio=task.corruption.outlier_ratio,
        noise_sigma=task.corruption.noise_sigma,
        n_points=task.corruption.n_points,
        k_neighbors=task.registration.knn_k,
        omega=task.registration.outlier_weight,
        rmse=rmse,
        rot_error=rot_error,
        trans_error=trans_error,
        iterations=iterations,
        wall_seconds=wall_seconds if task.record_timing else 0.0,
        rmse_convention=task.rmse_convention,
        status=status,
    )


def _failure(task: TrialTask, method: Method, error: Exception, wall_seconds: float) -> ResultRow:
    if isinstance(error, EXPECTED_FAILURES):
        logger.error(f"Trial {task.trial_id} ({method.value}) failed: {error}")
    else:
        logger.error(f"Trial {task.trial_id} ({method.value}) raised an unexpected error: {error}", exc_info=True)
    return _row(task, method, status=f"failed:{type(error).__name__}", wall_seconds=wall_seconds)


def run_trial(task: TrialTask, model_points: np.ndarray) -> List[ResultRow]:
    """Builds the scanned cloud once and registers it with every method of the task."""
    model = PointCloud(model_points)
    try:
        scanned, ground_truth = make_scanned(model, task.corruption)
    except Exception as e:
        return [_failure(task, method, e, 0.0) for method in task.methods]

    rows = []
    for method in task.methods:
        started = time.perf_counter()
        try:
            if method is Method.LCGMM:
                report = register(scanned, model, task.registration)
            else:
                report = icp(scanned, model, task.icp)
            errors = error_triple(model, ground_truth, report.transform, task.rmse_convention)
        except Exception as e:
            rows.append(_failure(task, method, e, time.perf_counter() - started))
            continue
        rows.append(_row(
            task, method,
            rmse=errors.rmse,
            rot_error=errors.rot_error,
            trans_error=errors.trans_error,
            iterations=report.iterations_run,
            wall_seconds=report.wall_time,
        ))
        logger.debug(f"Trial {task.trial_id} ({method.value}): rmse {errors.rmse:.6g} mm")
    return rows


def _run_indexed(args: Tuple[TrialTask, np.ndarray]) -> Tuple[int, int, List[ResultRow]]:
    task, model_points = args
    return task.cell_index, task.trial_index, run_trial(task, model_points)


def run_sweep(spec: SweepSpec) -> List[ResultRow]:
    """
    Runs every (cell, trial, method) combination and writes the canonically
    ordered rows to `spec.output_path`. Returns the rows as written.
    """
    tasks = plan_trials(spec)
    model = load_model(spec)
    if max(spec.n_points) > len(model):
        raise InvalidConfigError(f"n_points {max(spec.n_points)} exceeds the model size {len(model)}.")

    logger.info(f"Starting {spec.mode.value} sweep: {len(tasks)} trials x {len(spec.methods)} methods, "
                f"{spec.workers} worker(s)")
    started = time.perf_counter()
    jobs = [(task, model.points) for task in tasks]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as executor:
            results = list(executor.map(_run_indexed, jobs, chunksize=1))
    else:
        results = [_run_indexed(job) for job in jobs]

    method_order = {method: position for position, method in enumerate(spec.methods)}
    ordered = []
    for cell_index, trial_index, rows in sorted(results, key=lambda item: (item[0], item[1])):
        ordered.extend(sorted(rows, key=lambda row: method_order[row.method]))

    write_results(ordered, spec.output_path)
    failed = sum(1 for row in ordered if row.status != "ok")
    logger.info(f"Sweep finished in {time.perf_counter() - started:.1f} s: {len(ordered)} rows "
                f"({failed} failed) written to {spec.output_path}")
    return ordered
