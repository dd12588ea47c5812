import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional

from config import (
    DEFAULT_LAMBDA, DEFAULT_OMEGA, DEFAULT_KNN_K, DEFAULT_MAX_ITERATIONS, DEFAULT_CONVERGENCE_TOL,
    DEFAULT_SEED, CLOUD_RMSE_THRESHOLD, MODEL_POINTS, SYNTH_ANGLE_RANGE_DEG, SYNTH_TRANS_RANGE,
    SYNTH_NOISE_SIGMA, SYNTH_OUTLIER_RATIO, SYNTH_THIN_KEEP, SWEEP_N_POINTS, ICP_MAX_ITERATIONS,
    ICP_CONVERGENCE_TOL, RMSE_CONVENTION,
)
from .models.experiment import CorruptionSpec, ResultRow, Method, RmseConvention, FAILED_SENTINEL
from .models.cloud import GeometryError
from .models.mixture import RegistrationConfig, IcpConfig, InvalidConfigError, RegistrationError
from .services.baselines import icp
from .services.geometry import apply_transform
from .services.metrics import transform_rmse, rotation_error, translation_error, cloud_rmse, error_triple
from .services.mixture import register
from .services.sweep import run_sweep
from .services.synth import BLADE_REGIONS, blade_model, make_scanned, with_thinned_region
from .utils.config_file import SWEEP_KEYS, parse_config_file, build_sweep_spec
from .utils.io import (
    FormatError, read_cloud, read_transform, write_transform, write_xyz, append_result,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_NUMERICAL_FAILURE = 3

AXES = {"x": 0, "y": 1, "z": 2}

# sweep flag -> config-file key
SWEEP_FLAGS = {
    "mode": "mode", "grid": "grid", "trials": "trials", "n_points": "n_points",
    "noise": "noise_sigma", "outliers": "outlier_ratio", "angle_range": "angle_range",
    "trans_range": "trans_range", "thin_region": "thin_region", "thin_keep": "thin_keep",
    "lam": "lambda", "omega": "omega", "k": "k",
    "max_iters": "max_iterations", "tol": "tol", "methods": "methods", "seed": "base_seed",
    "workers": "workers", "model": "model", "model_points": "model_points",
    "rmse_convention": "rmse_convention", "out": "out",
}


# ========== COMMANDS ==========

def cmd_register(args) -> int:
    scanned = read_cloud(args.scanned)
    model = read_cloud(args.model)
    method = Method(args.method)
    cfg = RegistrationConfig(
        lam=args.lam,
        outlier_weight=args.omega,
        knn_k=args.k,
        max_iterations=DEFAULT_MAX_ITERATIONS if args.max_iters is None else args.max_iters,
        convergence_tol=DEFAULT_CONVERGENCE_TOL if args.tol is None else args.tol,
        seed=args.seed,
    )
    if method is Method.LCGMM:
        report = register(scanned, model, cfg)
    else:
        report = icp(scanned, model, IcpConfig(
            max_iterations=ICP_MAX_ITERATIONS if args.max_iters is None else args.max_iters,
            convergence_tol=ICP_CONVERGENCE_TOL if args.tol is None else args.tol,
        ))

    write_transform(report.transform, args.out_transform)
    final_objective = report.objective_trace[-1] if report.objective_trace else float("nan")
    print(f"method: {report.method}")
    print(f"iterations: {report.iterations_run} ({report.converged_by.value})")
    print(f"objective: {final_objective:.10g}")
    print(f"wall_time: {report.wall_time:.3f} s")

    if args.report:
        # ICP has no mixture parameters
        mixture = method is Method.LCGMM
        row = ResultRow(
            trial_id=os.path.basename(args.scanned),
            method=method,
            lam=cfg.lam if mixture else 0.0,
            outlier_ratio=FAILED_SENTINEL,
            noise_sigma=FAILED_SENTINEL,
            n_points=len(scanned),
            k_neighbors=cfg.knn_k if mixture else 0,
            omega=cfg.outlier_weight if mixture else 0.0,
            rmse=FAILED_SENTINEL,
            rot_error=FAILED_SENTINEL,
            trans_error=FAILED_SENTINEL,
            iterations=report.iterations_run,
            wall_seconds=report.wall_time,
            rmse_convention=RmseConvention(RMSE_CONVENTION),
            status="no_ground_truth",
        )
        if args.gt:
            errors = error_triple(model, read_transform(args.gt), report.transform, row.rmse_convention)
            row.rmse, row.rot_error, row.trans_error = errors.rmse, errors.rot_error, errors.trans_error
            row.status = "ok"
        append_result(row, args.report)
        logger.info(f"Report row appended to {args.report}")
    return EXIT_OK


def cmd_synth(args) -> int:
    model = read_cloud(args.model)
    spec = CorruptionSpec(
        n_points=args.n,
        noise_sigma=args.noise,
        outlier_ratio=args.outliers,
        angle_range_deg=args.angle_range,
        trans_range=args.trans_range,
        seed=args.seed,
    )
    keep = SYNTH_THIN_KEEP if args.thin_keep is None else args.thin_keep
    if args.thin_region is not None:
        if args.thin_range is not None:
            raise InvalidConfigError("--thin-range only applies with --thin-axis.")
        spec = with_thinned_region(spec, args.thin_region, keep)
    elif args.thin_axis is not None:
        if args.thin_range is None:
            raise InvalidConfigError("--thin-axis needs --thin-range LOWER UPPER.")
        lower, upper = args.thin_range
        spec = replace(spec, thin_axis=AXES[args.thin_axis], thin_lower=lower, thin_upper=upper, thin_keep=keep)
    elif args.thin_range is not None or args.thin_keep is not None:
        raise InvalidConfigError("--thin-range and --thin-keep need --thin-region or --thin-axis.")
    if spec.n_points > len(model):
        raise InvalidConfigError(f"--n {spec.n_points} exceeds the model size {len(model)}.")
    scanned, ground_truth = make_scanned(model, spec)
    write_xyz(scanned, args.out_scanned)
    write_transform(ground_truth, args.out_gt)
    logger.info(f"Wrote {len(scanned)} scanned points to {args.out_scanned} and ground truth to {args.out_gt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = read_cloud(args.model)
    ground_truth = read_transform(args.gt)
    estimate = read_transform(args.est)
    values = {
        "rmse_mean_then_sqrt": transform_rmse(model, ground_truth, estimate, RmseConvention.MEAN_THEN_SQRT),
        "rmse_paper_literal": transform_rmse(model, ground_truth, estimate, RmseConvention.PAPER_LITERAL),
        "rot_error": rotation_error(ground_truth.rotation, estimate.rotation),
        "trans_error": translation_error(ground_truth.translation, estimate.translation),
    }
    if args.scanned:
        values["cloud_rmse"] = cloud_rmse(read_cloud(args.scanned), apply_transform(model, estimate), args.threshold)

    if args.csv:
        writer = csv.DictWriter(sys.stdout, fieldnames=list(values), lineterminator="\n")
        writer.writeheader()
        writer.writerow({key: f"{value:.17g}" for key, value in values.items()})
    else:
        for key, value in values.items():
            print(f"{key}: {value:.10g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    for flag, key in SWEEP_FLAGS.items():
        raw = getattr(args, flag)
        if raw is None:
            continue
        try:
            values[key] = SWEEP_KEYS[key](str(raw))
        except ValueError as e:
            raise InvalidConfigError(f"Bad value for --{flag.replace('_', '-')}: {e}")
    if args.no_timing:
        values["record_timing"] = False

    rows = run_sweep(build_sweep_spec(values))
    print(f"{len(rows)} rows written to {values['out']}")
    return EXIT_OK


def cmd_model(args) -> int:
    model = blade_model(args.n, seed=args.seed)
    write_xyz(model, args.out)
    logger.info(f"Wrote blade model with {len(model)} points to {args.out}")
    return EXIT_OK


# ========== PARSER ==========

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcgmm", description="Locally consistent GMM point-cloud registration.")
    commands = parser.add_subparsers(dest="command", required=True)

    reg = commands.add_parser("register", help="Register a model cloud onto a scanned cloud.")
    reg.add_argument("--scanned", required=True)
    reg.add_argument("--model", required=True)
    reg.add_argument("--method", choices=[m.value for m in Method], default=Method.LCGMM.value)
    reg.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    reg.add_argument("--omega", type=float, default=DEFAULT_OMEGA)
    reg.add_argument("--k", type=int, default=DEFAULT_KNN_K)
    reg.add_argument("--max-iters", type=int, default=None)
    reg.add_argument("--tol", type=float, default=None)
    reg.add_argument("--seed", type=int, default=DEFAULT_SEED)
    reg.add_argument("--out-transform", required=True)
    reg.add_argument("--report", default=None, help="Results CSV to append one row to.")
    reg.add_argument("--gt", default=None, help="Ground-truth transform; fills the report's error columns.")
    reg.set_defaults(handler=cmd_register)

    synth = commands.add_parser("synth", help="Derive a corrupted scanned cloud from a model.")
    synth.add_argument("--model", required=True)
    synth.add_argument("--n", type=int, default=SWEEP_N_POINTS[0])
    synth.add_argument("--noise", type=float, default=SYNTH_NOISE_SIGMA)
    synth.add_argument("--outliers", type=float, default=SYNTH_OUTLIER_RATIO)
    synth.add_argument("--angle-range", type=float, default=SYNTH_ANGLE_RANGE_DEG)
    synth.add_argument("--trans-range", type=float, default=SYNTH_TRANS_RANGE)
    synth.add_argument("--seed", type=int, default=DEFAULT_SEED)
    thinning = synth.add_mutually_exclusive_group()
    thinning.add_argument("--thin-region", choices=sorted(BLADE_REGIONS), help="Thin a named blade region.")
    thinning.add_argument("--thin-axis", choices=sorted(AXES), help="Thin a model-frame slab along this axis.")
    synth.add_argument("--thin-range", type=float, nargs=2, metavar=("LOWER", "UPPER"))
    synth.add_argument("--thin-keep", type=float, default=None,
                       help=f"Share of points kept inside the thinned slab (default {SYNTH_THIN_KEEP}).")
    synth.add_argument("--out-scanned", required=True)
    synth.add_argument("--out-gt", required=True)
    synth.set_defaults(handler=cmd_synth)

    evaluate = commands.add_parser("eval", help="Compare an estimated transform with the ground truth.")
    evaluate.add_argument("--model", required=True)
    evaluate.add_argument("--gt", required=True)
    evaluate.add_argument("--est", required=True)
    evaluate.add_argument("--scanned", default=None)
    evaluate.add_argument("--threshold", type=float, default=CLOUD_RMSE_THRESHOLD)
    evaluate.add_argument("--csv", action="store_true")
    evaluate.set_defaults(handler=cmd_eval)

    sweep = commands.add_parser("sweep", help="Run a lambda, outlier or noise experiment sweep.")
    sweep.add_argument("--config", default=None, help="key=value file; flags override its entries.")
    sweep.add_argument("--mode", choices=["lambda", "outliers", "noise"])
    sweep.add_argument("--grid", help="Comma-separated grid values.")
    sweep.add_argument("--trials", type=int)
    sweep.add_argument("--n-points", help="Comma-separated scanned cloud sizes.")
    sweep.add_argument("--noise", type=float)
    sweep.add_argument("--outliers", type=float)
    sweep.add_argument("--angle-range", type=float)
    sweep.add_argument("--trans-range", type=float)
    sweep.add_argument("--thin-region", choices=sorted(BLADE_REGIONS))
    sweep.add_argument("--thin-keep", type=float)
    sweep.add_argument("--lambda", dest="lam", type=float)
    sweep.add_argument("--omega", type=float)
    sweep.add_argument("--k", type=int)
    sweep.add_argument("--max-iters", type=int)
    sweep.add_argument("--tol", type=float)
    sweep.add_argument("--methods", help="Comma-separated subset of lcgmm,icp.")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--workers", type=int)
    sweep.add_argument("--model")
    sweep.add_argument("--model-points", type=int)
    sweep.add_argument("--rmse-convention", choices=[c.value for c in RmseConvention])
    sweep.add_argument("--no-timing", action="store_true", help="Write wall_seconds = 0 for byte-identical reruns.")
    sweep.add_argument("--out")
    sweep.set_defaults(handler=cmd_sweep)

    model = commands.add_parser("model", help="Write the blade-like model cloud.")
    model.add_argument("--n", type=int, default=MODEL_POINTS)
    model.add_argument("--seed", type=int, default=DEFAULT_SEED)
    model.add_argument("--out", required=True)
    model.set_defaults(handler=cmd_model)

    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Parses `argv` and runs the command; returns 0, 2 for input errors or 3 for numerical failures."""
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ArithmeticError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL_FAILURE
    except (ValueError, FormatError, GeometryError, RegistrationError, OSError) as e:
        logger.error(f"Input error: {e}")
        return EXIT_INPUT_ERROR
