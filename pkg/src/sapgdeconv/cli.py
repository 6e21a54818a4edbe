"""Command-line interface.

Every command reads an optional JSON experiment config (``--config``); flags
given on the command line override the corresponding config fields.  Outputs
go under ``--out-dir``.  Exit codes: 0 success, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .experiments import (
    SWEEP_PARAMETERS,
    ExperimentConfig,
    degrade,
    gradcheck,
    repro_config,
    resolve_image,
    select_model,
    sweep,
    theta_psnr_sweep,
    write_sweep_csv,
)
from .imaging import ImageFormatError, bsnr, load_image, metric_report, psnr, save_image
from .kernels import BlurModel, KernelFamily, apply, dump_kernel, kernel_l1_distance
from .map import map_estimate
from .myula import UnstableStepError
from .prior import PriorSpec
from .sapg import CalibrationError, HyperDomain, sapg_calibrate, sapg_calibrate_dual, validate_schedule

log = logging.getLogger("sapgdeconv")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class ConfigError(Exception):
    pass


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_json_safe(data), indent=2, sort_keys=True) + "\n")


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


# --------------------------------------------------------------------------
# Config assembly
# --------------------------------------------------------------------------


def _load_config(args) -> ExperimentConfig:
    if args.config:
        try:
            cfg = ExperimentConfig.from_json(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
    else:
        cfg = ExperimentConfig()
    if getattr(args, "image", None):
        cfg.image = args.image
    if getattr(args, "family", None):
        cfg.family = args.family
    if getattr(args, "alpha", None):
        cfg.true_alpha = _parse_floats(args.alpha)
    if getattr(args, "bsnr", None) is not None:
        cfg.bsnr_db = args.bsnr
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "preset", None):
        cfg.preset = args.preset
    if getattr(args, "iterations", None) is not None:
        cfg.sapg["n_iterations"] = args.iterations
    if getattr(args, "warmup", None) is not None:
        cfg.sapg["warmup_steps"] = args.warmup
    if getattr(args, "record_timing", False):
        cfg.sapg["record_timing"] = True
    cfg.out_dir = args.out_dir or cfg.out_dir
    cfg.validate()
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _observation(args, cfg: ExperimentConfig):
    """``(y, x_true or None, sigma2_true or None)`` from ``--input`` or by degrading the config image."""
    if getattr(args, "input", None):
        truth = load_image(args.truth) if getattr(args, "truth", None) else None
        return load_image(args.input), truth, None
    x = resolve_image(cfg.image)
    y, sigma2 = degrade(x, cfg.family, cfg.alpha_star(), cfg.bsnr_db, cfg.seed)
    return y, x, sigma2


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_degrade(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    x = resolve_image(cfg.image)
    y, sigma2 = degrade(x, cfg.family, cfg.alpha_star(), cfg.bsnr_db, cfg.seed)
    model = BlurModel(cfg.family, cfg.alpha_star(), x.shape)
    save_image(x, out / "truth.npy")
    save_image(y, out / "degraded.npy")
    save_image(y, out / "degraded.png")
    dump_kernel(model, out / "kernel.txt")
    _write_json(
        out / "degrade.json",
        {
            "family": model.family.value,
            "alpha": list(model.alpha),
            "sigma2": sigma2,
            "target_bsnr_db": cfg.bsnr_db,
            "metrics": metric_report(y, x, y, apply(model, x)).to_dict(),
            "config_echo": cfg.to_dict(),
        },
    )
    return EXIT_OK


def _calibrate(args, dual: bool) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    y, x_true, sigma2_true = _observation(args, cfg)
    family = cfg.kernel_family
    domain = HyperDomain.from_observation(y, family, cfg.bsnr_range, cfg.theta_box)
    calibrate = sapg_calibrate_dual if dual else sapg_calibrate
    result = calibrate(y, family, domain, PriorSpec(), cfg.sapg_config())
    result.trace.write_csv(out / "trace.csv", include_timing=result.config.record_timing)
    summary = result.summary()
    summary["experiment_echo"] = cfg.to_dict()
    if sigma2_true is not None:
        alpha_star = cfg.alpha_star()
        true_model = BlurModel(family, alpha_star, y.shape)
        summary["reference"] = {
            "alpha": list(alpha_star),
            "sigma2": sigma2_true,
            "alpha_rel_err": [abs(a - b) / b for a, b in zip(result.params.alpha, alpha_star)],
            "sigma2_rel_err": abs(result.params.sigma2 - sigma2_true) / sigma2_true,
            "kernel_l1": kernel_l1_distance(true_model, true_model.with_alpha(result.params.alpha)),
        }
    _write_json(out / "summary.json", summary)
    print(json.dumps(_json_safe({k: summary[k] for k in ("theta_bar", "alpha_bar", "sigma2_bar", "n_used")})))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    return _calibrate(args, dual=False)


def cmd_calibrate_dual(args) -> int:
    return _calibrate(args, dual=True)


def cmd_deconvolve(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    y, x_true, _ = _observation(args, cfg)
    if args.summary:
        s = json.loads(Path(args.summary).read_text())
        theta, alpha, sigma2 = s["theta_bar"], s["alpha_bar"], s["sigma2_bar"]
        family = s.get("family", cfg.family)
    else:
        if args.theta is None or args.sigma2 is None or args.alpha is None:
            raise ConfigError("deconvolve needs --summary or all of --theta, --alpha and --sigma2")
        theta, alpha, sigma2, family = args.theta, cfg.alpha_star(), args.sigma2, cfg.family
    model = BlurModel(family, alpha, y.shape)
    result = map_estimate(y, theta, model, sigma2, cfg.map_config())
    save_image(result.x, out / "map.npy")
    save_image(result.x, out / "map.png")
    report = {
        "theta": theta,
        "alpha": list(model.alpha),
        "sigma2": sigma2,
        "iterations": result.iterations,
        "converged": result.converged,
        "objective": result.objective,
        "residual": float(np.sum((apply(model, result.x) - y) ** 2)),
    }
    if x_true is not None:
        report["psnr_db"] = psnr(result.x, x_true)
        report["psnr_identical"] = math.isinf(report["psnr_db"])
    _write_json(out / "deconvolve.json", report)
    return EXIT_OK if result.converged else EXIT_NUMERICAL


def cmd_select_model(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    y, x_true, _ = _observation(args, cfg)
    families = [KernelFamily.parse(f) for f in args.families.split(",")]
    configs = {f: cfg.sapg_config(f) for f in families}
    report = select_model(y, families, configs, cfg.map_config(), cfg.bsnr_range, x_true, args.workers)
    _write_json(out / "model_selection.json", {**report.to_dict(), "config_echo": cfg.to_dict()})
    print(report.selected)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    alpha = _parse_floats(args.alpha) if args.alpha else None
    report = gradcheck(args.family or "gaussian", alpha, args.size, args.seed or 0, corrupt=args.corrupt)
    text = json.dumps(_json_safe(report.to_dict()), indent=2, sort_keys=True)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(text + "\n")
        dump_kernel(BlurModel(report.family, report.alpha, (args.size, args.size)), out / "kernel.txt")
    print(text)
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    y, _, _ = _observation(args, cfg)
    try:
        values = json.loads(args.values)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--values must be a JSON list: {exc}") from exc
    if not isinstance(values, list):
        raise ConfigError("--values must be a JSON list")
    family = cfg.kernel_family
    domain = HyperDomain.from_observation(y, family, cfg.bsnr_range, cfg.theta_box)
    runs = sweep(y, family, args.parameter, values, cfg.sapg_config(), domain, args.workers)
    write_sweep_csv(runs, args.parameter, out / "sweep.csv")
    summary = []
    for run in runs:
        entry = {"value": run.value, "error": run.error}
        if run.result is not None:
            entry.update(run.result.params.to_dict())
        summary.append(entry)
    _write_json(out / "sweep.json", {"parameter": args.parameter, "runs": summary, "config_echo": cfg.to_dict()})
    return EXIT_OK if all(r.error is None for r in runs) else EXIT_NUMERICAL


def cmd_validate_schedule(args) -> int:
    report = validate_schedule(args.a, args.b, args.c, args.regime)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_theta_star(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    x = resolve_image(cfg.image)
    y, sigma2 = degrade(x, cfg.family, cfg.alpha_star(), cfg.bsnr_db, cfg.seed)
    model = BlurModel(cfg.family, cfg.alpha_star(), x.shape)
    thetas = _parse_floats(args.thetas) if args.thetas else None
    res = theta_psnr_sweep(x, y, model, sigma2, thetas, cfg.map_config())
    _write_json(out / "theta_star.json", {"theta_star": res.theta_star, "psnr_db": res.psnr_star, "grid": res.grid})
    print(res.theta_star)
    return EXIT_OK


def cmd_repro(args) -> int:
    cfg = repro_config(args.table, args.scale, args.seed or 0)
    if args.iterations is not None:
        cfg.sapg["n_iterations"] = args.iterations
    if args.warmup is not None:
        cfg.sapg["warmup_steps"] = args.warmup
    if args.record_timing:
        cfg.sapg["record_timing"] = True
    cfg.out_dir = args.out_dir or f"repro_{args.table}"
    cfg.validate()
    out = _out_dir(cfg)
    x = resolve_image(cfg.image)
    family = cfg.kernel_family
    alpha_star = cfg.alpha_star()
    y, sigma2_star = degrade(x, family, alpha_star, cfg.bsnr_db, cfg.seed)
    domain = HyperDomain.from_observation(y, family, cfg.bsnr_range, cfg.theta_box)
    result = sapg_calibrate(y, family, domain, PriorSpec(), cfg.sapg_config())
    result.trace.write_csv(out / "trace.csv", include_timing=result.config.record_timing)
    p = result.params
    true_model = BlurModel(family, alpha_star, x.shape)
    est_model = true_model.with_alpha(p.alpha)
    x_semi = map_estimate(y, p.theta, est_model, p.sigma2, cfg.map_config()).x
    save_image(y, out / "degraded.png")
    save_image(x_semi, out / "map_semiblind.png")
    summary = result.summary()
    summary.update(
        {
            "table": args.table,
            "scale": args.scale,
            "alpha_star": list(alpha_star),
            "sigma2_star": sigma2_star,
            "alpha_rel_err": [abs(a - b) / b for a, b in zip(p.alpha, alpha_star)],
            "sigma2_rel_err": abs(p.sigma2 - sigma2_star) / sigma2_star,
            "kernel_l1": kernel_l1_distance(true_model, est_model),
            "blurred_psnr_db": psnr(y, x),
            "measured_bsnr_db": bsnr(y, apply(true_model, x)),
            "semiblind_psnr_db": psnr(x_semi, x),
            "experiment_echo": cfg.to_dict(),
        }
    )
    _write_json(out / "summary.json", summary)
    print(json.dumps(_json_safe({k: summary[k] for k in ("alpha_rel_err", "sigma2_rel_err", "kernel_l1")})))
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--log-level", default="WARNING")

    problem = argparse.ArgumentParser(add_help=False)
    problem.add_argument("--image", help="ground-truth image path (PGM, PNG or .npy)")
    problem.add_argument("--family", choices=[f.value for f in KernelFamily])
    problem.add_argument("--alpha", help="comma-separated kernel parameters")
    problem.add_argument("--bsnr", type=float, help="target BSNR in dB")
    problem.add_argument("--preset", choices=["desk", "full"])

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--input", help="observed image; if omitted the config image is degraded")
    run.add_argument("--truth", help="ground truth for PSNR reporting when --input is given")
    run.add_argument("--iterations", type=int, help="SAPG iterations N")
    run.add_argument("--warmup", type=int, help="warm-up MYULA steps")
    run.add_argument("--record-timing", action="store_true", help="add elapsed_ms to the trace (not reproducible)")
    run.add_argument("--workers", type=int, default=1)

    parser = argparse.ArgumentParser(prog="sapgdeconv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", parents=[common, problem], help="blur and add noise to an image")
    p.set_defaults(func=cmd_degrade)

    for name, func in (("calibrate", cmd_calibrate), ("calibrate-dual", cmd_calibrate_dual)):
        p = sub.add_parser(name, parents=[common, problem, run], help="estimate theta, alpha and sigma2")
        p.set_defaults(func=func)

    p = sub.add_parser("deconvolve", parents=[common, problem, run], help="MAP deconvolution")
    p.add_argument("--summary", help="calibration summary.json providing theta, alpha and sigma2")
    p.add_argument("--theta", type=float)
    p.add_argument("--sigma2", type=float)
    p.set_defaults(func=cmd_deconvolve)

    p = sub.add_parser("select-model", parents=[common, problem, run], help="pick the kernel family with the smallest residual")
    p.add_argument("--families", default="gaussian,laplace,moffat")
    p.set_defaults(func=cmd_select_model)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of analytic gradients")
    p.add_argument("--family", choices=[f.value for f in KernelFamily])
    p.add_argument("--alpha")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", parents=[common, problem, run], help="robustness sweep over one setting")
    p.add_argument("--parameter", required=True, choices=SWEEP_PARAMETERS)
    p.add_argument("--values", required=True, help="JSON list of values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate-schedule", help="check step-size exponent conditions")
    p.add_argument("a", type=float)
    p.add_argument("b", type=float)
    p.add_argument("c", type=float, nargs="?", default=0.0)
    p.add_argument("--regime", choices=["increasing_batch", "fixed_batch"], default="increasing_batch")
    p.set_defaults(func=cmd_validate_schedule)

    p = sub.add_parser("theta-star", parents=[common, problem], help="PSNR-optimal theta under the true blur")
    p.add_argument("--thetas", help="comma-separated theta grid")
    p.set_defaults(func=cmd_theta_star)

    p = sub.add_parser("repro", parents=[common], help="reproduce a calibration table")
    p.add_argument("table", choices=["table1", "table2", "table3"])
    p.add_argument("--scale", choices=["desk", "full"], default="desk")
    p.add_argument("--iterations", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--record-timing", action="store_true")
    p.set_defaults(func=cmd_repro)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = str(getattr(args, "log_level", "WARNING")).upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CalibrationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, UnstableStepError, ImageFormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
