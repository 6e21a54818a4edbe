"""Experiment drivers: degradation, model selection, gradient checks, sweeps and presets."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .imaging import as_image, load_image, psnr, sigma2_from_bsnr, test_image
from .kernels import BlurModel, KernelFamily, apply, fidelity, fidelity_gradients
from .map import MapConfig, map_estimate
from .myula import make_rng
from .prior import PriorSpec
from .sapg import (
    FAMILY_PRESETS,
    CalibrationError,
    DeltaScales,
    HyperDomain,
    SapgConfig,
    SapgResult,
    preset_config,
    sapg_calibrate,
    sapg_calibrate_dual,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Desk-scale runs use a 128 x 128 window on the face of the bundled test image.
DESK_IMAGE = {"builtin": "camera", "size": 128, "origin": [64, 160]}
FULL_IMAGE = {"builtin": "camera"}
DESK_BUDGET = {"n_iterations": 5000, "warmup_steps": 5000, "gamma_policy": "adaptive"}
DESK_SIGMA2_SCALE = {KernelFamily.GAUSSIAN: 10000.0}
REPRO_TABLES = {
    "table1": KernelFamily.GAUSSIAN,
    "table2": KernelFamily.LAPLACE,
    "table3": KernelFamily.MOFFAT,
}


def desk_config(family, **overrides) -> SapgConfig:
    """Reduced-budget configuration for 128 x 128 problems.

    Differs from the full-scale preset in three ways: 5000 warm-up and SAPG
    iterations, a step size that tracks the current noise iterate, and (for
    the Gaussian family) a sigma2 step scale raised to the value the other
    families already use.
    """
    family = KernelFamily.parse(family)
    scales = FAMILY_PRESETS[family]["delta_scales"]
    if family in DESK_SIGMA2_SCALE:
        scales = replace(scales, sigma2=DESK_SIGMA2_SCALE[family])
    base = {**DESK_BUDGET, "delta_scales": scales}
    base.update(overrides)
    return preset_config(family, **base)


def resolve_image(spec) -> np.ndarray:
    """Load an image from a path or a ``{"builtin": name, "size": s, "origin": [r, c]}`` spec."""
    if isinstance(spec, (str, Path)):
        return load_image(spec)
    if isinstance(spec, dict) and "builtin" in spec:
        origin = spec.get("origin")
        return test_image(spec["builtin"], spec.get("size"), tuple(origin) if origin else None)
    if isinstance(spec, dict) and "path" in spec:
        return load_image(spec["path"])
    raise ValueError(f"cannot resolve image specification {spec!r}")


# --------------------------------------------------------------------------
# Degradation
# --------------------------------------------------------------------------


def degrade(x, family, alpha, bsnr_db: float, seed, support: int = 7) -> tuple[np.ndarray, float]:
    """Blur ``x`` and add white Gaussian noise at the requested BSNR.

    Returns ``(y, sigma2)``; ``bsnr_db = inf`` gives the noiseless ``H x`` and
    ``sigma2 = 0``.
    """
    x = as_image(x, "x")
    model = BlurModel(family, alpha, x.shape, support)
    lo = [b[0] for b in model.family.default_box]
    hi = [b[1] for b in model.family.default_box]
    if any(not l <= a <= h for a, l, h in zip(model.alpha, lo, hi)):
        raise ValueError(f"alpha {model.alpha} outside the admissible box of {model.family.value}")
    hx = apply(model, x)
    if math.isinf(bsnr_db) and bsnr_db > 0:
        return hx, 0.0
    sigma2 = sigma2_from_bsnr(hx, bsnr_db)
    noise = make_rng(seed).standard_normal(x.shape)
    return hx + math.sqrt(sigma2) * noise, sigma2


# --------------------------------------------------------------------------
# Gradient self-check
# --------------------------------------------------------------------------


def _central_diff(fn, h):
    """Fourth-order central difference of ``t -> fn(t)`` at zero."""
    return (fn(-2 * h) - 8 * fn(-h) + 8 * fn(h) - fn(2 * h)) / (12 * h)


def _rel_err(analytic, numeric, floor: float) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@dataclass
class GradcheckReport:
    family: str
    alpha: list
    errors: dict
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def gradcheck(
    family,
    alpha=None,
    size: int = 32,
    seed=0,
    tolerance: float = 1e-4,
    rel_step: float = 1e-4,
    corrupt: float = 0.0,
) -> GradcheckReport:
    """Compare analytic kernel and fidelity gradients with central differences.

    ``corrupt`` scales every analytic parameter gradient by ``1 + corrupt``;
    it exists so that the check can be shown to fail.
    """
    family = KernelFamily.parse(family)
    alpha = FAMILY_PRESETS[family]["true_alpha"] if alpha is None else alpha
    model = BlurModel(family, alpha, (size, size))
    rng = make_rng(seed)
    x_true = 255.0 * rng.random(model.shape)
    y = apply(model, x_true) + 5.0 * rng.standard_normal(model.shape)
    x = x_true + 10.0 * rng.standard_normal(model.shape)
    sigma2 = 25.0
    errors: dict = {}

    fg = fidelity_gradients(y, x, model, sigma2)
    f0 = fidelity(y, x, model, sigma2)
    for j, name in enumerate(family.param_names):
        h = rel_step * max(abs(model.alpha[j]), 1.0)

        def shifted(t, j=j):
            alpha = list(model.alpha)
            alpha[j] += t
            return model.with_alpha(alpha)

        fd_kernel = _central_diff(lambda t: shifted(t).kernel, h)
        errors[f"kernel_{name}"] = _rel_err((1 + corrupt) * model.kernel_grads[j], fd_kernel, 1e-10)
        fd_fid = _central_diff(lambda t: fidelity(y, x, shifted(t), sigma2), h)
        errors[f"fidelity_{name}"] = _rel_err((1 + corrupt) * fg.grad_alpha[j], fd_fid, 1e-6 * (1 + f0))

    h = rel_step * sigma2
    fd_s2 = _central_diff(lambda t: fidelity(y, x, model, sigma2 + t), h)
    errors["fidelity_sigma2"] = _rel_err(fg.grad_sigma2, fd_s2, 1e-6 * (1 + f0) / sigma2)

    worst = 0.0
    for _ in range(3):
        direction = rng.standard_normal(model.shape)
        direction /= np.linalg.norm(direction)
        h = rel_step * max(float(np.linalg.norm(x)), 1.0)
        fd_x = _central_diff(lambda t: fidelity(y, x + t * direction, model, sigma2), h)
        worst = max(worst, _rel_err(float(np.sum(fg.grad_x * direction)), fd_x, 1e-6 * (1 + f0) / np.linalg.norm(x)))
    errors["fidelity_x"] = worst

    passed = all(e < tolerance for e in errors.values())
    return GradcheckReport(family.value, list(model.alpha), errors, tolerance, passed)


# --------------------------------------------------------------------------
# Model selection
# --------------------------------------------------------------------------


@dataclass
class FamilyOutcome:
    family: str
    theta_bar: float | None = None
    alpha_bar: list | None = None
    sigma2_bar: float | None = None
    residual: float | None = None
    map_psnr: float | None = None
    error: str | None = None


@dataclass
class ModelSelectionReport:
    outcomes: list
    selected: str | None

    def to_dict(self) -> dict:
        return {"selected": self.selected, "outcomes": [asdict(o) for o in self.outcomes]}


def _calibrate_and_solve(task) -> tuple[SapgResult, np.ndarray]:
    y, family, domain, prior, config, map_config, dual = task
    calibrate = sapg_calibrate_dual if dual else sapg_calibrate
    result = calibrate(y, family, domain, prior, config)
    p = result.params
    model = BlurModel(family, p.alpha, y.shape)
    x_map = map_estimate(y, p.theta, model, p.sigma2, map_config).x
    return result, x_map


def _family_task(args) -> FamilyOutcome:
    y, family, config, map_config, bsnr_range, x_true = args
    outcome = FamilyOutcome(family.value)
    try:
        domain = HyperDomain.from_observation(y, family, bsnr_range)
        result, x_map = _calibrate_and_solve((y, family, domain, PriorSpec(), config, map_config, False))
    except (CalibrationError, ValueError, FloatingPointError) as exc:
        outcome.error = str(exc)
        return outcome
    p = result.params
    model = BlurModel(family, p.alpha, y.shape)
    r = apply(model, x_map) - y
    outcome.theta_bar, outcome.alpha_bar, outcome.sigma2_bar = p.theta, list(p.alpha), p.sigma2
    outcome.residual = float(np.sum(r * r))
    if x_true is not None:
        outcome.map_psnr = psnr(x_map, x_true)
    return outcome


def _pool_map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def select_model(
    y,
    families,
    configs: dict | None = None,
    map_config: MapConfig | None = None,
    bsnr_range=(15.0, 45.0),
    x_true=None,
    workers: int = 1,
) -> ModelSelectionReport:
    """Calibrate and deconvolve under each family; pick the smallest residual ``||y - H x_map||^2``.

    ``configs`` maps family to its SAPG configuration (desk presets by
    default).  Failures are recorded per family; ties go to the family listed
    first.
    """
    y = as_image(y, "y")
    families = [KernelFamily.parse(f) for f in families]
    if not families:
        raise ValueError("need at least one candidate family")
    configs = configs or {}
    tasks = [
        (y, f, configs.get(f) or desk_config(f), map_config or MapConfig(), bsnr_range, x_true)
        for f in families
    ]
    outcomes = _pool_map(_family_task, tasks, workers)
    ok = [(o.residual, i) for i, o in enumerate(outcomes) if o.error is None]
    if not ok:
        raise CalibrationError("every candidate family failed: " + "; ".join(o.error for o in outcomes))
    selected = outcomes[min(ok)[1]].family
    order = sorted(range(len(outcomes)), key=lambda i: (outcomes[i].residual is None, outcomes[i].residual or 0.0, i))
    return ModelSelectionReport([outcomes[i] for i in order], selected)


# --------------------------------------------------------------------------
# Robustness sweeps
# --------------------------------------------------------------------------

SWEEP_PARAMETERS = ("theta0", "alpha0", "lipschitz_scale", "delta_scale")


def _apply_sweep_value(config: SapgConfig, parameter: str, value) -> SapgConfig:
    if parameter == "theta0":
        return replace(config, theta0=float(value))
    if parameter == "alpha0":
        return replace(config, alpha0=tuple(float(v) for v in np.atleast_1d(value)))
    if parameter == "lipschitz_scale":
        return replace(config, lipschitz_scale=float(value), strict_stability=False)
    if parameter == "delta_scale":
        s = config.delta_scales
        k = float(value)
        return replace(config, delta_scales=DeltaScales(s.theta * k, s.alpha * k, s.sigma2 * k))
    raise ValueError(f"unknown sweep parameter {parameter!r}; choose from {SWEEP_PARAMETERS}")


@dataclass
class SweepRun:
    value: object
    result: SapgResult | None = None
    error: str | None = None


def _sweep_task(args) -> SweepRun:
    y, family, domain, config, value = args
    try:
        return SweepRun(value, sapg_calibrate(y, family, domain, PriorSpec(), config))
    except (CalibrationError, ValueError) as exc:
        return SweepRun(value, error=str(exc))


def sweep(y, family, parameter: str, values, base_config: SapgConfig, domain: HyperDomain | None = None, workers: int = 1) -> list[SweepRun]:
    """One independent calibration per value; every run shares ``base_config.seed``."""
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"unknown sweep parameter {parameter!r}; choose from {SWEEP_PARAMETERS}")
    y = as_image(y, "y")
    family = KernelFamily.parse(family)
    domain = domain or HyperDomain.from_observation(y, family)
    values = list(values)
    for v in values:
        if not np.all(np.isfinite(np.atleast_1d(np.asarray(v, dtype=np.float64)))):
            raise ValueError(f"sweep value {v!r} is not finite")
    tasks = [(y, family, domain, _apply_sweep_value(base_config, parameter, v), v) for v in values]
    return _pool_map(_sweep_task, tasks, workers)


def write_sweep_csv(runs: list[SweepRun], parameter: str, path) -> None:
    """Long-format iterate table: one row per (value, iteration, quantity)."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "value", "n", "quantity", "iterate"])
        for run in runs:
            if run.result is None:
                continue
            tag = json.dumps(run.value if not isinstance(run.value, tuple) else list(run.value))
            trace = run.result.trace
            names = ["theta", *[f"alpha_{j + 1}" for j in range(trace.param_dim)], "sigma2"]
            for i, row in enumerate(trace.iterates()):
                for name, v in zip(names, row):
                    writer.writerow([parameter, tag, i + 1, name, repr(float(v))])


# --------------------------------------------------------------------------
# Reference theta (PSNR-optimal) under the true blur and noise
# --------------------------------------------------------------------------


@dataclass
class ThetaSweep:
    theta_star: float
    psnr_star: float
    grid: list = field(default_factory=list)


def theta_psnr_sweep(x_true, y, model: BlurModel, sigma2: float, thetas=None, map_config: MapConfig | None = None, refine: bool = True) -> ThetaSweep:
    """The ``theta`` maximizing MAP reconstruction PSNR, by grid search and a bounded refinement."""
    thetas = np.geomspace(1e-3, 1.0, 13) if thetas is None else np.asarray(thetas, dtype=np.float64)
    cfg = map_config or MapConfig()

    def score(theta):
        return psnr(map_estimate(y, theta, model, sigma2, cfg).x, x_true)

    grid = [(float(t), score(t)) for t in thetas]
    k = int(np.argmax([p for _, p in grid]))
    best = grid[k]
    if refine and len(grid) > 2:
        lo = math.log(grid[max(k - 1, 0)][0])
        hi = math.log(grid[min(k + 1, len(grid) - 1)][0])
        opt = minimize_scalar(lambda s: -score(math.exp(s)), bounds=(lo, hi), method="bounded", options={"xatol": 1e-2})
        if -opt.fun > best[1]:
            best = (math.exp(opt.x), -opt.fun)
    return ThetaSweep(best[0], best[1], grid)


# --------------------------------------------------------------------------
# Experiment configuration
# --------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    image: object = field(default_factory=lambda: dict(DESK_IMAGE))
    family: str = "gaussian"
    true_alpha: list | None = None
    bsnr_db: float = 30.0
    bsnr_range: tuple = (15.0, 45.0)
    theta_box: tuple = (1e-3, 1.0)
    sapg: dict = field(default_factory=dict)
    map: dict = field(default_factory=dict)
    preset: str = "desk"
    seed: int = 0
    out_dir: str = "out"
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError("config must be a JSON object")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version}; expected {SCHEMA_VERSION}")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        family = KernelFamily.parse(self.family)
        if self.preset not in ("desk", "full"):
            raise ValueError("preset must be 'desk' or 'full'")
        if self.true_alpha is not None and len(self.true_alpha) != family.param_dim:
            raise ValueError(f"true_alpha needs {family.param_dim} entries for {family.value}")
        lo, hi = self.bsnr_range
        if not lo < hi:
            raise ValueError("bsnr_range must be increasing")
        self.sapg_config()
        self.map_config()

    @property
    def kernel_family(self) -> KernelFamily:
        return KernelFamily.parse(self.family)

    def alpha_star(self) -> tuple:
        if self.true_alpha is not None:
            return tuple(self.true_alpha)
        return FAMILY_PRESETS[self.kernel_family]["true_alpha"]

    def sapg_config(self, family=None) -> SapgConfig:
        family = KernelFamily.parse(family or self.family)
        overrides = dict(self.sapg)
        overrides.setdefault("seed", self.seed)
        if family is not self.kernel_family:
            overrides.pop("alpha0", None)
        if self.preset == "desk":
            return desk_config(family, **overrides)
        return preset_config(family, **overrides)

    def map_config(self) -> MapConfig:
        return MapConfig(**self.map)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["bsnr_range"] = list(self.bsnr_range)
        out["theta_box"] = list(self.theta_box)
        return out


def repro_config(table: str, scale: str = "desk", seed: int = 0) -> ExperimentConfig:
    """Configuration reproducing one of the published calibration tables."""
    if table not in REPRO_TABLES:
        raise ValueError(f"unknown table {table!r}; choose from {sorted(REPRO_TABLES)}")
    family = REPRO_TABLES[table]
    image = dict(DESK_IMAGE) if scale == "desk" else dict(FULL_IMAGE)
    return ExperimentConfig(image=image, family=family.value, preset=scale, seed=seed)
