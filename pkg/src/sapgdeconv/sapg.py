"""Stochastic approximation proximal gradient (SAPG) calibration.

The calibrator maximizes the marginal likelihood ``p(y | theta, alpha, sigma2)``
by projected stochastic gradient ascent.  Gradients come from Fisher's
identity and are estimated with samples from a MYULA chain that is warm-started
across iterations:

    Delta_theta  = d / (q theta) - mean g(X)
    Delta_alpha  = -mean grad_alpha f(X)
    Delta_sigma2 = -mean [grad_sigma2 f(X) + d / (2 sigma2)]

For potentials without a homogeneity degree, ``sapg_calibrate_dual`` replaces
``d / (q theta)`` with the mean of ``g`` over a second, prior-only chain.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .imaging import as_image, sigma2_bounds_from_bsnr
from .kernels import BlurModel, KernelFamily
from .myula import (
    ChainState,
    ChainStats,
    UnstableStepError,
    default_lambda,
    default_step,
    myula_run,
    stable_step_bound,
)
from .prior import THETA_BOX, PriorSpec, grad_log_z

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HyperParams:
    theta: float
    alpha: tuple[float, ...]
    sigma2: float

    def __post_init__(self):
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "alpha", tuple(float(a) for a in np.atleast_1d(self.alpha)))
        object.__setattr__(self, "sigma2", float(self.sigma2))

    def to_vector(self) -> np.ndarray:
        return np.array([self.theta, *self.alpha, self.sigma2])

    @classmethod
    def from_vector(cls, v) -> "HyperParams":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[0], tuple(v[1:-1]), v[-1])

    def to_dict(self) -> dict:
        return {"theta": self.theta, "alpha": list(self.alpha), "sigma2": self.sigma2}


@dataclass(frozen=True)
class HyperDomain:
    """Hyper-rectangle of admissible ``(theta, alpha, sigma2)``."""

    theta_box: tuple[float, float]
    alpha_box: tuple[tuple[float, float], ...]
    sigma2_box: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "theta_box", tuple(map(float, self.theta_box)))
        object.__setattr__(self, "alpha_box", tuple(tuple(map(float, b)) for b in self.alpha_box))
        object.__setattr__(self, "sigma2_box", tuple(map(float, self.sigma2_box)))
        for name, (lo, hi) in self._named_boxes():
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"invalid box for {name}: [{lo}, {hi}]")
        if self.theta_box[0] <= 0 or self.sigma2_box[0] <= 0:
            raise ValueError("theta and sigma2 boxes must be strictly positive")

    def _named_boxes(self):
        yield "theta", self.theta_box
        for j, b in enumerate(self.alpha_box):
            yield f"alpha_{j + 1}", b
        yield "sigma2", self.sigma2_box

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for _, b in self._named_boxes()])

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for _, b in self._named_boxes()])

    def midpoint(self) -> HyperParams:
        return HyperParams.from_vector(0.5 * (self.lower + self.upper))

    def project(self, params: HyperParams) -> HyperParams:
        return HyperParams.from_vector(project_box(params.to_vector(), self))

    @classmethod
    def for_family(cls, family, sigma2_box, theta_box=THETA_BOX) -> "HyperDomain":
        return cls(theta_box, KernelFamily.parse(family).default_box, sigma2_box)

    @classmethod
    def from_observation(cls, y, family, bsnr_range=(15.0, 45.0), theta_box=THETA_BOX) -> "HyperDomain":
        """Boxes with the noise range derived from a BSNR interval, using ``y`` as a proxy for ``Hx``."""
        s_max, s_min = sigma2_bounds_from_bsnr(y, *bsnr_range)
        return cls.for_family(family, (s_min, s_max), theta_box)

    def to_dict(self) -> dict:
        return {
            "theta_box": list(self.theta_box),
            "alpha_box": [list(b) for b in self.alpha_box],
            "sigma2_box": list(self.sigma2_box),
        }


def project_box(v, domain: HyperDomain) -> np.ndarray:
    """Euclidean projection onto the box, i.e. a componentwise clamp."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != domain.lower.shape:
        raise ValueError(f"vector of length {v.size} does not match domain of dimension {domain.lower.size}")
    return np.clip(v, domain.lower, domain.upper)


def delta_schedule(n: int, kappa: float, d: int, scale: float = 1.0) -> float:
    """Step size ``scale * n**(-kappa) / d``."""
    if n < 1:
        raise ValueError("schedule index starts at 1")
    return scale * n ** (-kappa) / d


@dataclass(frozen=True)
class DeltaScales:
    theta: float = 0.001
    alpha: float = 10.0
    sigma2: float = 1000.0


@dataclass
class SapgConfig:
    n_iterations: int = 30_000
    burn_in: int | None = None
    warmup_steps: int = 30_000
    batch: int = 1
    kappa: float = 0.8
    delta_offset: int = 0
    delta_scales: DeltaScales = field(default_factory=DeltaScales)
    gamma: float | None = None
    gamma_policy: str = "fixed"
    lam: float | None = None
    lam_max: float = 2.0
    lipschitz_scale: float = 1.0
    strict_stability: bool = True
    stop_tol: float = 1e-5
    stop_check_every: int = 100
    early_stop: bool = True
    theta0: float = 0.01
    alpha0: tuple[float, ...] | None = None
    sigma2_0: float | None = None
    estimate_theta: bool = True
    estimate_alpha: bool = True
    estimate_sigma2: bool = True
    dual_gamma: float | None = None
    dual_lam: float | None = None
    seed: int = 0
    record_timing: bool = False

    def __post_init__(self):
        if isinstance(self.delta_scales, dict):
            self.delta_scales = DeltaScales(**self.delta_scales)
        if self.alpha0 is not None:
            self.alpha0 = tuple(float(a) for a in np.atleast_1d(self.alpha0))
        if self.n_iterations < 0 or self.warmup_steps < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.delta_offset < 0:
            raise ValueError("delta_offset must be nonnegative")
        if not 0.5 <= self.kappa <= 0.9:
            raise ValueError("kappa must lie in [0.5, 0.9]")
        if not self.stop_tol > 0:
            raise ValueError("stop_tol must be positive")
        if self.n_iterations > 0 and not 0 <= self.n_burn_in < self.n_iterations:
            raise ValueError("burn_in must satisfy 0 <= N0 < N")
        if self.gamma_policy not in ("fixed", "adaptive"):
            raise ValueError("gamma_policy must be 'fixed' or 'adaptive'")
        if not self.lipschitz_scale > 0:
            raise ValueError("lipschitz_scale must be positive")

    @property
    def n_burn_in(self) -> int:
        if self.burn_in is None:
            return int(0.8 * self.n_iterations)
        return self.burn_in

    def to_dict(self) -> dict:
        out = asdict(self)
        out["burn_in"] = self.n_burn_in
        if out["alpha0"] is not None:
            out["alpha0"] = list(out["alpha0"])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SapgConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown SAPG config fields: {sorted(unknown)}")
        return cls(**data)


# Per-family defaults used in the published experiments.
FAMILY_PRESETS = {
    KernelFamily.GAUSSIAN: {
        "delta_scales": DeltaScales(theta=0.001, alpha=10.0, sigma2=1000.0),
        "alpha0": (0.5, 0.5),
        "true_alpha": (0.4, 0.3),
    },
    KernelFamily.LAPLACE: {
        "delta_scales": DeltaScales(theta=0.001, alpha=100.0, sigma2=10000.0),
        "alpha0": (0.1,),
        "true_alpha": (0.3,),
    },
    KernelFamily.MOFFAT: {
        "delta_scales": DeltaScales(theta=0.1, alpha=100.0, sigma2=10000.0),
        "alpha0": (0.1, 2.5),
        "true_alpha": (0.3, 3.5),
    },
}


def preset_config(family, **overrides) -> SapgConfig:
    """The full-scale configuration for ``family``; keyword overrides win."""
    preset = FAMILY_PRESETS[KernelFamily.parse(family)]
    base = {"delta_scales": preset["delta_scales"], "alpha0": preset["alpha0"], "theta0": 0.01}
    base.update(overrides)
    return SapgConfig(**base)


@dataclass
class SapgTrace:
    """Per-iteration iterates and gradient estimates of one calibration run."""

    param_dim: int
    theta: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    sigma2: list = field(default_factory=list)
    delta_theta: list = field(default_factory=list)
    delta_alpha: list = field(default_factory=list)
    delta_sigma2: list = field(default_factory=list)
    elapsed_ms: list = field(default_factory=list)
    initial: HyperParams | None = None

    def append(self, params: HyperParams, dt: float, da: np.ndarray, ds: float, elapsed_ms: float) -> None:
        self.theta.append(params.theta)
        self.alpha.append(params.alpha)
        self.sigma2.append(params.sigma2)
        self.delta_theta.append(float(dt))
        self.delta_alpha.append(tuple(float(a) for a in da))
        self.delta_sigma2.append(float(ds))
        self.elapsed_ms.append(elapsed_ms)

    def __len__(self) -> int:
        return len(self.theta)

    def iterates(self) -> np.ndarray:
        """``(n, 2 + param_dim)`` array of ``[theta, alpha..., sigma2]`` rows."""
        if not self.theta:
            return np.empty((0, 2 + self.param_dim))
        return np.column_stack([self.theta, np.asarray(self.alpha).reshape(len(self), -1), self.sigma2])

    def average(self, burn_in: int) -> HyperParams:
        """Uniform average of the iterates after ``burn_in`` (the initial point if none remain)."""
        it = self.iterates()[burn_in:]
        if len(it) == 0:
            return self.initial
        return HyperParams.from_vector(it.mean(axis=0))

    def write_csv(self, path, include_timing: bool = False) -> None:
        k = self.param_dim
        header = ["n", "theta", *[f"alpha_{j + 1}" for j in range(k)], "sigma2", "delta_theta"]
        header += [f"delta_alpha_{j + 1}" for j in range(k)] + ["delta_sigma2"]
        if include_timing:
            header.append("elapsed_ms")
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(len(self)):
                row = [i + 1, self.theta[i], *self.alpha[i], self.sigma2[i], self.delta_theta[i]]
                row += [*self.delta_alpha[i], self.delta_sigma2[i]]
                row = [row[0], *(repr(float(v)) for v in row[1:])]
                if include_timing:
                    row.append(f"{self.elapsed_ms[i]:.3f}")
                writer.writerow(row)


@dataclass
class SapgResult:
    params: HyperParams
    trace: SapgTrace
    n_used: int
    stopped_early: bool
    gamma: float
    lam: float
    config: SapgConfig
    domain: HyperDomain
    family: KernelFamily

    def summary(self) -> dict:
        return {
            "family": self.family.value,
            "theta_bar": self.params.theta,
            "alpha_bar": list(self.params.alpha),
            "sigma2_bar": self.params.sigma2,
            "n_used": self.n_used,
            "stopped_early": self.stopped_early,
            "gamma": self.gamma,
            "lambda": self.lam,
            "config_echo": {"sapg": self.config.to_dict(), "domain": self.domain.to_dict()},
        }

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


class CalibrationError(RuntimeError):
    """A calibration run failed; ``trace`` holds the iterations completed so far."""

    def __init__(self, message: str, trace: SapgTrace | None = None):
        super().__init__(message)
        self.trace = trace


def gradient_estimates(stats: ChainStats, params: HyperParams, prior: PriorSpec, d: int, prior_stats: ChainStats | None = None):
    """Monte Carlo estimates of the marginal-likelihood gradient at ``params``.

    With ``prior_stats`` (samples from the prior-only chain) the theta estimate
    uses ``mean g(prior samples) - mean g(posterior samples)`` instead of the
    homogeneity formula.
    """
    if stats.n == 0:
        raise ValueError("no chain statistics to average")
    if prior_stats is not None:
        if prior_stats.n == 0:
            raise ValueError("no prior-chain statistics to average")
        dt = prior_stats.mean_g - stats.mean_g
    else:
        if prior.q is None:
            raise ValueError("potential has no homogeneity degree; use the dual-chain calibrator")
        dt = -grad_log_z(params.theta, d, prior.q) - stats.mean_g
    da = -stats.mean_grad_alpha
    ds = -(stats.mean_grad_sigma2 + d / (2.0 * params.sigma2))
    return dt, da, ds


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.max(np.abs(new - old) / np.maximum(np.abs(old), np.finfo(float).tiny)))


def _initial_params(family: KernelFamily, domain: HyperDomain, config: SapgConfig) -> HyperParams:
    mid = domain.midpoint()
    alpha0 = config.alpha0 if config.alpha0 is not None else mid.alpha
    if len(alpha0) != family.param_dim:
        raise ValueError(f"alpha0 has {len(alpha0)} entries, {family.value} needs {family.param_dim}")
    sigma2_0 = config.sigma2_0 if config.sigma2_0 is not None else mid.sigma2
    return domain.project(HyperParams(config.theta0, alpha0, sigma2_0))


def _step_sizes(domain: HyperDomain, config: SapgConfig) -> tuple[float, float]:
    lipschitz = config.lipschitz_scale / domain.sigma2_box[0]
    lam = config.lam if config.lam is not None else default_lambda(lipschitz, config.lam_max)
    gamma = config.gamma if config.gamma is not None else default_step(lipschitz, lam)
    if config.strict_stability and not gamma < stable_step_bound(domain.sigma2_box[0], lam):
        raise UnstableStepError(
            f"step size {gamma:.6g} is unstable at the smallest admissible sigma2 {domain.sigma2_box[0]:.6g}"
        )
    return gamma, lam


def _run(y, family, domain: HyperDomain, prior: PriorSpec, config: SapgConfig, dual: bool) -> SapgResult:
    y = as_image(y, "y")
    family = KernelFamily.parse(family)
    if len(domain.alpha_box) != family.param_dim:
        raise ValueError(f"domain has {len(domain.alpha_box)} alpha boxes, {family.value} needs {family.param_dim}")
    d = y.size
    params = _initial_params(family, domain, config)
    gamma, lam = _step_sizes(domain, config)
    chain_prior = replace(prior, lam=lam)
    trace = SapgTrace(param_dim=family.param_dim, initial=params)

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    state = ChainState.start(y, seeds[0], chain_prior)
    prior_state = prior_chain = None
    gamma_p = lam_p = None
    if dual:
        lam_p = config.dual_lam if config.dual_lam is not None else lam
        gamma_p = config.dual_gamma if config.dual_gamma is not None else 0.98 * lam_p
        prior_chain = replace(prior, lam=lam_p)
        prior_state = ChainState.start(y, seeds[1], prior_chain)

    scales = config.delta_scales
    mask = np.array(
        [config.estimate_theta] + [config.estimate_alpha] * family.param_dim + [config.estimate_sigma2],
        dtype=np.float64,
    )
    burn_in = config.n_burn_in
    running_sum = np.zeros(2 + family.param_dim)
    last_avg = None
    stopped_early = False
    t_start = time.perf_counter()

    try:
        model = BlurModel(family, params.alpha, y.shape)
        if config.gamma_policy == "adaptive":
            gamma = default_step(config.lipschitz_scale / params.sigma2, lam)
        myula_run(state, y, model, params.sigma2, params.theta, chain_prior, gamma, config.warmup_steps, collect=False)
        if dual:
            myula_run(prior_state, None, None, None, params.theta, prior_chain, gamma_p, config.warmup_steps,
                      include_fidelity=False, collect=False)
        for n in range(1, config.n_iterations + 1):
            model = model.with_alpha(params.alpha) if model.alpha != params.alpha else model
            if config.gamma_policy == "adaptive":
                gamma = default_step(config.lipschitz_scale / params.sigma2, lam)
            _, stats = myula_run(state, y, model, params.sigma2, params.theta, chain_prior, gamma, config.batch)
            prior_stats = None
            if dual:
                _, prior_stats = myula_run(prior_state, None, None, None, params.theta, prior_chain, gamma_p,
                                           config.batch, include_fidelity=False)
            dt, da, ds = gradient_estimates(stats, params, prior, d, prior_stats)
            step = np.array(
                [delta_schedule(n + config.delta_offset, config.kappa, d, scales.theta)]
                + [delta_schedule(n + config.delta_offset, config.kappa, d, scales.alpha)] * family.param_dim
                + [delta_schedule(n + config.delta_offset, config.kappa, d, scales.sigma2)]
            )
            grad = np.concatenate([[dt], da, [ds]])
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError(f"non-finite gradient estimate at iteration {n}")
            params = HyperParams.from_vector(project_box(params.to_vector() + mask * step * grad, domain))
            elapsed = (time.perf_counter() - t_start) * 1e3 if config.record_timing else 0.0
            trace.append(params, dt, da, ds, elapsed)

            if n > burn_in:
                running_sum += params.to_vector()
                if config.early_stop and (n - burn_in) % config.stop_check_every == 0:
                    avg = running_sum / (n - burn_in)
                    if last_avg is not None and _relative_change(avg, last_avg) < config.stop_tol:
                        stopped_early = n < config.n_iterations
                        break
                    last_avg = avg
    except (UnstableStepError, FloatingPointError, ValueError) as exc:
        raise CalibrationError(f"calibration failed after {len(trace)} iterations: {exc}", trace) from exc

    n_used = len(trace)
    result = trace.average(burn_in)
    log.info("sapg %s finished after %d iterations (early stop: %s)", family.value, n_used, stopped_early)
    return SapgResult(result, trace, n_used, stopped_early, gamma, lam, config, domain, family)


def sapg_calibrate(y, family, domain: HyperDomain, prior: PriorSpec | None = None, config: SapgConfig | None = None) -> SapgResult:
    """Estimate ``(theta, alpha, sigma2)`` from a single observation ``y``.

    Runs ``warmup_steps`` MYULA transitions at the initial point, then
    ``n_iterations`` projected stochastic-gradient updates, and returns the
    average of the iterates after the burn-in.
    """
    return _run(y, family, domain, prior or PriorSpec(), config or SapgConfig(), dual=False)


def sapg_calibrate_dual(y, family, domain: HyperDomain, prior: PriorSpec | None = None, config: SapgConfig | None = None) -> SapgResult:
    """Like :func:`sapg_calibrate`, but with a second prior-only chain for the theta gradient."""
    return _run(y, family, domain, prior or PriorSpec(), config or SapgConfig(), dual=True)


BOUNDARY_TOL = 1e-12


@dataclass
class ScheduleReport:
    regime: str
    conditions: dict
    valid: bool
    b_interval: tuple[float, float] | None = None
    interval_nonempty: bool | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.b_interval is not None:
            out["b_interval"] = list(self.b_interval)
        return out


def validate_schedule(a: float, b: float, c: float = 0.0, regime: str = "increasing_batch") -> ScheduleReport:
    """Check the step-size and batch-size exponent conditions for convergence.

    With ``gamma_n ~ n**-b``, ``delta_n ~ n**-a`` and ``m_n ~ n**c``, the
    increasing-batch regime requires ``a < 1``, ``a + b/2 > 1`` and
    ``a - b + c > 1``.  With a fixed batch the admissible ``b`` is the open
    interval ``(2(1 - a), a - 1/2)``, nonempty exactly when ``a > 5/6``.
    """
    if regime == "increasing_batch":
        conds = {"a<1": a < 1, "a+b/2>1": a + b / 2 > 1, "a-b+c>1": a - b + c > 1}
        return ScheduleReport(regime, conds, all(conds.values()))
    if regime == "fixed_batch":
        lo, hi = 2.0 * (1.0 - a), a - 0.5
        # hi - lo = 3a - 5/2; inputs within round-off of a = 5/6 count as the boundary
        nonempty = 3.0 * a - 2.5 > BOUNDARY_TOL
        conds = {"a<1": a < 1, "b>2(1-a)": b > lo, "b<a-1/2": b < hi}
        return ScheduleReport(regime, conds, all(conds.values()) and nonempty, (lo, hi), nonempty)
    raise ValueError(f"unknown regime {regime!r}; use 'increasing_batch' or 'fixed_batch'")
