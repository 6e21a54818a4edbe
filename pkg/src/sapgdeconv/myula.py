"""Moreau-Yosida regularized unadjusted Langevin transitions.

One step of the chain targeting ``exp(-f(x) - theta g^lam(x))`` reads

    x' = (1 - gamma/lam) x - gamma grad f(x) + (gamma/lam) prox_{theta lam g}(x)
         + sqrt(2 gamma) z,

with ``z`` standard normal.  Dropping the fidelity gives the prior-only chain.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import as_image
from .kernels import BlurModel, fidelity_gradients
from .prior import PriorSpec


class UnstableStepError(ValueError):
    """The Langevin step size violates ``gamma * (L + 1/lam) < 1``."""


def make_rng(seed) -> np.random.Generator:
    """A PCG64 generator seeded through ``SeedSequence`` (spawnable, reproducible)."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


@dataclass
class ChainState:
    x: np.ndarray
    rng: np.random.Generator
    step_count: int = 0
    workspace: object = None
    _grad_cache: tuple | None = field(default=None, repr=False)

    @classmethod
    def start(cls, x0, seed, prior: PriorSpec | None = None) -> "ChainState":
        x0 = as_image(x0, "x0").copy()
        rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
        ws = prior.potential.new_workspace(x0.shape) if prior is not None else None
        return cls(x=x0, rng=rng, workspace=ws)


def stable_step_bound(sigma2: float | None, lam: float, include_fidelity: bool = True) -> float:
    """Supremum of admissible step sizes ``1 / (L + 1/lam)``; ``L = 1/sigma2`` for unit-gain blur."""
    lip = 1.0 / sigma2 if include_fidelity else 0.0
    return 1.0 / (lip + 1.0 / lam)


def default_step(lipschitz: float, lam: float) -> float:
    return 0.98 / (lipschitz + 1.0 / lam)


def default_lambda(lipschitz: float, lam_max: float = 2.0) -> float:
    return min(5.0 / lipschitz, lam_max)


def _check_step(gamma: float, sigma2: float | None, lam: float, include_fidelity: bool) -> None:
    if not lam > 0:
        raise UnstableStepError("smoothing parameter lam must be positive")
    bound = stable_step_bound(sigma2, lam, include_fidelity)
    if not 0 < gamma < bound:
        raise UnstableStepError(f"step size {gamma:.6g} outside the stable range (0, {bound:.6g})")


def _grad_x(state: ChainState, y, model: BlurModel, sigma2: float) -> np.ndarray:
    key = (id(y), model, sigma2, state.step_count)
    if state._grad_cache is not None and state._grad_cache[0] == key:
        return state._grad_cache[1]
    return fidelity_gradients(y, state.x, model, sigma2, want_alpha=False).grad_x


def myula_step(
    state: ChainState,
    y,
    model: BlurModel | None,
    sigma2: float | None,
    theta: float,
    prior: PriorSpec,
    gamma: float,
    include_fidelity: bool = True,
) -> ChainState:
    """Advance the chain by one transition, in place, and return it."""
    lam = prior.lam
    _check_step(gamma, sigma2, lam, include_fidelity)
    x = state.x
    drift = (1.0 - gamma / lam) * x
    drift += (gamma / lam) * prior.potential.prox(x, theta * lam, state.workspace)
    if include_fidelity:
        drift -= gamma * _grad_x(state, y, model, sigma2)
    drift += math.sqrt(2.0 * gamma) * state.rng.standard_normal(x.shape)
    if not np.all(np.isfinite(drift)):
        raise FloatingPointError(f"non-finite chain state after step {state.step_count + 1}")
    state.x = drift
    state.step_count += 1
    state._grad_cache = None
    return state


@dataclass
class ChainStats:
    """Running sums of the per-sample quantities the calibrator averages."""

    n: int = 0
    sum_g: float = 0.0
    sum_grad_alpha: np.ndarray | None = None
    sum_grad_sigma2: float = 0.0
    records: list | None = None

    def add(self, g_value: float, grad_alpha: np.ndarray, grad_sigma2: float, step: int) -> None:
        self.n += 1
        self.sum_g += g_value
        if self.sum_grad_alpha is None:
            self.sum_grad_alpha = np.zeros_like(grad_alpha, dtype=np.float64)
        self.sum_grad_alpha += grad_alpha
        self.sum_grad_sigma2 += grad_sigma2
        if self.records is not None:
            self.records.append((step, g_value, *map(float, grad_alpha), grad_sigma2))

    @property
    def mean_g(self) -> float:
        return self.sum_g / self.n

    @property
    def mean_grad_alpha(self) -> np.ndarray:
        return self.sum_grad_alpha / self.n

    @property
    def mean_grad_sigma2(self) -> float:
        return self.sum_grad_sigma2 / self.n

    def write_csv(self, path, param_dim: int) -> None:
        if self.records is None:
            raise ValueError("statistics were collected without record=True")
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["step", "g_value", *[f"grad_alpha_{j + 1}" for j in range(param_dim)], "grad_sigma2"]
            )
            for row in self.records:
                writer.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def sample_statistics(state: ChainState, y, model, sigma2, prior: PriorSpec, stats: ChainStats, include_fidelity=True):
    """Evaluate g, grad_alpha f and grad_sigma2 f at the current sample and accumulate them."""
    g_value = prior.potential.value(state.x)
    if include_fidelity:
        fg = fidelity_gradients(y, state.x, model, sigma2, want_x=True, want_alpha=True)
        state._grad_cache = ((id(y), model, sigma2, state.step_count), fg.grad_x)
        stats.add(g_value, fg.grad_alpha, fg.grad_sigma2, state.step_count)
    else:
        stats.add(g_value, np.zeros(0), 0.0, state.step_count)


def myula_run(
    state: ChainState,
    y,
    model: BlurModel | None,
    sigma2: float | None,
    theta: float,
    prior: PriorSpec,
    gamma: float,
    n_steps: int,
    thinning: int = 1,
    include_fidelity: bool = True,
    collect: bool = True,
    record: bool = False,
) -> tuple[ChainState, ChainStats]:
    """Run ``n_steps`` transitions; accumulate statistics on every ``thinning``-th sample."""
    if n_steps < 0 or thinning < 1:
        raise ValueError("n_steps must be >= 0 and thinning >= 1")
    stats = ChainStats(records=[] if record else None)
    for k in range(1, n_steps + 1):
        myula_step(state, y, model, sigma2, theta, prior, gamma, include_fidelity)
        if collect and k % thinning == 0:
            sample_statistics(state, y, model, sigma2, prior, stats, include_fidelity)
    return state, stats
