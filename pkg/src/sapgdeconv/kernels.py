"""Parametric blur kernels, the circulant blur operator and the data-fidelity term.

Each family is a closed-form density sampled at integer offsets on an
``s x s`` support and renormalized to unit sum, so the operator always has DC
gain one.  Parameter gradients are those of the *normalized* discrete kernel:
writing ``h`` for the raw samples and ``s_j = d log h / d alpha_j`` for the
per-offset score, the normalized kernel ``k = h / sum(h)`` has

    dk / d alpha_j = k * (s_j - sum(k * s_j)),

which is why every gradient kernel sums to zero.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

from .imaging import as_image, fft2, ifft2, rfft_weights, spectral_inner

DEFAULT_SUPPORT = 7


class KernelFamily(str, Enum):
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"
    MOFFAT = "moffat"

    @property
    def param_names(self) -> tuple[str, ...]:
        return _PARAM_NAMES[self]

    @property
    def param_dim(self) -> int:
        return len(_PARAM_NAMES[self])

    @property
    def default_box(self) -> tuple[tuple[float, float], ...]:
        return _DEFAULT_BOX[self]

    @classmethod
    def parse(cls, value) -> "KernelFamily":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown kernel family {value!r}; choose from {[f.value for f in cls]}"
            ) from None


_PARAM_NAMES = {
    KernelFamily.GAUSSIAN: ("alpha_h", "alpha_v"),
    KernelFamily.LAPLACE: ("alpha",),
    KernelFamily.MOFFAT: ("alpha_1", "alpha_2"),
}

_DEFAULT_BOX = {
    KernelFamily.GAUSSIAN: ((0.01, 1.0), (0.01, 1.0)),
    KernelFamily.LAPLACE: ((0.01, 1.0),),
    KernelFamily.MOFFAT: ((0.01, 1.0), (1.0, 5.0)),
}


def _offsets(support: int) -> tuple[np.ndarray, np.ndarray]:
    """Vertical (row) offsets ``t`` and horizontal (column) offsets ``v``."""
    half = support // 2
    r = np.arange(-half, half + 1, dtype=np.float64)
    t, v = np.meshgrid(r, r, indexing="ij")
    return t, v


def _log_density_and_scores(family: KernelFamily, alpha, support: int):
    t, v = _offsets(support)
    if family is KernelFamily.GAUSSIAN:
        ah, av = alpha
        logh = np.log(ah * av / (2 * np.pi)) - 0.5 * (ah**2 * v**2 + av**2 * t**2)
        scores = [1.0 / ah - ah * v**2, 1.0 / av - av * t**2]
    elif family is KernelFamily.LAPLACE:
        (a,) = alpha
        l1 = np.abs(v) + np.abs(t)
        logh = np.log(a**2 / 4.0) - a * l1
        scores = [2.0 / a - l1]
    else:
        a1, a2 = alpha
        r2 = v**2 + t**2
        base = a2 + a1**2 * r2
        logh = np.log(a1**2 / (2 * np.pi)) - 0.5 * (a2 + 2) * np.log1p(a1**2 * r2 / a2)
        scores = [
            2.0 / a1 - (a2 + 2) * a1 * r2 / base,
            -0.5 * np.log1p(a1**2 * r2 / a2) + (a2 + 2) * a1**2 * r2 / (2 * a2 * base),
        ]
    return logh, scores


def _check_alpha(family: KernelFamily, alpha) -> tuple[float, ...]:
    alpha = tuple(float(a) for a in np.atleast_1d(np.asarray(alpha, dtype=np.float64)))
    if len(alpha) != family.param_dim:
        raise ValueError(f"{family.value} expects {family.param_dim} parameters, got {len(alpha)}")
    if not all(np.isfinite(a) and a > 0 for a in alpha):
        raise ValueError(f"{family.value} parameters must be positive and finite, got {alpha}")
    return alpha


def embed_kernel(kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Zero-pad a centered odd-sized kernel to ``shape`` with its center at (0, 0)."""
    s = kernel.shape[0]
    if s > shape[0] or s > shape[1]:
        raise ValueError(f"kernel support {s} exceeds image dims {shape}")
    out = np.zeros(shape)
    out[:s, :s] = kernel
    return np.roll(out, (-(s // 2), -(s // 2)), axis=(0, 1))


@dataclass(frozen=True)
class BlurModel:
    """A kernel family at a fixed parameter value, realized on an image grid."""

    family: KernelFamily
    alpha: tuple[float, ...]
    shape: tuple[int, int]
    support: int = DEFAULT_SUPPORT

    def __post_init__(self):
        family = KernelFamily.parse(self.family)
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "alpha", _check_alpha(family, self.alpha))
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))
        if self.support < 1 or self.support % 2 == 0:
            raise ValueError("support must be an odd positive integer")
        if self.support > min(self.shape):
            raise ValueError(f"support {self.support} exceeds image dims {self.shape}")

    def with_alpha(self, alpha) -> "BlurModel":
        return BlurModel(self.family, alpha, self.shape, self.support)

    @property
    def d(self) -> int:
        return self.shape[0] * self.shape[1]

    @cached_property
    def kernel(self) -> np.ndarray:
        logh, _ = _log_density_and_scores(self.family, self.alpha, self.support)
        h = np.exp(logh - logh.max())
        return h / h.sum()

    @cached_property
    def kernel_grads(self) -> list[np.ndarray]:
        _, scores = _log_density_and_scores(self.family, self.alpha, self.support)
        k = self.kernel
        return [k * (s - np.sum(k * s)) for s in scores]

    @cached_property
    def otf(self) -> np.ndarray:
        return fft2(embed_kernel(self.kernel, self.shape))

    @cached_property
    def grad_otfs(self) -> list[np.ndarray]:
        return [fft2(embed_kernel(g, self.shape)) for g in self.kernel_grads]


def kernel_eval(model: BlurModel) -> np.ndarray:
    """The normalized ``s x s`` kernel, centered."""
    return model.kernel.copy()


def kernel_grad(model: BlurModel) -> list[np.ndarray]:
    """Gradients of the normalized kernel, one ``s x s`` array per parameter."""
    return [g.copy() for g in model.kernel_grads]


def kernel_l1_distance(a: BlurModel, b: BlurModel) -> float:
    """Sum of absolute kernel differences over the common support."""
    if a.support != b.support:
        raise ValueError("kernels must share a support size")
    return float(np.sum(np.abs(a.kernel - b.kernel)))


def _check_dims(model: BlurModel, x: np.ndarray) -> np.ndarray:
    x = as_image(x)
    if x.shape != model.shape:
        raise ValueError(f"dimension mismatch: image {x.shape} vs model {model.shape}")
    return x


def apply(model: BlurModel, x) -> np.ndarray:
    """Circular convolution ``H(alpha) x``."""
    x = _check_dims(model, x)
    return ifft2(model.otf * fft2(x), model.shape)


def apply_adjoint(model: BlurModel, x) -> np.ndarray:
    """Circular correlation ``H(alpha)^T x``."""
    x = _check_dims(model, x)
    return ifft2(np.conj(model.otf) * fft2(x), model.shape)


def _check_sigma2(sigma2: float) -> float:
    sigma2 = float(sigma2)
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    return sigma2


def fidelity(y, x, model: BlurModel, sigma2: float) -> float:
    """``||y - H(alpha) x||^2 / (2 sigma2)``."""
    sigma2 = _check_sigma2(sigma2)
    y = _check_dims(model, y)
    r = apply(model, x) - y
    return float(np.sum(r * r)) / (2.0 * sigma2)


@dataclass
class FidelityGradients:
    grad_x: np.ndarray | None
    grad_alpha: np.ndarray
    grad_sigma2: float
    residual_sq: float


def fidelity_gradients(
    y, x, model: BlurModel, sigma2: float, *, want_x: bool = True, want_alpha: bool = True
) -> FidelityGradients:
    """Gradients of the fidelity w.r.t. the image, the kernel parameters and sigma2.

    The parameter gradient uses ``d(Hx)/d alpha_j = F^-1(F(dk_j) * F(x))`` and
    is contracted with the residual in the Fourier domain (Parseval).
    """
    sigma2 = _check_sigma2(sigma2)
    y = _check_dims(model, y)
    x = _check_dims(model, x)
    xf = fft2(x)
    r = ifft2(model.otf * xf, model.shape) - y
    res2 = float(np.sum(r * r))
    grad_x = None
    grad_alpha = np.zeros(model.family.param_dim)
    if want_x or want_alpha:
        rf = fft2(r)
    if want_x:
        grad_x = ifft2(np.conj(model.otf) * rf, model.shape) / sigma2
    if want_alpha:
        w = rfft_weights(model.shape)
        for j, gotf in enumerate(model.grad_otfs):
            grad_alpha[j] = spectral_inner(gotf * xf, rf, w, model.d) / sigma2
    return FidelityGradients(
        grad_x=grad_x,
        grad_alpha=grad_alpha,
        grad_sigma2=-res2 / (2.0 * sigma2**2),
        residual_sq=res2,
    )


def lipschitz_bound(
    family,
    alpha_box,
    sigma2_min: float,
    *,
    support: int = DEFAULT_SUPPORT,
    shape: tuple[int, int] = (32, 32),
    grid: int = 16,
) -> float:
    """Lipschitz constant of the image gradient of the fidelity over an alpha box.

    The spectral radius of a nonnegative unit-sum kernel is attained at DC and
    equals one, so the answer is ``1 / sigma2_min``; the grid sweep confirms it.
    """
    family = KernelFamily.parse(family)
    sigma2_min = _check_sigma2(sigma2_min)
    alpha_box = [tuple(map(float, b)) for b in alpha_box]
    if len(alpha_box) != family.param_dim or any(lo > hi for lo, hi in alpha_box):
        raise ValueError("empty or malformed alpha box")
    axes = [np.linspace(lo, hi, grid) for lo, hi in alpha_box]
    spectral_max = 0.0
    for alpha in itertools.product(*axes):
        otf = BlurModel(family, alpha, shape, support).otf
        spectral_max = max(spectral_max, float(np.max(np.abs(otf) ** 2)))
    if abs(spectral_max - 1.0) > 1e-12:
        raise AssertionError(f"spectral max {spectral_max} != 1 for a unit-sum kernel")
    return 1.0 / sigma2_min


def dump_kernel(model: BlurModel, path) -> None:
    """Write the kernel as a text matrix preceded by a one-line JSON header."""
    header = json.dumps(
        {"family": model.family.value, "alpha": list(model.alpha), "support": model.support}
    )
    np.savetxt(Path(path), model.kernel, fmt="%.17g", header=header)


def load_kernel_dump(path) -> tuple[dict, np.ndarray]:
    path = Path(path)
    with path.open() as fh:
        header = json.loads(fh.readline().lstrip("#").strip())
    return header, np.loadtxt(path, ndmin=2)
