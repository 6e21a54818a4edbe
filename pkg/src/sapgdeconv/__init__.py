"""Empirical Bayes calibration of blur, noise and TV regularization for image deconvolution."""

from .imaging import bsnr, load_image, psnr, save_image, sigma2_bounds_from_bsnr
from .kernels import BlurModel, KernelFamily, apply, apply_adjoint, fidelity, fidelity_gradients
from .map import MapConfig, map_estimate
from .myula import ChainState, myula_run, myula_step
from .prior import PriorSpec, prox_tv, tv_norm
from .sapg import (
    HyperDomain,
    HyperParams,
    SapgConfig,
    sapg_calibrate,
    sapg_calibrate_dual,
    validate_schedule,
)

__all__ = [
    "BlurModel",
    "ChainState",
    "HyperDomain",
    "HyperParams",
    "KernelFamily",
    "MapConfig",
    "PriorSpec",
    "SapgConfig",
    "apply",
    "apply_adjoint",
    "bsnr",
    "fidelity",
    "fidelity_gradients",
    "load_image",
    "map_estimate",
    "myula_run",
    "myula_step",
    "prox_tv",
    "psnr",
    "sapg_calibrate",
    "sapg_calibrate_dual",
    "save_image",
    "sigma2_bounds_from_bsnr",
    "tv_norm",
    "validate_schedule",
]
