import csv
import json
import math

import numpy as np
import pytest

from sapgdeconv.experiments import (
    ExperimentConfig,
    degrade,
    desk_config,
    gradcheck,
    repro_config,
    resolve_image,
    select_model,
    sweep,
    theta_psnr_sweep,
    write_sweep_csv,
)
from sapgdeconv.imaging import bsnr, psnr
from sapgdeconv.kernels import BlurModel, KernelFamily, apply


@pytest.fixture(scope="module")
def scene():
    x = np.full((24, 24), 70.0)
    x[5:19, 5:19] = 190.0
    x[9:15, 1:23] = 30.0
    return x


def test_degrade_noiseless_and_noisy(scene):
    hx, s2 = degrade(scene, "laplace", (0.3,), math.inf, 0)
    assert s2 == 0.0
    np.testing.assert_array_equal(hx, apply(BlurModel("laplace", (0.3,), scene.shape), scene))
    y, s2 = degrade(scene, "laplace", (0.3,), 30.0, 0)
    assert s2 == pytest.approx(np.sum(hx**2) / (scene.size * 1000))
    assert bsnr(y, hx) == pytest.approx(30.0, abs=0.5)
    y2, _ = degrade(scene, "laplace", (0.3,), 30.0, 0)
    np.testing.assert_array_equal(y, y2)


def test_degrade_rejects_parameters_outside_the_box(scene):
    with pytest.raises(ValueError, match="admissible box"):
        degrade(scene, "moffat", (0.3, 7.0), 30.0, 0)


@pytest.mark.parametrize("family", list(KernelFamily))
def test_gradcheck_passes_and_detects_corruption(family):
    good = gradcheck(family, size=16)
    assert good.passed, good.errors
    bad = gradcheck(family, size=16, corrupt=1e-3)
    assert not bad.passed


def test_gradcheck_at_delta_kernel():
    assert gradcheck("gaussian", alpha=(10.0, 10.0), size=16).passed


def test_sweep_edge_cases(scene):
    y, _ = degrade(scene, "gaussian", (0.4, 0.3), 30.0, 0)
    cfg = desk_config("gaussian", n_iterations=10, warmup_steps=5)
    assert sweep(y, "gaussian", "theta0", [], cfg) == []
    with pytest.raises(ValueError, match="unknown sweep parameter"):
        sweep(y, "gaussian", "kappa", [0.7], cfg)
    with pytest.raises(ValueError, match="not finite"):
        sweep(y, "gaussian", "theta0", [float("nan")], cfg)


def test_sweep_runs_share_seed_and_write_long_csv(tmp_path, scene):
    y, _ = degrade(scene, "gaussian", (0.4, 0.3), 30.0, 0)
    cfg = desk_config("gaussian", n_iterations=10, warmup_steps=5)
    runs = sweep(y, "gaussian", "theta0", [0.01, 0.1], cfg)
    assert [r.value for r in runs] == [0.01, 0.1]
    assert runs[0].result.trace.theta[0] != runs[1].result.trace.theta[0]
    write_sweep_csv(runs, "theta0", tmp_path / "s.csv")
    rows = list(csv.DictReader((tmp_path / "s.csv").open()))
    assert len(rows) == 2 * 10 * 4
    assert {r["quantity"] for r in rows} == {"theta", "alpha_1", "alpha_2", "sigma2"}


def test_lipschitz_sweep_relaxes_stability_check(scene):
    y, _ = degrade(scene, "gaussian", (0.4, 0.3), 30.0, 0)
    cfg = desk_config("gaussian", n_iterations=5, warmup_steps=5, gamma_policy="fixed")
    # half the Lipschitz estimate gives a step that is unstable at sigma2_min but fine at the iterates
    runs = sweep(y, "gaussian", "lipschitz_scale", [0.5, 2.0], cfg)
    assert [r.error for r in runs] == [None, None]
    assert runs[0].result.gamma > runs[1].result.gamma


def test_theta_psnr_sweep_refines_grid(scene):
    y, s2 = degrade(scene, "gaussian", (0.5, 0.5), 30.0, 0)
    model = BlurModel("gaussian", (0.5, 0.5), scene.shape)
    res = theta_psnr_sweep(scene, y, model, s2, [0.001, 0.01, 0.1, 1.0])
    assert res.psnr_star >= max(p for _, p in res.grid)
    assert 0.001 <= res.theta_star <= 1.0
    assert res.psnr_star > psnr(y, scene)


def test_select_model_reports_every_family(scene):
    y, _ = degrade(scene, "laplace", (0.3,), 30.0, 0)
    configs = {f: desk_config(f, n_iterations=10, warmup_steps=10) for f in KernelFamily}
    rep = select_model(y, list(KernelFamily), configs)
    assert {o.family for o in rep.outcomes} == {"gaussian", "laplace", "moffat"}
    assert rep.selected == rep.outcomes[0].family
    residuals = [o.residual for o in rep.outcomes]
    assert residuals == sorted(residuals)
    with pytest.raises(ValueError):
        select_model(y, [])


def test_experiment_config_json():
    cfg = ExperimentConfig.from_json(json.dumps({"family": "moffat", "sapg": {"n_iterations": 50}}))
    assert cfg.alpha_star() == (0.3, 3.5)
    assert cfg.sapg_config().n_iterations == 50
    assert cfg.sapg_config().gamma_policy == "adaptive"
    assert ExperimentConfig(preset="full").sapg_config().n_iterations == 30000
    with pytest.raises(ValueError, match="unknown config fields"):
        ExperimentConfig.from_json('{"famly": "moffat"}')
    with pytest.raises(ValueError, match="schema_version"):
        ExperimentConfig.from_json('{"schema_version": 99}')
    with pytest.raises(ValueError):
        ExperimentConfig.from_json('{"family": "moffat", "true_alpha": [0.3]}')
    with pytest.raises(ValueError):
        ExperimentConfig.from_json('{"sapg": {"kappa": 2}}')


def test_desk_config_differs_from_preset_only_where_documented():
    g = desk_config("gaussian")
    assert (g.n_iterations, g.warmup_steps, g.gamma_policy) == (5000, 5000, "adaptive")
    assert g.delta_scales.sigma2 == 10000.0 and g.delta_scales.theta == 0.001
    assert desk_config("moffat").delta_scales.sigma2 == 10000.0


def test_repro_and_image_resolution(tmp_path):
    assert repro_config("table2").family == "laplace"
    with pytest.raises(ValueError):
        repro_config("table9")
    assert resolve_image({"builtin": "camera", "size": 16, "origin": [64, 160]}).shape == (16, 16)
    np.save(tmp_path / "a.npy", np.ones((3, 3)))
    assert resolve_image(str(tmp_path / "a.npy")).sum() == 9
    with pytest.raises(ValueError):
        resolve_image(42)
