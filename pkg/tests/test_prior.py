import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from sapgdeconv.prior import (
    PriorSpec,
    QuadraticPotential,
    TVDual,
    divergence,
    grad_log_z,
    image_gradient,
    moreau_envelope_tv,
    prox_tv,
    tv_norm,
)

images = arrays(np.float64, (6, 6), elements=st.floats(-50, 50))


def test_tv_of_a_periodic_stripe():
    # each row of an n-wide periodic stripe has one up and one down jump
    x = np.zeros((10, 10))
    x[:, 2:5] = 1.0
    assert tv_norm(x) == pytest.approx(20.0)
    assert tv_norm(3.0 * x) == pytest.approx(60.0)
    assert tv_norm(np.full((5, 5), 7.0)) == 0.0


def test_isotropic_corner():
    x = np.zeros((4, 4))
    x[0, 0] = 1.0
    # pixel (0,0) has gradient (-1, -1); its two neighbours above and left have +1 in one direction
    assert tv_norm(x) == pytest.approx(math.sqrt(2) + 2.0)


def test_divergence_is_negative_adjoint(rng):
    x = rng.standard_normal((7, 9))
    p1, p2 = rng.standard_normal((7, 9)), rng.standard_normal((7, 9))
    g1, g2 = image_gradient(x)
    assert np.sum(g1 * p1 + g2 * p2) == pytest.approx(-np.sum(x * divergence(p1, p2)))


def test_prox_zero_weight_is_identity(rng):
    x = rng.standard_normal((8, 8))
    np.testing.assert_array_equal(prox_tv(x, 0.0), x)


def test_prox_constant_image_is_fixed_point():
    x = np.full((8, 8), 42.0)
    np.testing.assert_allclose(prox_tv(x, 5.0), x, atol=1e-12)


def test_prox_preserves_mean(rng):
    x = 10 * rng.standard_normal((8, 8))
    assert prox_tv(x, 3.0).mean() == pytest.approx(x.mean())


@settings(max_examples=30, deadline=None)
@given(a=images, b=images, w=st.floats(0.01, 20))
def test_prox_is_nonexpansive(a, b, w):
    pa = prox_tv(a, w, max_iter=5000, tol=1e-10)
    pb = prox_tv(b, w, max_iter=5000, tol=1e-10)
    assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) * (1 + 1e-6) + 1e-6


def test_prox_large_weight_flattens(rng):
    x = rng.standard_normal((8, 8))
    u = prox_tv(x, 1e4, max_iter=20000, tol=1e-9)
    np.testing.assert_allclose(u, x.mean(), atol=1e-6)


def test_prox_reports_gap_and_warm_start(rng):
    x = 50 * rng.standard_normal((16, 16))
    u, info = prox_tv(x, 10.0, max_iter=5000, tol=1e-6, return_info=True)
    assert info.gap <= 1e-6
    dual = TVDual.zeros(x.shape)
    prox_tv(x, 10.0, max_iter=5000, tol=1e-6, dual=dual)
    _, warm = prox_tv(x, 10.0, max_iter=5000, tol=1e-6, dual=dual, return_info=True)
    assert warm.iterations <= info.iterations


def test_prox_rejects_negative_weight():
    with pytest.raises(ValueError):
        prox_tv(np.zeros((4, 4)), -1.0)


def test_moreau_envelope_bounds(rng):
    x = 20 * rng.standard_normal((8, 8))
    theta, lam = 0.7, 2.0
    env = moreau_envelope_tv(x, theta, lam, max_iter=10000, tol=1e-10)
    u = prox_tv(x, theta * lam, max_iter=10000, tol=1e-10)
    assert theta * tv_norm(u) <= env <= theta * tv_norm(x) + 1e-9
    # the envelope is differentiable with gradient (x - prox) / lam
    e = rng.standard_normal(x.shape)
    h = 1e-4
    fd = (moreau_envelope_tv(x + h * e, theta, lam, max_iter=10000, tol=1e-12)
          - moreau_envelope_tv(x - h * e, theta, lam, max_iter=10000, tol=1e-12)) / (2 * h)
    assert fd == pytest.approx(np.sum((x - u) / lam * e), rel=1e-4)


@pytest.mark.parametrize("q", [1.0, 2.0])
def test_grad_log_z_by_quadrature(q):
    # one coordinate; the d-dimensional value is d times this
    def log_z(theta):
        return math.log(2 * quad(lambda t: math.exp(-theta * t**q), 0, math.inf)[0])

    theta, h = 0.8, 1e-5
    fd = (log_z(theta + h) - log_z(theta - h)) / (2 * h)
    assert grad_log_z(theta, 1, q) == pytest.approx(fd, rel=1e-6)
    assert grad_log_z(theta, 100, q) == pytest.approx(100 * fd, rel=1e-6)


def test_grad_log_z_domain():
    with pytest.raises(ValueError):
        grad_log_z(0.0, 4, 1.0)


def test_prior_spec_by_name():
    spec = PriorSpec("quadratic", theta=2.0)
    assert isinstance(spec.potential, QuadraticPotential)
    assert spec.q == 2.0
    assert PriorSpec().q == 1.0
    with pytest.raises(ValueError, match="unknown potential"):
        PriorSpec("huber")
    with pytest.raises(ValueError):
        PriorSpec(lam=0.0)


def test_quadratic_prox_closed_form(rng):
    x = rng.standard_normal((4, 4))
    pot = QuadraticPotential()
    u = pot.prox(x, 3.0)
    # stationarity of 3 * ||u||^2 / 2 + ||u - x||^2 / 2
    np.testing.assert_allclose(3.0 * u + (u - x), 0.0, atol=1e-14)
