import math

import numpy as np
import pytest

from sapgdeconv.imaging import (
    ImageFormatError,
    MetricReport,
    bsnr,
    crop,
    fft2,
    ifft2,
    load_image,
    metric_report,
    psnr,
    rfft_weights,
    save_image,
    sigma2_bounds_from_bsnr,
    sigma2_from_bsnr,
    spectral_inner,
    test_image,
)


def test_psnr_unit_error_is_peak_squared():
    ref = np.zeros((4, 4))
    assert psnr(ref + 1.0, ref) == pytest.approx(20 * math.log10(255.0))


def test_psnr_identical_is_infinite_and_serialized_as_flag():
    x = np.arange(16.0).reshape(4, 4)
    assert psnr(x, x) == math.inf
    rep = metric_report(x, x, x + 1.0, x)
    d = rep.to_dict()
    assert d["psnr_db"] is None and d["psnr_identical"] is True
    assert d["bsnr_identical"] is False
    assert MetricReport.from_dict(d) == rep


def test_psnr_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_bsnr_and_sigma2_roundtrip():
    hx = np.linspace(0, 255, 64).reshape(8, 8)
    s2 = sigma2_from_bsnr(hx, 30.0)
    assert s2 == pytest.approx(np.sum(hx**2) / (64 * 1000.0))
    # noise with exactly d * sigma2 energy reproduces the target
    noise = np.ones((8, 8)) * math.sqrt(s2)
    assert bsnr(hx + noise, hx) == pytest.approx(30.0)
    assert bsnr(hx, hx) == math.inf


def test_sigma2_bounds_are_ordered_max_then_min():
    hx = np.full((8, 8), 100.0)
    s_max, s_min = sigma2_bounds_from_bsnr(hx, 15.0, 45.0)
    assert s_max == pytest.approx(1e4 / 10**1.5)
    assert s_min == pytest.approx(1e4 / 10**4.5)
    with pytest.raises(ValueError):
        sigma2_bounds_from_bsnr(hx, 45.0, 15.0)


def test_zero_energy_signal_is_rejected():
    with pytest.raises(ValueError, match="zero energy"):
        bsnr(np.ones((4, 4)), np.zeros((4, 4)))


def test_spectral_inner_matches_spatial(rng):
    for shape in [(6, 8), (5, 7), (8, 9)]:
        a, b = rng.standard_normal(shape), rng.standard_normal(shape)
        got = spectral_inner(fft2(a), fft2(b), rfft_weights(shape), a.size)
        assert got == pytest.approx(float(np.sum(a * b)), rel=1e-12)
        np.testing.assert_allclose(ifft2(fft2(a), shape), a, atol=1e-12)


@pytest.mark.parametrize("suffix", [".pgm", ".png", ".npy"])
def test_save_load_roundtrip(tmp_path, suffix):
    x = np.rint(np.linspace(0, 255, 48)).reshape(6, 8)
    path = tmp_path / f"img{suffix}"
    save_image(x, path)
    np.testing.assert_array_equal(load_image(path), x)


def test_npy_keeps_full_precision(tmp_path):
    x = np.random.default_rng(0).standard_normal((5, 5))
    save_image(x, tmp_path / "a.npy")
    np.testing.assert_array_equal(load_image(tmp_path / "a.npy"), x)


def test_sixteen_bit_pgm(tmp_path):
    x = np.array([[0.0, 1000.0], [65535.0, 7.0]])
    save_image(x, tmp_path / "a.pgm", bit_depth=16)
    np.testing.assert_array_equal(load_image(tmp_path / "a.pgm"), x)


def test_truncated_pgm_is_a_format_error(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(ImageFormatError):
        load_image(path)


def test_unknown_suffix_is_a_format_error(tmp_path):
    with pytest.raises(ImageFormatError):
        save_image(np.zeros((2, 2)), tmp_path / "a.bmpx")


def test_crop_bounds():
    x = np.arange(100.0).reshape(10, 10)
    np.testing.assert_array_equal(crop(x, 2, (3, 4)), [[34, 35], [44, 45]])
    with pytest.raises(ValueError, match="does not fit"):
        crop(x, 4, (8, 0))


def test_builtin_image_window():
    full = test_image("camera")
    win = test_image("camera", 16, (64, 160))
    np.testing.assert_array_equal(win, full[64:80, 160:176])
    assert test_image("camera", 16).shape == (16, 16)
