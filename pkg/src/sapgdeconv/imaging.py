"""Image container helpers, FFT utilities, degradation metrics and image I/O.

Images are plain 2-D ``float64`` numpy arrays with periodic boundary
semantics.  Intensities live in ``[0, 255]`` by convention, which is the range
every default step-size scale of the calibrator was tuned for.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft

DEFAULT_PEAK = 255.0


class ImageFormatError(ValueError):
    """Raised when an image file cannot be decoded or encoded."""


def as_image(x, name: str = "image") -> np.ndarray:
    """Validate ``x`` as a finite 2-D image and return it as float64."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# FFT helpers (real-to-complex, periodic)
# --------------------------------------------------------------------------


def fft2(x: np.ndarray) -> np.ndarray:
    return scipy.fft.rfft2(x, workers=1)


def ifft2(xf: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    return scipy.fft.irfft2(xf, s=shape, workers=1)


def rfft_weights(shape: tuple[int, int]) -> np.ndarray:
    """Multiplicities of the half-spectrum columns of ``rfft2`` on ``shape``.

    ``sum(w * conj(A) * B).real / d`` equals the spatial inner product of the
    two real images whose half spectra are ``A`` and ``B``.
    """
    cols = shape[1]
    w = np.full(cols // 2 + 1, 2.0)
    w[0] = 1.0
    if cols % 2 == 0:
        w[-1] = 1.0
    return w[np.newaxis, :]


def spectral_inner(af: np.ndarray, bf: np.ndarray, weights: np.ndarray, d: int) -> float:
    return float(np.sum(weights * (af.real * bf.real + af.imag * bf.imag)) / d)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def psnr(x_hat, x_ref, peak: float = DEFAULT_PEAK) -> float:
    """Peak signal-to-noise ratio in dB.

    Returns ``math.inf`` when the two images are identical; serializers turn
    that into an explicit ``identical`` flag.
    """
    x_hat = as_image(x_hat, "x_hat")
    x_ref = as_image(x_ref, "x_ref")
    _check_same_shape(x_hat, x_ref)
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = float(np.sum((x_hat - x_ref) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 * x_hat.size / err)


def bsnr(y, hx) -> float:
    """Blurred signal-to-noise ratio ``-10 log10(||y - hx||^2 / ||hx||^2)``."""
    y = as_image(y, "y")
    hx = as_image(hx, "hx")
    _check_same_shape(y, hx)
    energy = float(np.sum(hx**2))
    if energy == 0.0:
        raise ValueError("hx has zero energy; BSNR undefined")
    noise = float(np.sum((y - hx) ** 2))
    if noise == 0.0:
        return math.inf
    return -10.0 * math.log10(noise / energy)


def sigma2_from_bsnr(hx, bsnr_db: float) -> float:
    """Noise variance giving ``bsnr_db`` under ``||y - Hx||^2 ~= d sigma^2``."""
    hx = as_image(hx, "hx")
    energy = float(np.sum(hx**2))
    if energy == 0.0:
        raise ValueError("hx has zero energy")
    return energy / (hx.size * 10.0 ** (bsnr_db / 10.0))


def sigma2_bounds_from_bsnr(hx, bsnr_lo_db: float = 15.0, bsnr_hi_db: float = 45.0):
    """Return ``(sigma2_max, sigma2_min)`` for an admissible BSNR range.

    The lower BSNR end maps to the larger variance.
    """
    if not bsnr_lo_db < bsnr_hi_db:
        raise ValueError("need bsnr_lo_db < bsnr_hi_db")
    return sigma2_from_bsnr(hx, bsnr_lo_db), sigma2_from_bsnr(hx, bsnr_hi_db)


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    bsnr_db: float
    l2_residual: float

    def to_dict(self) -> dict:
        out: dict = {"l2_residual": self.l2_residual}
        for key in ("psnr_db", "bsnr_db"):
            value = getattr(self, key)
            if math.isinf(value):
                out[key] = None
                out[key.replace("_db", "_identical")] = True
            else:
                out[key] = value
                out[key.replace("_db", "_identical")] = False
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        def _read(key):
            if data.get(key.replace("_db", "_identical")):
                return math.inf
            return float(data[key])

        return cls(_read("psnr_db"), _read("bsnr_db"), float(data["l2_residual"]))


def metric_report(x_hat, x_ref, y, hx, peak: float = DEFAULT_PEAK) -> MetricReport:
    x_hat = as_image(x_hat)
    x_ref = as_image(x_ref)
    _check_same_shape(x_hat, x_ref)
    return MetricReport(
        psnr_db=psnr(x_hat, x_ref, peak),
        bsnr_db=bsnr(y, hx),
        l2_residual=float(np.linalg.norm(x_hat - x_ref)),
    )


# --------------------------------------------------------------------------
# Image I/O
# --------------------------------------------------------------------------


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated PGM header")
    return data[start:pos], pos


def _load_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    magic, pos = _read_token(data, 0)
    if magic != b"P5":
        raise ImageFormatError(f"{path}: only binary PGM (P5) is supported, got {magic!r}")
    try:
        cols_tok, pos = _read_token(data, pos)
        rows_tok, pos = _read_token(data, pos)
        max_tok, pos = _read_token(data, pos)
        cols, rows, maxval = int(cols_tok), int(rows_tok), int(max_tok)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PGM header") from exc
    if cols < 1 or rows < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: invalid PGM header values")
    pos += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = rows * cols * dtype.itemsize
    if len(data) - pos < nbytes:
        raise ImageFormatError(
            f"{path}: truncated pixel data ({len(data) - pos} of {nbytes} bytes)"
        )
    pixels = np.frombuffer(data, dtype=dtype, count=rows * cols, offset=pos)
    return pixels.reshape(rows, cols).astype(np.float64)


def _save_pgm(x: np.ndarray, path: Path, bit_depth: int) -> None:
    if bit_depth == 8:
        pixels, maxval = np.clip(np.rint(x), 0, 255).astype("u1"), 255
    elif bit_depth == 16:
        pixels, maxval = np.clip(np.rint(x), 0, 65535).astype(">u2"), 65535
    else:
        raise ImageFormatError(f"unsupported bit depth {bit_depth}")
    header = f"P5\n{x.shape[1]} {x.shape[0]}\n{maxval}\n".encode("ascii")
    path.write_bytes(header + pixels.tobytes())


def load_image(path) -> np.ndarray:
    """Load a grayscale image (binary PGM, PNG, or ``.npy``) as float64."""
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        try:
            return as_image(np.load(path, allow_pickle=False))
        except (ValueError, OSError) as exc:
            raise ImageFormatError(f"{path}: cannot decode array file") from exc
    if suffix in (".pgm", ".pnm"):
        return _load_pgm(path)
    if suffix == ".png":
        try:
            with Image.open(path) as im:
                im.load()
                if im.mode not in ("L", "I;16", "I;16B", "I"):
                    raise ImageFormatError(f"{path}: not a grayscale PNG (mode {im.mode})")
                return np.asarray(im, dtype=np.float64).copy()
        except (UnidentifiedImageError, OSError, SyntaxError) as exc:
            raise ImageFormatError(f"{path}: cannot decode PNG") from exc
    raise ImageFormatError(f"{path}: unsupported image format {suffix!r}")


def save_image(x, path, bit_depth: int = 8) -> None:
    """Save ``x`` to ``path``.

    PGM and PNG outputs are rounded and clamped to the integer range of the
    bit depth; ``.npy`` stores the float array losslessly.
    """
    from PIL import Image

    x = as_image(x)
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        np.save(path, x, allow_pickle=False)
    elif suffix in (".pgm", ".pnm"):
        _save_pgm(x, path, bit_depth)
    elif suffix == ".png":
        if bit_depth == 8:
            Image.fromarray(np.clip(np.rint(x), 0, 255).astype(np.uint8), mode="L").save(path)
        elif bit_depth == 16:
            arr = np.clip(np.rint(x), 0, 65535).astype(np.uint16)
            Image.fromarray(arr).save(path)
        else:
            raise ImageFormatError(f"unsupported bit depth {bit_depth}")
    else:
        raise ImageFormatError(f"{path}: unsupported image format {suffix!r}")


def center_crop(x: np.ndarray, size: int) -> np.ndarray:
    rows, cols = x.shape
    return crop(x, size, ((rows - size) // 2, (cols - size) // 2))


def crop(x: np.ndarray, size: int, origin: tuple[int, int]) -> np.ndarray:
    """Square ``size x size`` window with its top-left corner at ``origin``."""
    r0, c0 = origin
    rows, cols = x.shape
    if r0 < 0 or c0 < 0 or r0 + size > rows or c0 + size > cols:
        raise ValueError(f"crop of size {size} at {origin} does not fit in image {x.shape}")
    return np.array(x[r0 : r0 + size, c0 : c0 + size], dtype=np.float64)


def test_image(name: str = "camera", size: int | None = None, origin: tuple[int, int] | None = None) -> np.ndarray:
    """A bundled 8-bit grayscale test image from scikit-image.

    With ``size`` the image is cropped to a square window, centered unless
    ``origin`` gives the top-left corner.
    """
    import skimage.data

    img = getattr(skimage.data, name)()
    if img.ndim != 2:
        raise ValueError(f"test image {name!r} is not grayscale")
    img = np.asarray(img, dtype=np.float64)
    if not size:
        return img
    return crop(img, size, origin) if origin is not None else center_crop(img, size)


test_image.__test__ = False  # not a pytest test
