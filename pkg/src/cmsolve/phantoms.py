"""Procedural toy datasets: Shepp-Logan variants, Gaussian blobs, Gaussian noise images.

These stand in for the large natural/medical image corpora the full-scale
pipeline would train on. Every generator is driven by a SeededRng so
datasets are reproducible from (kind, count, size, seed).
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .tensor import MODEL, ImageTensor, SeededRng

# Ellipses of the classic head phantom with the high-contrast intensity
# variant: (value, a, b, x0, y0, phi_degrees) on the unit square [-1, 1]^2.
SHEPP_LOGAN_ELLIPSES = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


_SUPERSAMPLE = 4  # subpixel coverage sampling; keeps edges reconstructable


def _render_ellipses(size: int, ellipses, supersample: int = _SUPERSAMPLE) -> np.ndarray:
    """Sum of ellipse indicators, area-averaged over subpixel samples."""
    fine = size * supersample
    coords = (np.arange(fine) + 0.5) * (2.0 / fine) - 1.0
    xs, ys = np.meshgrid(coords, -coords)  # row 0 is the top of the image
    img = np.zeros((fine, fine), dtype=np.float64)
    for value, a, b, x0, y0, phi in ellipses:
        rad = np.deg2rad(phi)
        c, s = np.cos(rad), np.sin(rad)
        xr = (xs - x0) * c + (ys - y0) * s
        yr = -(xs - x0) * s + (ys - y0) * c
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += value
    return img.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def shepp_logan(size: int, rng: SeededRng | None = None, attenuation: bool = False) -> ImageTensor:
    """Head phantom; pass an rng for a randomized variant.

    Randomization jitters interior ellipse positions, sizes and
    intensities while keeping the outer skull fixed, giving a family of
    plausible cross-sections for CT training sets.

    With attenuation=True the phantom keeps its raw [0, 1] attenuation
    values (air exactly 0) instead of stretching to [-1, 1]; CT tasks use
    this so parallel-beam projections see no square background.
    """
    if size < 8:
        raise ValidationError("phantom size must be >= 8")
    ellipses = [list(e) for e in SHEPP_LOGAN_ELLIPSES]
    if rng is not None:
        jitter = rng.uniform(4 * (len(ellipses) - 2)) * 2.0 - 1.0
        k = 0
        for e in ellipses[2:]:
            e[0] *= 1.0 + 0.5 * jitter[k]
            e[1] *= 1.0 + 0.25 * jitter[k + 1]
            e[2] *= 1.0 + 0.25 * jitter[k + 2]
            e[3] += 0.08 * jitter[k + 3]
            k += 4
    img = np.clip(_render_ellipses(size, ellipses), 0.0, 1.0)
    if not attenuation:
        img = img * 2.0 - 1.0
    return ImageTensor(img[None, :, :], MODEL)


def disc(size: int, radius_frac: float = 0.35, value: float = 1.0, background: float = 0.0) -> ImageTensor:
    """Centered anti-aliased disc; rotationally symmetric by construction."""
    ellipses = ((value - background, 2.0 * radius_frac, 2.0 * radius_frac, 0.0, 0.0, 0.0),)
    img = background + _render_ellipses(size, ellipses)
    return ImageTensor(img[None, :, :], MODEL)


def gaussian_blobs(size: int, rng: SeededRng, min_blobs: int = 2, max_blobs: int = 4) -> ImageTensor:
    """2-4 smooth bright blobs on a dark background, model domain."""
    n = min_blobs + int(rng.integers(max_blobs - min_blobs + 1, 1)[0])
    params = rng.uniform(4 * n)
    coords = np.arange(size, dtype=np.float64)
    xs, ys = np.meshgrid(coords, coords)
    img = np.zeros((size, size), dtype=np.float64)
    for k in range(n):
        cx = params[4 * k] * (size - 1)
        cy = params[4 * k + 1] * (size - 1)
        width = (0.06 + 0.12 * params[4 * k + 2]) * size
        amp = 0.5 + 0.5 * params[4 * k + 3]
        img += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * width * width))
    img = np.clip(img, 0.0, 1.0) * 2.0 - 1.0
    return ImageTensor(img[None, :, :], MODEL)


def gaussian_images(shape, rng: SeededRng, mean: float = 0.0, std: float = 0.5, count: int = 1) -> list[ImageTensor]:
    """i.i.d. N(mean, std^2) images; the analytically tractable toy prior."""
    c, h, w = shape
    out = []
    for _ in range(count):
        data = mean + std * rng.normal(c * h * w).reshape(c, h, w)
        out.append(ImageTensor(data, MODEL))
    return out


def make_dataset(kind: str, count: int, size: int, rng: SeededRng) -> list[ImageTensor]:
    """Dataset dispatch used by training and the CLI."""
    if count < 0:
        raise ValidationError("count must be >= 0")
    if kind == "gaussian":
        return gaussian_images((1, size, size), rng, count=count)
    if kind == "blobs":
        return [gaussian_blobs(size, rng.derive(i)) for i in range(count)]
    if kind == "phantoms":
        return [shepp_logan(size, rng.derive(i), attenuation=True) for i in range(count)]
    raise ValidationError(f"unknown dataset kind {kind!r}")
