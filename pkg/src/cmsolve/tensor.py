"""Deterministic tensors, seeded randomness, metrics, and serialization.

Everything downstream (operators, models, samplers, the CLI) moves data
around as ImageTensor values and draws randomness through SeededRng, so
bit-exact reproducibility of a whole pipeline reduces to the guarantees
made here.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import MalformedHeader, ShapeMismatch, TruncatedPayload, ValidationError

MODEL = "model"        # values nominally in [-1, 1]
DISPLAY = "display"    # values in [0, 1]
UNBOUNDED = "unbounded"  # sinograms, residuals, anything else

_DOMAINS = (MODEL, DISPLAY, UNBOUNDED)

PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class ImageTensor:
    """Dense (channels, height, width) array of real intensities.

    Immutable: the wrapped array is marked read-only so instances can be
    shared freely across threads. All public constructors reject NaN/Inf.
    """

    data: np.ndarray
    domain: str = MODEL

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"expected (c, h, w) with positive dims, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("tensor contains NaN or Inf")
        if self.domain not in _DOMAINS:
            raise ValidationError(f"unknown value domain {self.domain!r}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def with_data(self, data: np.ndarray, domain: str | None = None) -> "ImageTensor":
        return ImageTensor(data, self.domain if domain is None else domain)


def zeros(shape, domain=MODEL) -> ImageTensor:
    return ImageTensor(np.zeros(shape, dtype=np.float64), domain)


def to_display(x: ImageTensor) -> ImageTensor:
    """Map model-domain values in [-1, 1] onto display values in [0, 1]."""
    if x.domain == DISPLAY:
        return x
    if x.domain != MODEL:
        raise ValidationError("only model-domain tensors convert to display")
    return ImageTensor((x.data + 1.0) / 2.0, DISPLAY)


def to_model(x: ImageTensor) -> ImageTensor:
    """Inverse of to_display; round-trips within 1e-12 absolute."""
    if x.domain == MODEL:
        return x
    if x.domain != DISPLAY:
        raise ValidationError("only display-domain tensors convert to model")
    return ImageTensor(2.0 * x.data - 1.0, MODEL)


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)


def _splitmix64(v: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer over uint64 inputs."""
    with np.errstate(over="ignore"):
        z = (v + _GOLDEN).astype(_U64)
        z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
        return z ^ (z >> _U64(31))


class SeededRng:
    """Counter-based Gaussian/uniform generator.

    Each draw hashes (seed, stream counter) with splitmix64, so outputs
    depend only on the seed and how many values were consumed before --
    identical across runs, platforms, and thread counts. Instances are
    single-owner; hand each worker its own via derive().
    """

    def __init__(self, seed: int, counter: int = 0):
        if seed < 0 or seed > 0xFFFFFFFFFFFFFFFF:
            raise ValidationError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.counter = int(counter)

    def derive(self, index: int) -> "SeededRng":
        """Independent child stream; deterministic in (seed, index)."""
        mixed = _splitmix64(np.array([_U64(self.seed) ^ _splitmix64(np.array([index], dtype=_U64))[0]], dtype=_U64))
        return SeededRng(int(mixed[0]))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            keyed = idx ^ _splitmix64(np.array([self.seed], dtype=_U64))[0]
        return _splitmix64(keyed)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles uniform on (0, 1]."""
        bits = self._raw(n)
        return ((bits >> _U64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)

    def normal(self, n: int) -> np.ndarray:
        """n i.i.d. standard normal doubles via Box-Muller."""
        pairs = (n + 1) // 2
        u1 = self.uniform(pairs)
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, upper: int, n: int) -> np.ndarray:
        """n integers uniform on [0, upper)."""
        if upper <= 0:
            raise ValidationError("upper must be positive")
        return np.minimum((self.uniform(n) * upper).astype(np.int64), upper - 1)


def gaussian_noise(rng: SeededRng, shape, sigma: float) -> ImageTensor:
    """i.i.d. N(0, sigma^2) tensor of the given (c, h, w) shape."""
    if not math.isfinite(sigma) or sigma < 0:
        raise ValidationError(f"sigma must be finite and >= 0, got {sigma}")
    c, h, w = shape
    draws = rng.normal(c * h * w) * sigma
    return ImageTensor(draws.reshape(c, h, w), UNBOUNDED)


# ---------------------------------------------------------------------------
# Serialization: .ten binary format and .pgm import/export
# ---------------------------------------------------------------------------

_MAGIC = b"TEN1"
_VERSION = 1
_HEADER = struct.Struct("<4sBBBBIII12x")  # magic, version, dtype, domain, flags, c, h, w
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {"f32": 1, "f64": 2}


def save_tensor(path, x: ImageTensor, dtype: str = "f64") -> None:
    """Write x to path in the .ten format.

    The default f64 payload round-trips bitwise; f32 is available for
    compact golden files (lossy for general f64 data).
    """
    if dtype not in _DTYPE_CODES:
        raise ValidationError(f"unsupported payload dtype {dtype!r}")
    code = _DTYPE_CODES[dtype]
    c, h, w = x.shape
    header = _HEADER.pack(_MAGIC, _VERSION, code, _DOMAINS.index(x.domain), 0, c, h, w)
    payload = np.ascontiguousarray(x.data, dtype=_DTYPES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_tensor(path, expected_shape=None) -> ImageTensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise MalformedHeader(f"{path}: file shorter than header")
    magic, version, dtype_code, domain_code, _flags, c, h, w = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise MalformedHeader(f"{path}: bad magic {magic!r}")
    if version != _VERSION or dtype_code not in _DTYPES or domain_code >= len(_DOMAINS):
        raise MalformedHeader(f"{path}: unsupported version/dtype/domain")
    dtype = _DTYPES[dtype_code]
    expected_bytes = c * h * w * dtype.itemsize
    payload = raw[_HEADER.size:]
    if len(payload) != expected_bytes:
        raise TruncatedPayload(f"{path}: expected {expected_bytes} payload bytes, found {len(payload)}")
    if expected_shape is not None and tuple(expected_shape) != (c, h, w):
        raise ShapeMismatch(f"{path}: shape {(c, h, w)} != expected {tuple(expected_shape)}")
    data = np.frombuffer(payload, dtype=dtype).astype(np.float64).reshape(c, h, w)
    return ImageTensor(data, _DOMAINS[domain_code])


def save_pgm(path, x: ImageTensor) -> None:
    """8-bit P5 export for visual inspection (display-domain quantization)."""
    if x.channels != 1:
        raise ValidationError("pgm export requires a single channel")
    disp = to_display(x) if x.domain == MODEL else x
    vals = np.clip(disp.data[0], 0.0, 1.0)
    quant = np.rint(vals * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{x.width} {x.height}\n255\n".encode("ascii"))
        fh.write(quant.tobytes())


def load_pgm(path) -> ImageTensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() != b"P5":
        raise MalformedHeader(f"{path}: not a binary P5 pgm")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError as exc:
        raise MalformedHeader(f"{path}: bad pgm header") from exc
    if maxval != 255:
        raise MalformedHeader(f"{path}: only 8-bit pgm supported")
    pixels = np.frombuffer(parts[3][: w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise TruncatedPayload(f"{path}: pgm payload incomplete")
    data = (pixels.astype(np.float64) / 255.0).reshape(1, h, w)
    return ImageTensor(data, DISPLAY)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def mse(a: ImageTensor, b: ImageTensor) -> float:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse: {a.shape} vs {b.shape}")
    return float(np.mean((a.data - b.data) ** 2))


def psnr(a: ImageTensor, b: ImageTensor, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB, capped at 99 (the zero-MSE sentinel)."""
    if peak <= 0:
        raise ValidationError("peak must be positive")
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / err), PSNR_CAP_DB)


def _gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: ImageTensor, b: ImageTensor, peak: float = 1.0) -> float:
    """Mean local SSIM, 11x11 Gaussian window sigma=1.5, K1=0.01, K2=0.03.

    Windows are 'valid' (fully inside the image); channels average.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValidationError("peak must be positive")
    if a.height < 11 or a.width < 11:
        raise ValidationError("ssim requires height and width >= 11")
    window = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    scores = []
    for ch in range(a.channels):
        x = a.data[ch]
        y = b.data[ch]
        mu_x = convolve2d(x, window, mode="valid")
        mu_y = convolve2d(y, window, mode="valid")
        xx = convolve2d(x * x, window, mode="valid") - mu_x * mu_x
        yy = convolve2d(y * y, window, mode="valid") - mu_y * mu_y
        xy = convolve2d(x * y, window, mode="valid") - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
