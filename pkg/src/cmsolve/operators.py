"""Forward operators, adjoints, pseudo-inverses, and initial reconstruction.

Each operator bundles the degradation map A with whatever it can offer a
solver: an adjoint (for gradients), a pseudo-inverse (for projections),
and a noise level. The Radon/FBP pair implements parallel-beam geometry
with a detector per image column; its adjoint is the exact transpose of
the discretized forward map, so the dot-product test holds to machine
precision.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse
from scipy.signal import convolve2d

from .errors import CapabilityError, ShapeMismatch, ValidationError
from .tensor import MODEL, UNBOUNDED, ImageTensor

LINEAR_KINDS = ("inpaint", "sr_block", "radon", "custom")

RAY_STEP_PX = 0.5


class ForwardOperator:
    """Base degradation map; subclasses fill in apply and capabilities."""

    kind = "custom"
    differentiable = False

    def __init__(self, sigma_y: float = 0.0):
        if sigma_y < 0:
            raise ValidationError("sigma_y must be >= 0")
        self.sigma_y = float(sigma_y)

    # -- capability surface -------------------------------------------------
    @property
    def has_adjoint(self) -> bool:
        return type(self).adjoint is not ForwardOperator.adjoint

    @property
    def has_pinv(self) -> bool:
        return type(self).pinv is not ForwardOperator.pinv

    def apply(self, x: ImageTensor) -> ImageTensor:
        raise NotImplementedError

    def adjoint(self, y: ImageTensor) -> ImageTensor:
        raise CapabilityError(f"{self.kind} operator has no adjoint")

    def pinv(self, y: ImageTensor) -> ImageTensor:
        raise CapabilityError(f"{self.kind} operator has no pseudo-inverse")

    def vjp(self, x: ImageTensor, w: ImageTensor) -> ImageTensor:
        """Jacobian-transpose product at x; equals adjoint for linear kinds."""
        if self.kind in LINEAR_KINDS and self.has_adjoint:
            return self.adjoint(w)
        raise CapabilityError(f"{self.kind} operator exposes no gradient")

    def measurement_shape(self, signal_shape) -> tuple:
        raise NotImplementedError

    def signal_shape(self, measurement_shape) -> tuple:
        raise NotImplementedError


class InpaintOperator(ForwardOperator):
    """Pixel masking; the pseudo-inverse is the operator itself."""

    kind = "inpaint"
    differentiable = True

    def __init__(self, mask: np.ndarray, sigma_y: float = 0.0):
        super().__init__(sigma_y)
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim != 2:
            raise ValidationError("mask must be 2-D (height, width)")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ValidationError("mask must be binary")
        self.mask = mask

    def _masked(self, x: ImageTensor) -> ImageTensor:
        if x.data.shape[1:] != self.mask.shape:
            raise ShapeMismatch(f"mask {self.mask.shape} vs image {x.shape}")
        return ImageTensor(x.data * self.mask[None], x.domain)

    def apply(self, x):
        return self._masked(x)

    def adjoint(self, y):
        return self._masked(y)

    def pinv(self, y):
        return self._masked(y)

    def measurement_shape(self, signal_shape):
        return tuple(signal_shape)

    def signal_shape(self, measurement_shape):
        return tuple(measurement_shape)


class BlockDownsampleOperator(ForwardOperator):
    """s x s block averaging; pseudo-inverse replicates each measurement."""

    kind = "sr_block"
    differentiable = True

    def __init__(self, scale: int, sigma_y: float = 0.0):
        super().__init__(sigma_y)
        if scale < 1:
            raise ValidationError("scale must be >= 1")
        self.scale = int(scale)

    def apply(self, x):
        s = self.scale
        c, h, w = x.shape
        if h % s or w % s:
            raise ValidationError(f"dimensions {(h, w)} not divisible by scale {s}")
        blocks = x.data.reshape(c, h // s, s, w // s, s)
        return ImageTensor(blocks.mean(axis=(2, 4)), x.domain)

    def pinv(self, y):
        s = self.scale
        data = np.repeat(np.repeat(y.data, s, axis=1), s, axis=2)
        return ImageTensor(data, y.domain)

    def adjoint(self, y):
        # rows of A are ones/s^2, so A^T replicates with the same weight
        s = self.scale
        rep = np.repeat(np.repeat(y.data, s, axis=1), s, axis=2)
        return ImageTensor(rep / (s * s), y.domain)

    def measurement_shape(self, signal_shape):
        c, h, w = signal_shape
        if h % self.scale or w % self.scale:
            raise ValidationError("signal dims not divisible by scale")
        return (c, h // self.scale, w // self.scale)

    def signal_shape(self, measurement_shape):
        c, h, w = measurement_shape
        return (c, h * self.scale, w * self.scale)


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    grid = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(grid ** 2) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


class NonlinearBlurOperator(ForwardOperator):
    """Gaussian blur followed by tanh saturation: y = tanh(g * G*x) / tanh(g).

    Differentiable but not linear; exposes analytic jvp/vjp so gradient
    descent guidance never needs finite differences.
    """

    kind = "nonlinear_blur"
    differentiable = True

    def __init__(self, kernel_sigma: float, gain: float, sigma_y: float = 0.0):
        super().__init__(sigma_y)
        if kernel_sigma <= 0 or gain <= 0:
            raise ValidationError("kernel_sigma and gain must be positive")
        self.kernel_sigma = float(kernel_sigma)
        self.gain = float(gain)
        self.kernel = _gauss_kernel(kernel_sigma)
        self.radius = self.kernel.shape[0] // 2

    def _conv(self, img: np.ndarray) -> np.ndarray:
        padded = np.pad(img, self.radius, mode="reflect")
        return convolve2d(padded, self.kernel, mode="valid")

    def _conv_transpose(self, img: np.ndarray) -> np.ndarray:
        h, w = img.shape
        full = convolve2d(img, self.kernel, mode="full")
        fold_idx = np.pad(np.arange(h * w).reshape(h, w), self.radius, mode="reflect")
        out = np.zeros(h * w, dtype=np.float64)
        np.add.at(out, fold_idx.ravel(), full.ravel())
        return out.reshape(h, w)

    def _blurred(self, x: ImageTensor) -> np.ndarray:
        if min(x.height, x.width) <= self.radius:
            raise ValidationError("image too small for blur kernel")
        return np.stack([self._conv(ch) for ch in x.data])

    def apply(self, x):
        u = self._blurred(x)
        return ImageTensor(np.tanh(self.gain * u) / np.tanh(self.gain), x.domain)

    def jvp(self, x: ImageTensor, v: ImageTensor) -> ImageTensor:
        u = self._blurred(x)
        slope = self.gain * (1.0 - np.tanh(self.gain * u) ** 2) / np.tanh(self.gain)
        gv = self._blurred(v)
        return ImageTensor(slope * gv, UNBOUNDED)

    def vjp(self, x, w):
        u = self._blurred(x)
        slope = self.gain * (1.0 - np.tanh(self.gain * u) ** 2) / np.tanh(self.gain)
        weighted = slope * w.data
        return ImageTensor(np.stack([self._conv_transpose(ch) for ch in weighted]), UNBOUNDED)

    def measurement_shape(self, signal_shape):
        return tuple(signal_shape)

    def signal_shape(self, measurement_shape):
        return tuple(measurement_shape)


class RadonOperator(ForwardOperator):
    """Parallel-beam Radon transform over angles in [0, 180) degrees.

    Line integrals are accumulated by bilinear interpolation every
    RAY_STEP_PX pixels along each ray; detector count equals the image
    width. The discretization is materialized once as a sparse matrix so
    adjoint() is its exact transpose.
    """

    kind = "radon"
    differentiable = True

    def __init__(self, angles_deg, size: int, sigma_y: float = 0.0):
        super().__init__(sigma_y)
        angles = np.asarray(list(angles_deg), dtype=np.float64)
        if angles.size == 0:
            raise ValidationError("angle list must be non-empty")
        if np.any(angles < 0.0) or np.any(angles >= 180.0):
            raise ValidationError("angles must lie in [0, 180)")
        if size < 2:
            raise ValidationError("image size must be >= 2")
        self.angles = angles
        self.size = int(size)
        self._matrix = None

    @staticmethod
    def equispaced_angles(count: int) -> np.ndarray:
        if count < 1:
            raise ValidationError("angle count must be >= 1")
        return np.arange(count, dtype=np.float64) * (180.0 / count)

    @property
    def matrix(self) -> scipy.sparse.csr_matrix:
        if self._matrix is None:
            self._matrix = self._build_matrix()
        return self._matrix

    def _build_matrix(self):
        n = self.size
        center = (n - 1) / 2.0
        reach = center * np.sqrt(2.0) + 1.0
        ts = np.arange(-reach, reach + RAY_STEP_PX, RAY_STEP_PX)
        det = np.arange(n, dtype=np.float64) - center
        rows, cols, vals = [], [], []
        det_index = np.broadcast_to(np.arange(n)[:, None], (n, ts.size))
        for a, theta in enumerate(np.deg2rad(self.angles)):
            cos_t, sin_t = np.cos(theta), np.sin(theta)
            xs = det[:, None] * cos_t - ts[None, :] * sin_t
            ys = det[:, None] * sin_t + ts[None, :] * cos_t
            colf = xs + center
            rowf = center - ys
            r0 = np.floor(rowf).astype(np.int64)
            c0 = np.floor(colf).astype(np.int64)
            fr = rowf - r0
            fc = colf - c0
            for dr, dc, weight in (
                (0, 0, (1 - fr) * (1 - fc)),
                (0, 1, (1 - fr) * fc),
                (1, 0, fr * (1 - fc)),
                (1, 1, fr * fc),
            ):
                rr = r0 + dr
                cc = c0 + dc
                ok = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n) & (weight > 0)
                rows.append((a * n + det_index)[ok])
                cols.append((rr * n + cc)[ok])
                vals.append((weight * RAY_STEP_PX)[ok])
        mat = scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.angles.size * n, n * n),
        )
        return mat.tocsr()

    def _check_signal(self, x: ImageTensor):
        if x.height != x.width or x.height != self.size:
            raise ValidationError(f"radon expects square {self.size}x{self.size} images, got {x.shape}")

    def apply(self, x):
        self._check_signal(x)
        n = self.size
        sino = np.stack([(self.matrix @ ch.ravel()).reshape(self.angles.size, n) for ch in x.data])
        return ImageTensor(sino, UNBOUNDED)

    def adjoint(self, y):
        n = self.size
        if y.height != self.angles.size or y.width != n:
            raise ShapeMismatch(f"sinogram {y.shape} does not match {self.angles.size} angles x {n} detectors")
        img = np.stack([(self.matrix.T @ ch.ravel()).reshape(n, n) for ch in y.data])
        return ImageTensor(img, UNBOUNDED)

    def measurement_shape(self, signal_shape):
        c, h, w = signal_shape
        return (c, self.angles.size, self.size)

    def signal_shape(self, measurement_shape):
        c = measurement_shape[0]
        return (c, self.size, self.size)


class MatrixOperator(ForwardOperator):
    """Explicit dense linear map on flattened signals; the oracle workhorse."""

    kind = "custom"
    differentiable = True

    def __init__(self, matrix: np.ndarray, signal_dims, sigma_y: float = 0.0, with_pinv: bool = True):
        super().__init__(sigma_y)
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValidationError("matrix must be 2-D")
        c, h, w = signal_dims
        if matrix.shape[1] != c * h * w:
            raise ValidationError("matrix columns must match signal size")
        self.matrix = matrix
        self.dims = (c, h, w)
        self._with_pinv = bool(with_pinv)
        self._pinv_matrix = None

    def apply(self, x):
        if x.shape != self.dims:
            raise ShapeMismatch(f"expected signal {self.dims}, got {x.shape}")
        return ImageTensor((self.matrix @ x.data.ravel()).reshape(1, 1, -1), UNBOUNDED)

    def adjoint(self, y):
        return ImageTensor((self.matrix.T @ y.data.ravel()).reshape(self.dims), UNBOUNDED)

    def pinv(self, y):
        if not self._with_pinv:
            raise CapabilityError("pseudo-inverse disabled for this operator")
        if self._pinv_matrix is None:
            self._pinv_matrix = np.linalg.pinv(self.matrix)
        return ImageTensor((self._pinv_matrix @ y.data.ravel()).reshape(self.dims), UNBOUNDED)

    @property
    def has_pinv(self):
        return self._with_pinv

    def measurement_shape(self, signal_shape):
        return (1, 1, self.matrix.shape[0])

    def signal_shape(self, measurement_shape):
        return self.dims


# ---------------------------------------------------------------------------
# Filtered back-projection and the initial-reconstruction stage
# ---------------------------------------------------------------------------

def ram_lak_filter(length: int) -> np.ndarray:
    """Frequency response of the discrete ramp filter (approximately 2|nu|).

    Built by transforming the exact spatial-domain ramp kernel, which
    avoids the DC bias of sampling the continuous ramp directly.
    """
    odd = np.arange(1, length // 2 + 1, 2)
    kernel = np.zeros(length, dtype=np.float64)
    kernel[0] = 0.25
    kernel[odd] = -1.0 / (np.pi * odd) ** 2
    kernel[-odd] = -1.0 / (np.pi * odd) ** 2
    return 2.0 * np.real(np.fft.fft(kernel))


def _catmull_rom(queries: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Cubic interpolation of a 1-D profile; zero outside its support."""
    n = values.shape[0]
    base = np.floor(queries).astype(np.int64)
    f = queries - base
    idx = np.stack([base - 1, base, base + 1, base + 2])
    weights = np.stack([
        ((-0.5 * f + 1.0) * f - 0.5) * f,
        (1.5 * f - 2.5) * f * f + 1.0,
        ((-1.5 * f + 2.0) * f + 0.5) * f,
        (0.5 * f - 0.5) * f * f,
    ])
    vals = np.where((idx >= 0) & (idx < n), values[np.clip(idx, 0, n - 1)], 0.0)
    inside = (queries >= 0.0) & (queries <= n - 1)
    return np.where(inside, (weights * vals).sum(axis=0), 0.0)


def fbp(sinogram: ImageTensor, angles_deg, size: int | None = None) -> ImageTensor:
    """Ram-Lak filtered back-projection matched to RadonOperator geometry."""
    angles = np.asarray(list(angles_deg), dtype=np.float64)
    if angles.size == 0:
        raise ValidationError("angle list must be non-empty")
    if sinogram.height != angles.size:
        raise ShapeMismatch(f"sinogram rows {sinogram.height} != angle count {angles.size}")
    n_det = sinogram.width
    if size is None:
        size = n_det
    if size != n_det:
        raise ShapeMismatch(f"detector count {n_det} does not match target width {size}")

    pad = 1 << max(6, int(2 * n_det - 1).bit_length())
    filt = ram_lak_filter(pad)
    center = (size - 1) / 2.0
    cols = np.arange(size, dtype=np.float64) - center
    xs, ys = np.meshgrid(cols, -cols)  # ys positive at the top row
    det_offset = (n_det - 1) / 2.0

    out = np.zeros((sinogram.channels, size, size), dtype=np.float64)
    for ch in range(sinogram.channels):
        padded = np.zeros((angles.size, pad), dtype=np.float64)
        padded[:, :n_det] = sinogram.data[ch]
        filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * filt[None, :], axis=1))[:, :n_det]
        recon = np.zeros((size, size), dtype=np.float64)
        for a, theta in enumerate(np.deg2rad(angles)):
            s = xs * np.cos(theta) + ys * np.sin(theta) + det_offset
            recon += _catmull_rom(s.ravel(), filtered[a]).reshape(size, size)
        out[ch] = recon * (np.pi / (2.0 * angles.size))
    return ImageTensor(out, UNBOUNDED)


def circle_mask(size: int) -> np.ndarray:
    """Inscribed reconstruction circle; parallel-beam corners are undefined."""
    center = (size - 1) / 2.0
    cols = np.arange(size, dtype=np.float64) - center
    xs, ys = np.meshgrid(cols, cols)
    return (xs * xs + ys * ys) <= center * center


def bilinear_resize(x: ImageTensor, height: int, width: int) -> ImageTensor:
    """Resize with half-pixel-aligned bilinear sampling (edge clamped)."""
    c, h, w = x.shape
    row_src = np.clip(((np.arange(height) + 0.5) * h / height) - 0.5, 0, h - 1)
    col_src = np.clip(((np.arange(width) + 0.5) * w / width) - 0.5, 0, w - 1)
    r0 = np.floor(row_src).astype(np.int64)
    c0 = np.floor(col_src).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (row_src - r0)[:, None]
    fc = (col_src - c0)[None, :]
    out = np.empty((c, height, width), dtype=np.float64)
    for ch in range(c):
        img = x.data[ch]
        top = img[np.ix_(r0, c0)] * (1 - fc) + img[np.ix_(r0, c1)] * fc
        bot = img[np.ix_(r1, c0)] * (1 - fc) + img[np.ix_(r1, c1)] * fc
        out[ch] = top * (1 - fr) + bot * fr
    return ImageTensor(out, x.domain)


def initial_reconstruction(y: ImageTensor, op: ForwardOperator) -> ImageTensor:
    """Stage-1 projection of the measurement into signal space.

    Linear kinds with a cheap pseudo-inverse use it directly, CT uses
    filtered back-projection, and anything else falls back to resizing
    the measurement to the signal shape.
    """
    if op.kind == "inpaint" or op.kind == "sr_block":
        recon = op.pinv(y)
    elif op.kind == "radon":
        recon = fbp(y, op.angles, size=op.size)
    elif op.kind in ("nonlinear_blur", "custom"):
        if op.has_pinv:
            recon = op.pinv(y)
        else:
            c, h, w = op.signal_shape(y.shape)
            flat = y.data.reshape(1, 1, -1) if y.height == 1 else y.data
            recon = bilinear_resize(ImageTensor(flat, y.domain), h, w)
            if recon.channels != c:
                recon = ImageTensor(np.broadcast_to(recon.data[:1], (c, h, w)).copy(), recon.domain)
    else:
        raise ValidationError(f"unknown operator kind {op.kind!r}")
    return ImageTensor(recon.data, MODEL)
