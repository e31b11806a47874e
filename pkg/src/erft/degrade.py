"""MTF-matched blur, decimation, reduced-scale simulation and synthetic scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DimensionError, GeometryError
from .raster_io import ImagePair, RasterImage
from .rng import numpy_rng
from .tensor import Tensor, decimate_tensor, separable_conv2d

MS_NYQUIST_GAIN = 0.30
PAN_NYQUIST_GAIN = 0.15


@dataclass
class MtfKernel:
    """Per-band Gaussian taps whose response at the low-res Nyquist equals ``gains``.

    ``taps`` holds the 1-D profile of each band, shape ``(bands, m)``; the
    2-D kernel is the outer product of a profile with itself.
    """

    taps: np.ndarray
    ratio: int
    gains: np.ndarray
    sigmas: np.ndarray

    @property
    def bands(self) -> int:
        return self.taps.shape[0]

    @property
    def size(self) -> int:
        return self.taps.shape[1]

    @property
    def taps2d(self) -> np.ndarray:
        return np.einsum("bi,bj->bij", self.taps, self.taps)


def mtf_sigma(r: int, gain: float) -> float:
    """Gaussian std (pixels) whose frequency response is ``gain`` at ``1/(2r)``."""
    return (r / math.pi) * math.sqrt(2.0 * math.log(1.0 / gain))


def build_mtf_kernel(r: int, gains, m: int | None = None) -> MtfKernel:
    gains = np.atleast_1d(np.asarray(gains, dtype=np.float64))
    if r < 2:
        raise ConfigError(f"ratio must be >= 2, got {r}")
    if np.any(gains <= 0) or np.any(gains >= 1):
        raise ConfigError(f"Nyquist gains must lie in (0, 1), got {gains}")
    sigmas = np.array([mtf_sigma(r, g) for g in gains])
    if m is None:
        m = 2 * math.ceil(3 * sigmas.max()) + 1
    if m % 2 == 0 or m < 1:
        raise ConfigError(f"kernel size must be odd, got {m}")
    x = np.arange(m) - m // 2
    taps = np.exp(-0.5 * (x[None, :] / sigmas[:, None]) ** 2)
    taps /= taps.sum(axis=1, keepdims=True)
    return MtfKernel(taps=taps, ratio=r, gains=gains, sigmas=sigmas)


def _check_bands(channels: int, kernel: MtfKernel) -> None:
    if kernel.bands not in (1, channels):
        raise DimensionError(f"kernel has {kernel.bands} bands, image has {channels}")


def mtf_blur(image, kernel: MtfKernel, padding: str = "symmetric"):
    """Blur each band with its MTF kernel; Tensors stay differentiable."""
    if isinstance(image, Tensor):
        _check_bands(image.shape[1], kernel)
        return separable_conv2d(image, kernel.taps, padding)
    arr = image.data if isinstance(image, RasterImage) else np.asarray(image, dtype=np.float32)
    _check_bands(arr.shape[0], kernel)
    out = separable_conv2d(Tensor(arr[None]), kernel.taps, padding).data[0]
    return RasterImage(out) if isinstance(image, RasterImage) else out


def decimate(image, r: int, offset: int | None = None):
    """Keep the samples at rows/cols congruent to ``r // 2`` modulo ``r``."""
    shape = image.shape
    h, w = shape[-2], shape[-1]
    if h % r or w % r:
        raise GeometryError(f"{h}x{w} image is not divisible by ratio {r}")
    if isinstance(image, Tensor):
        return decimate_tensor(image, r, offset)
    off = r // 2 if offset is None else offset
    arr = image.data if isinstance(image, RasterImage) else np.asarray(image)
    out = np.ascontiguousarray(arr[..., off::r, off::r])
    return RasterImage(out) if isinstance(image, RasterImage) else out


def degrade(image, kernel: MtfKernel, r: int | None = None):
    """``decimate(mtf_blur(image))`` at the kernel's ratio."""
    return decimate(mtf_blur(image, kernel), r or kernel.ratio)


@dataclass
class WaldTriple:
    lrms: RasterImage
    pan: RasterImage
    gt: RasterImage
    ratio: int

    @property
    def pair(self) -> ImagePair:
        return ImagePair(pan=self.pan, lrms=self.lrms, ratio=self.ratio)


def wald_simulate(gt_ms, pan_hr, kernel: MtfKernel, r: int,
                  pan_kernel: MtfKernel | None = None) -> WaldTriple:
    """Build a training/evaluation triple whose reference is ``gt_ms``.

    ``pan_hr`` may share the grid of ``gt_ms`` (used as-is) or be ``r`` times
    larger, in which case it is MTF-blurred and decimated to the GT grid.
    """
    gt = gt_ms if isinstance(gt_ms, RasterImage) else RasterImage(gt_ms)
    pan = pan_hr if isinstance(pan_hr, RasterImage) else RasterImage(pan_hr)
    if pan.shape[1:] == gt.shape[1:]:
        pan_lr = pan
    elif pan.shape[1:] == (r * gt.height, r * gt.width):
        pan_kernel = pan_kernel or build_mtf_kernel(r, PAN_NYQUIST_GAIN)
        pan_lr = degrade(pan, pan_kernel, r)
    else:
        raise GeometryError(f"PAN {pan.shape[1:]} is neither aligned with GT {gt.shape[1:]} nor {r}x larger")
    lrms = degrade(gt, kernel, r)
    return WaldTriple(lrms=lrms, pan=RasterImage(pan_lr.data.copy()), gt=gt, ratio=r)


def synth_scene(seed: int, channels: int, height: int, width: int, ratio: int = 4):
    """Deterministic multiband scene and its panchromatic companion.

    Bands mix a few material signatures through smooth abundance maps, with
    sharp rectangles, straight shading edges and fine shared texture on top.
    """
    if height % ratio or width % ratio:
        raise GeometryError(f"{height}x{width} scene is not divisible by ratio {ratio}")
    rng = numpy_rng(seed, "synth-scene")
    n_mat = 5
    curves = np.cumsum(rng.normal(size=(n_mat, channels)), axis=1)
    curves -= curves.min(axis=1, keepdims=True)
    curves /= np.maximum(curves.max(axis=1, keepdims=True), 1e-6)
    brightness = rng.uniform(0.15, 0.9, size=(n_mat, 1))
    signatures = brightness * (0.4 + 0.6 * curves)

    scale = max(height, width) / 12.0
    logits = np.stack([gaussian_filter(rng.normal(size=(height, width)), scale, mode="wrap")
                       for _ in range(n_mat)])
    logits /= logits.std(axis=(1, 2), keepdims=True)
    abund = np.exp(3.0 * logits)
    abund /= abund.sum(axis=0, keepdims=True)

    for _ in range(max(4, (height * width) // 2048)):
        rh = int(rng.integers(3, max(4, height // 6)))
        rw = int(rng.integers(3, max(4, width // 6)))
        top = int(rng.integers(0, height - rh))
        left = int(rng.integers(0, width - rw))
        onehot = np.zeros(n_mat)
        onehot[rng.integers(n_mat)] = 1.0
        abund[:, top:top + rh, left:left + rw] = onehot[:, None, None]

    yy, xx = np.mgrid[0:height, 0:width]
    shade = np.ones((height, width))
    for _ in range(3):
        angle = rng.uniform(0, np.pi)
        offset = rng.uniform(0.2, 0.8) * (height * abs(np.sin(angle)) + width * abs(np.cos(angle)))
        side = (xx * np.cos(angle) + yy * np.sin(angle)) > offset
        shade *= np.where(side, rng.uniform(0.8, 1.2), 1.0)

    texture = gaussian_filter(rng.normal(size=(height, width)), 1.0, mode="wrap")
    bands = shade[None] * np.einsum("khw,kc->chw", abund, signatures)
    bands += 0.15 * texture[None] + 0.002 * rng.normal(size=(channels, height, width))
    gt = np.clip(bands, 0.0, 1.0)

    weights = rng.uniform(0.5, 1.5, size=channels)
    pan = np.tensordot(weights, gt, axes=1) / weights.sum()
    pan = pan + 0.15 * (pan - gaussian_filter(pan, 1.0, mode="reflect"))
    pan = np.clip(pan, 0.0, 1.0)
    return RasterImage(gt.astype(np.float32)), RasterImage(pan[None].astype(np.float32))


@dataclass
class SensorShift:
    """Per-band radiometric distortion ``clip(gain * x**gamma + offset, 0, 1)``."""

    gain: np.ndarray
    offset: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.gain = np.atleast_1d(np.asarray(self.gain, dtype=np.float64))
        self.offset = np.atleast_1d(np.asarray(self.offset, dtype=np.float64))
        self.gamma = np.atleast_1d(np.asarray(self.gamma if self.gamma is not None else 1.0, dtype=np.float64))
        if np.any(self.gain <= 0) or np.any(self.gamma <= 0):
            raise ConfigError("sensor shift gains and gammas must be positive")

    @classmethod
    def uniform(cls, gain: float, offset: float, gamma: float = 1.0) -> "SensorShift":
        return cls(gain=gain, offset=offset, gamma=gamma)


def apply_sensor_shift(image, shift: SensorShift):
    arr = image.data if isinstance(image, RasterImage) else np.asarray(image, dtype=np.float32)
    c = arr.shape[0]
    params = []
    for v in (shift.gain, shift.offset, shift.gamma):
        if v.size not in (1, c):
            raise DimensionError(f"shift has {v.size} bands, image has {c}")
        params.append(np.broadcast_to(v, (c,))[:, None, None])
    g, o, gamma = params
    out = np.clip(g * np.maximum(arr, 0.0) ** gamma + o, 0.0, 1.0).astype(np.float32)
    return RasterImage(out) if isinstance(image, RasterImage) else out
