"""Unsupervised objective used to adapt the feature tailor on a single image.

Three terms, all mean absolute errors:

* spectral: the output, blurred with the MS sensor MTF and decimated, should
  reproduce the LRMS input;
* spatial: the output should equal its own blurred version modulated by the
  PAN detail ratio ``P / blur(P)``;
* consistency: the output should stay close to the frozen backbone output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .degrade import (MS_NYQUIST_GAIN, PAN_NYQUIST_GAIN, MtfKernel, build_mtf_kernel,
                      decimate, mtf_blur)
from .errors import ConfigError, DimensionError, GeometryError
from .tensor import Tensor, add_all, as_tensor, eltwise, l1_mean, scale


@dataclass(frozen=True)
class LossWeights:
    spectral: float = 1.0
    spatial: float = 1.0
    consistency: float = 0.1

    def __post_init__(self):
        for name in ("spectral", "spatial", "consistency"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v}")

    @classmethod
    def simulated(cls) -> "LossWeights":
        """Heavier weighting used when adapting on reduced-resolution data."""
        return cls(spectral=10.0, spatial=100.0, consistency=10000.0)

    def as_tuple(self) -> tuple:
        return (self.spectral, self.spatial, self.consistency)


@dataclass
class LossKernels:
    """MTF kernels for the spectral term (``ms``) and the spatial term (``pan``)."""

    ms: MtfKernel
    pan: MtfKernel

    @property
    def ratio(self) -> int:
        return self.ms.ratio

    @classmethod
    def default(cls, ratio: int = 4, ms_gain: float = MS_NYQUIST_GAIN,
                pan_gain: float = PAN_NYQUIST_GAIN) -> "LossKernels":
        return cls(ms=build_mtf_kernel(ratio, ms_gain), pan=build_mtf_kernel(ratio, pan_gain))


@dataclass
class LossBreakdown:
    spectral: float
    spatial: float
    consistency: float
    total: float
    tensor: Tensor | None = None

    def row(self) -> tuple:
        return (self.spectral, self.spatial, self.consistency, self.total)


def spectral_loss(x: Tensor, lrms, kernel: MtfKernel, r: int | None = None) -> Tensor:
    r = r or kernel.ratio
    y = as_tensor(lrms, x.dtype)
    if x.shape[2] != r * y.shape[2] or x.shape[3] != r * y.shape[3]:
        raise GeometryError(f"output {x.shape[2:]} is not {r}x LRMS {y.shape[2:]}")
    if x.shape[:2] != y.shape[:2]:
        raise DimensionError(f"output {x.shape[:2]} and LRMS {y.shape[:2]} differ in batch or bands")
    return l1_mean(decimate(mtf_blur(x, kernel), r), y)


def pan_detail_ratio(pan, kernel: MtfKernel) -> Tensor:
    """``P / blur(P)`` with the guarded division, as a constant tensor."""
    p = as_tensor(pan)
    if p.requires_grad:
        p = p.detach()
    return eltwise(p, mtf_blur(p, kernel), "div_guard")


def spatial_loss(x: Tensor, pan, kernel: MtfKernel) -> Tensor:
    """``l1(x, blur(x) * P / blur(P))``; one kernel serves both blurs."""
    p = as_tensor(pan, x.dtype)
    if p.shape[1] != 1:
        raise DimensionError(f"PAN must have one band, got {p.shape[1]}")
    if p.shape[0] != x.shape[0] or p.shape[2:] != x.shape[2:]:
        raise GeometryError(f"output {x.shape} and PAN {p.shape} are not aligned")
    if kernel.bands != 1:
        raise DimensionError("the spatial term needs a single-band (PAN) kernel")
    target = eltwise(mtf_blur(x, kernel), pan_detail_ratio(p, kernel), "mul")
    return l1_mean(x, target)


def consistency_loss(x: Tensor, x0) -> Tensor:
    """``l1(x, x0)`` with ``x0`` cut from the graph."""
    x0 = as_tensor(x0, x.dtype).detach()
    if x0.shape != x.shape:
        raise DimensionError(f"consistency needs equal shapes, got {x.shape} and {x0.shape}")
    return l1_mean(x, x0)


def total_loss(weights: LossWeights, x: Tensor, x0, lrms, pan, kernels: LossKernels) -> LossBreakdown:
    spe = spectral_loss(x, lrms, kernels.ms)
    spa = spatial_loss(x, pan, kernels.pan)
    ori = consistency_loss(x, x0)
    total = add_all([scale(spe, weights.spectral), scale(spa, weights.spatial),
                     scale(ori, weights.consistency)])
    return LossBreakdown(spectral=spe.item(), spatial=spa.item(), consistency=ori.item(),
                         total=total.item(), tensor=total)


def weighted_sum(weights: LossWeights, spectral: float, spatial: float, consistency: float,
                 dtype=np.float32) -> float:
    """Reference for :attr:`LossBreakdown.total`, same precision and order."""
    t = dtype(spectral) * dtype(weights.spectral)
    t = t + dtype(spatial) * dtype(weights.spatial)
    t = t + dtype(consistency) * dtype(weights.consistency)
    return float(t)
