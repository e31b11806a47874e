"""Residual feature adapter inserted between feature extractor and channel mapper.

``Z* = Z + conv2(relu(conv1(Z)))`` with both convs ``S -> S``.  Only this
module is trained at test time; the backbone stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneSplit, he_weight, zero_bias
from .errors import ConfigError, DimensionError
from .raster_io import WeightArchive
from .rng import numpy_rng
from .tensor import Tensor, conv2d, relu

INIT_MODES = ("he", "zero_first", "zero")
PARAM_NAMES = ("ft.conv1.w", "ft.conv1.b", "ft.conv2.w", "ft.conv2.b")


@dataclass
class FeatureTailor:
    """Two 3x3 convs of width ``features`` with a relu in between.

    ``init_mode`` records how the weights were drawn: ``he`` (both layers
    random), ``zero_first`` (first layer exactly zero) or ``zero`` (every
    parameter zero, an exact identity map).
    """

    features: int
    init_mode: str = "he"
    padding: str = "reflect"
    params: dict = field(default_factory=dict)

    @property
    def trainable(self) -> bool:
        return all(p.requires_grad for p in self.params.values())

    @property
    def dtype(self):
        return self.params["ft.conv1.w"].dtype

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in PARAM_NAMES]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def freeze(self) -> "FeatureTailor":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "FeatureTailor":
        for p in self.params.values():
            p.requires_grad = True
        return self

    @property
    def receptive_radius(self) -> int:
        return 2

    def snapshot(self) -> dict:
        return {n: p.data.copy() for n, p in self.params.items()}

    def forward(self, z: Tensor) -> Tensor:
        return tailor_forward(z, self)

    def to_archive(self) -> WeightArchive:
        return WeightArchive(params={n: self.params[n].data.astype(np.float32) for n in PARAM_NAMES},
                             features=self.features, channels=self.features, blocks=1)

    @classmethod
    def from_archive(cls, archive: WeightArchive, dtype=np.float32) -> "FeatureTailor":
        if set(archive.params) != set(PARAM_NAMES):
            raise DimensionError("weight archive does not describe a feature tailor")
        s = archive.features
        if archive.params["ft.conv1.w"].shape != (s, s, 3, 3):
            raise DimensionError(f"tailor weights do not match width {s}")
        tailor = cls(features=s, init_mode="loaded")
        tailor.params = {n: Tensor(archive.params[n], requires_grad=False, dtype=dtype) for n in PARAM_NAMES}
        return tailor


def build_tailor(features: int, init_mode: str = "he", seed: int = 0, dtype=np.float32) -> FeatureTailor:
    if features < 1:
        raise ConfigError(f"tailor width must be >= 1, got {features}")
    if init_mode not in INIT_MODES:
        raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {init_mode!r}")
    rng = numpy_rng(seed, "tailor-init")
    w1 = he_weight(rng, features, features, dtype=dtype)
    w2 = he_weight(rng, features, features, dtype=dtype)
    b1, b2 = zero_bias(features, dtype), zero_bias(features, dtype)
    if init_mode in ("zero_first", "zero"):
        w1.data[...] = 0
    if init_mode == "zero":
        w2.data[...] = 0
    tailor = FeatureTailor(features=features, init_mode=init_mode)
    tailor.params = dict(zip(PARAM_NAMES, (w1, b1, w2, b2)))
    return tailor


def tailor_forward(z: Tensor, tailor: FeatureTailor) -> Tensor:
    """``z + G(z)``; ``z`` is treated as a constant input."""
    if z.shape[1] != tailor.features:
        raise DimensionError(f"tailor expects {tailor.features} feature channels, got {z.shape[1]}")
    P = tailor.params
    h = relu(conv2d(z, P["ft.conv1.w"], P["ft.conv1.b"], tailor.padding))
    h = conv2d(h, P["ft.conv2.w"], P["ft.conv2.b"], tailor.padding)
    return z + h


def tailored_forward(backbone: BackboneSplit, tailor: FeatureTailor, lrms, pan) -> Tensor:
    """Backbone output with the tailor applied to the intermediate features."""
    z = backbone.fe_forward(lrms, pan).detach()
    return backbone.cm_forward(tailor_forward(z, tailor), lrms)
