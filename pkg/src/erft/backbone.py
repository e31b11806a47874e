"""A small fusion CNN explicitly cut into feature extractor and channel mapper.

The network takes an LRMS image ``Y`` (C bands at 1/r scale) and a PAN image
``P``.  The feature extractor upsamples ``Y``, stacks it with ``P``, applies
one 3x3 conv to ``S`` channels and ``k`` residual blocks, giving the feature
map ``Z``.  The channel mapper is a single 3x3 conv ``S -> C`` plus the
upsampled ``Y`` as a residual shortcut.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, GeometryError
from .raster_io import ImagePair, RasterImage, WeightArchive
from .rng import numpy_rng
from .tensor import (Adam, Tensor, backward, bilinear_upsample, concat, conv2d,
                     l1_mean, relu)

log = logging.getLogger(__name__)


def he_weight(rng: np.random.Generator, cout: int, cin: int, k: int = 3, gain: float = 1.0, dtype=np.float32):
    std = gain * np.sqrt(2.0 / (cin * k * k))
    return Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True, dtype=dtype)


def zero_bias(cout: int, dtype=np.float32):
    return Tensor(np.zeros((1, cout, 1, 1)), requires_grad=True, dtype=dtype)


def as_batch(x, dtype=np.float32) -> Tensor:
    """RasterImage / ``(C, H, W)`` array / Tensor -> ``(1, C, H, W)`` Tensor."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, RasterImage):
        x = x.data
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[None]
    return Tensor(x, dtype=dtype)


@dataclass
class BackboneSplit:
    channels: int
    features: int
    blocks: int
    ratio: int = 4
    padding: str = "reflect"
    params: dict = field(default_factory=dict)

    # -- parameter bookkeeping -------------------------------------------------
    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def fe_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("fe.")]

    def cm_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("cm.")]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def freeze(self) -> "BackboneSplit":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "BackboneSplit":
        for p in self.params.values():
            p.requires_grad = True
        return self

    @property
    def receptive_radius(self) -> int:
        """Number of 3x3 convolutions between the inputs and the output."""
        return 2 * self.blocks + 2

    def snapshot(self) -> dict:
        return {n: p.data.copy() for n, p in self.params.items()}

    # -- forward passes --------------------------------------------------------
    def _inputs(self, lrms, pan) -> tuple[Tensor, Tensor]:
        y = as_batch(lrms, self.dtype)
        p = as_batch(pan, self.dtype)
        if y.shape[1] != self.channels:
            raise DimensionError(f"backbone expects {self.channels} bands, LRMS has {y.shape[1]}")
        if p.shape[1] != 1:
            raise DimensionError(f"PAN must have one band, got {p.shape[1]}")
        r = self.ratio
        if p.shape[2:] != (r * y.shape[2], r * y.shape[3]):
            raise GeometryError(f"PAN {p.shape[2:]} is not {r}x LRMS {y.shape[2:]}")
        return y, p

    def upsample(self, lrms) -> Tensor:
        return bilinear_upsample(as_batch(lrms, self.dtype), self.ratio)

    def fe_forward(self, lrms, pan) -> Tensor:
        y, p = self._inputs(lrms, pan)
        P = self.params
        x = concat([bilinear_upsample(y, self.ratio), p])
        z = relu(conv2d(x, P["fe.in.w"], P["fe.in.b"], self.padding))
        for i in range(self.blocks):
            h = relu(conv2d(z, P[f"fe.block{i}.conv1.w"], P[f"fe.block{i}.conv1.b"], self.padding))
            h = conv2d(h, P[f"fe.block{i}.conv2.w"], P[f"fe.block{i}.conv2.b"], self.padding)
            z = z + h
        return z

    def cm_forward(self, z: Tensor, lrms) -> Tensor:
        if z.shape[1] != self.features:
            raise DimensionError(f"channel mapper expects {self.features} feature channels, got {z.shape[1]}")
        out = conv2d(z, self.params["cm.w"], self.params["cm.b"], self.padding)
        return out + self.upsample(lrms)

    def forward(self, lrms, pan) -> Tensor:
        return self.cm_forward(self.fe_forward(lrms, pan), lrms)

    # -- persistence -----------------------------------------------------------
    def to_archive(self) -> WeightArchive:
        return WeightArchive(params={n: p.data.astype(np.float32) for n, p in self.params.items()},
                             features=self.features, channels=self.channels, blocks=self.blocks)

    @classmethod
    def from_archive(cls, archive: WeightArchive, ratio: int = 4, dtype=np.float32) -> "BackboneSplit":
        net = cls(channels=archive.channels, features=archive.features, blocks=archive.blocks, ratio=ratio)
        expected = set(_param_shapes(archive.channels, archive.features, archive.blocks))
        if set(archive.params) != expected:
            raise DimensionError("weight archive does not describe a backbone with these dimensions")
        net.params = {n: Tensor(archive.params[n], dtype=dtype) for n in _param_shapes(
            archive.channels, archive.features, archive.blocks)}
        return net


def _param_shapes(channels: int, features: int, blocks: int) -> dict:
    shapes = {"fe.in.w": (features, channels + 1, 3, 3), "fe.in.b": (1, features, 1, 1)}
    for i in range(blocks):
        for j in (1, 2):
            shapes[f"fe.block{i}.conv{j}.w"] = (features, features, 3, 3)
            shapes[f"fe.block{i}.conv{j}.b"] = (1, features, 1, 1)
    shapes["cm.w"] = (channels, features, 3, 3)
    shapes["cm.b"] = (1, channels, 1, 1)
    return shapes


def build_backbone(channels: int, features: int = 32, blocks: int = 4, seed: int = 0,
                   ratio: int = 4, dtype=np.float32) -> BackboneSplit:
    """Fan-in scaled random init; residual branches and the mapper start small."""
    if features < channels:
        raise ConfigError(f"feature width {features} must be >= band count {channels}")
    if blocks < 1:
        raise ConfigError("at least one residual block is required")
    rng = numpy_rng(seed, "backbone-init")
    net = BackboneSplit(channels=channels, features=features, blocks=blocks, ratio=ratio)
    params = {"fe.in.w": he_weight(rng, features, channels + 1, dtype=dtype),
              "fe.in.b": zero_bias(features, dtype)}
    for i in range(blocks):
        params[f"fe.block{i}.conv1.w"] = he_weight(rng, features, features, dtype=dtype)
        params[f"fe.block{i}.conv1.b"] = zero_bias(features, dtype)
        params[f"fe.block{i}.conv2.w"] = he_weight(rng, features, features, gain=0.1, dtype=dtype)
        params[f"fe.block{i}.conv2.b"] = zero_bias(features, dtype)
    params["cm.w"] = he_weight(rng, channels, features, gain=0.1, dtype=dtype)
    params["cm.b"] = zero_bias(channels, dtype)
    net.params = params
    return net


def full_forward(pair: ImagePair, net: BackboneSplit) -> Tensor:
    return net.forward(pair.lrms, pair.pan)


def _crop_batch(triples, idx: int, rng, crop: int, count: int, r: int):
    t = triples[idx]
    h, w = t.pan.height, t.pan.width
    ys, ps, gs = [], [], []
    for _ in range(count):
        top = int(rng.integers(0, (h - crop) // r + 1)) * r
        left = int(rng.integers(0, (w - crop) // r + 1)) * r
        ps.append(t.pan.data[:, top:top + crop, left:left + crop])
        gs.append(t.gt.data[:, top:top + crop, left:left + crop])
        ys.append(t.lrms.data[:, top // r:(top + crop) // r, left // r:(left + crop) // r])
    return np.stack(ys), np.stack(ps), np.stack(gs)


def pretrain(net: BackboneSplit, triples, epochs: int = 50, lr: float = 1e-3, seed: int = 0,
             crop: int = 64, crops_per_step: int = 4) -> list[float]:
    """Supervised L1 training on simulated ``(lrms, pan, gt)`` triples.

    Each epoch visits the triples in order; every visit draws
    ``crops_per_step`` aligned crops of ``crop`` PAN pixels and takes one
    Adam step.  The learning rate follows a cosine decay from ``lr`` towards
    zero over the epochs.  Returns the mean training loss of every epoch.
    """
    triples = list(triples)
    if not triples:
        raise ConfigError("pretraining needs at least one training triple")
    r = net.ratio
    if crop % r:
        raise ConfigError(f"crop {crop} must be divisible by ratio {r}")
    for t in triples:
        if t.lrms.channels != net.channels or t.ratio != r:
            raise DimensionError("all triples must share the backbone's band count and ratio")
        if t.pan.height < crop or t.pan.width < crop:
            raise GeometryError(f"crop {crop} exceeds scene size {t.pan.height}x{t.pan.width}")
    net.unfreeze()
    params = net.parameters()
    opt = Adam(params, lr=lr, weight_decay=0.0)
    rng = numpy_rng(seed, "pretrain-crops")
    history = []
    for epoch in range(epochs):
        opt.state.lr = lr * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs))
        total = 0.0
        for idx in range(len(triples)):
            y, p, g = _crop_batch(triples, idx, rng, crop, crops_per_step, r)
            loss = l1_mean(net.forward(Tensor(y, dtype=net.dtype), Tensor(p, dtype=net.dtype)),
                           Tensor(g, dtype=net.dtype))
            backward(loss, params)
            opt.step()
            total += loss.item()
        history.append(total / len(triples))
        log.info("pretrain epoch %d loss %.6f", epoch, history[-1])
    net.freeze()
    return history
