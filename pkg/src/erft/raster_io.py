"""Binary raster and weight containers, plus PAN/LRMS pair validation.

Raster layout (little-endian)::

    b"ERFT" | u16 version=1 | u32 C | u32 H | u32 W | C*H*W float32, band-major

Weight archive layout (little-endian)::

    b"ERFW" | u16 version=1 | u32 S | u32 C | u32 k | u32 count
    then per entry: u16 name length | utf-8 name | u8 ndim | u32 dims[ndim]
                    | prod(dims) float32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError, ValidationError

RASTER_MAGIC = b"ERFT"
WEIGHTS_MAGIC = b"ERFW"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class RasterImage:
    """Planar ``C x H x W`` float32 image."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"raster must be C x H x W with positive sizes, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass
class ImagePair:
    pan: RasterImage
    lrms: RasterImage
    ratio: int


@dataclass
class WeightArchive:
    """Named float32 blobs plus the network dimensions they belong to.

    ``params`` is normally a dict; a list of ``(name, array)`` pairs is also
    accepted by :func:`write_weights`, which rejects repeated names.
    """

    params: dict = field(default_factory=dict)
    features: int = 0
    channels: int = 0
    blocks: int = 0
    version: int = FORMAT_VERSION


def _as_raster(image) -> RasterImage:
    return image if isinstance(image, RasterImage) else RasterImage(image)


def write_raster(image, path) -> None:
    image = _as_raster(image)
    if not np.all(np.isfinite(image.data)):
        raise ValidationError(f"refusing to write non-finite samples to {path}")
    c, h, w = image.shape
    header = RASTER_MAGIC + struct.pack("<HIII", FORMAT_VERSION, c, h, w)
    Path(path).write_bytes(header + image.data.astype(_F32).tobytes())


def read_raster(path) -> RasterImage:
    blob = Path(path).read_bytes()
    if len(blob) < 18:
        raise OSError(f"{path}: truncated raster header")
    if blob[:4] != RASTER_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, c, h, w = struct.unpack_from("<HIII", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported raster version {version}")
    count = c * h * w
    if len(blob) != 18 + 4 * count:
        raise OSError(f"{path}: expected {count} samples, file holds {(len(blob) - 18) / 4:g}")
    data = np.frombuffer(blob, dtype=_F32, count=count, offset=18).reshape(c, h, w)
    return RasterImage(data.astype(np.float32))


def write_weights(archive: WeightArchive, path) -> None:
    parts = [WEIGHTS_MAGIC, struct.pack("<HIIII", FORMAT_VERSION, archive.features,
                                        archive.channels, archive.blocks, len(archive.params))]
    items = list(archive.params.items()) if isinstance(archive.params, dict) else list(archive.params)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate parameter names in weight archive")
    for name, blob in items:
        arr = np.asarray(blob, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"parameter {name!r} holds non-finite values")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype(_F32).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_weights(path) -> WeightArchive:
    blob = Path(path).read_bytes()
    if len(blob) < 22:
        raise OSError(f"{path}: truncated weight header")
    if blob[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, s, c, k, count = struct.unpack_from("<HIIII", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported weight archive version {version}")
    pos = 22
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape))
            if pos + 4 * n > len(blob):
                raise OSError(f"{path}: truncated data for {name!r}")
            if name in params:
                raise ValidationError(f"{path}: duplicate parameter name {name!r}")
            params[name] = np.frombuffer(blob, dtype=_F32, count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise OSError(f"{path}: truncated weight archive") from exc
    return WeightArchive(params=params, features=s, channels=c, blocks=k, version=version)


def validate_pair(pan, lrms, r: int) -> ImagePair:
    """Check that ``pan`` is exactly ``r`` times the size of ``lrms``."""
    pan, lrms = _as_raster(pan), _as_raster(lrms)
    if pan.channels != 1:
        raise GeometryError(f"PAN must have one band, got {pan.channels}")
    if r < 2:
        raise GeometryError(f"ratio must be >= 2, got {r}")
    if pan.height != r * lrms.height or pan.width != r * lrms.width:
        raise GeometryError(
            f"PAN {pan.height}x{pan.width} is not {r}x LRMS "
            f"{lrms.channels}x{lrms.height}x{lrms.width}")
    return ImagePair(pan=pan, lrms=lrms, ratio=r)
