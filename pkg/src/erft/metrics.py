"""Fusion quality metrics.

No-reference (full resolution): ``d_lambda``, ``d_s`` and their product
``hqnr``.  With a reference (reduced resolution): ``sam``, ``ergas``,
``scc`` and the hypercomplex index ``q2n``.

All window statistics use population moments on a grid of ``window`` x
``window`` blocks taken every ``stride`` pixels; a block whose index
denominator falls below ``1e-12`` carries no information and is skipped.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import convolve

from .degrade import MtfKernel, decimate, mtf_blur
from .errors import ConfigError, DimensionError, MetricUndefinedError, ValidationError
from .raster_io import RasterImage

WINDOW = 32
STRIDE = 32
DEGENERATE_EPS = 1e-12
METRIC_COLUMNS = ("image_id", "d_lambda", "d_s", "hqnr", "sam_deg", "ergas", "scc", "q2n", "wall_time_s")
LAPLACIAN = np.array([[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]], dtype=np.float64)


def _array(x) -> np.ndarray:
    if isinstance(x, RasterImage):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def _bands(x) -> np.ndarray:
    arr = _array(x)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"expected C x H x W, got shape {arr.shape}")
    return arr


def _blocks(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """``(..., H, W)`` -> ``(..., nblocks, window*window)``."""
    h, w = x.shape[-2:]
    if window < 1 or stride < 1:
        raise ConfigError("window and stride must be positive")
    if window > min(h, w):
        raise ConfigError(f"window {window} exceeds image size {h}x{w}")
    view = sliding_window_view(x, (window, window), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    lead = x.shape[:-2]
    nb = view.shape[-4] * view.shape[-3]
    return view.reshape(lead + (nb, window * window))


def _mean_of_valid(values: np.ndarray, den: np.ndarray, what: str) -> float:
    ok = den >= DEGENERATE_EPS
    if not np.any(ok):
        raise MetricUndefinedError(f"{what}: every window is degenerate")
    return float(np.mean(values[ok]))


# ----------------------------------------------------------------------------
# universal image quality index and its hypercomplex extension


def q_index(a, b, window: int = WINDOW, stride: int = STRIDE) -> float:
    a, b = _array(a), _array(b)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"q_index needs two equal 2-D bands, got {a.shape} and {b.shape}")
    ba, bb = _blocks(a, window, stride), _blocks(b, window, stride)
    ma, mb = ba.mean(-1), bb.mean(-1)
    da, db = ba - ma[:, None], bb - mb[:, None]
    va, vb = (da * da).mean(-1), (db * db).mean(-1)
    cov = (da * db).mean(-1)
    den = (va + vb) * (ma * ma + mb * mb)
    num = 4.0 * cov * ma * mb
    q = np.divide(num, den, out=np.zeros_like(num), where=den >= DEGENERATE_EPS)
    return _mean_of_valid(q, den, "q_index")


def cd_conj(x: np.ndarray) -> np.ndarray:
    """Hypercomplex conjugate: keep the real part, negate the rest."""
    out = -x
    out[..., 0] = x[..., 0]
    return out


def cd_mul(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cayley-Dickson product ``(a, b)(c, d) = (ac - conj(d) b, d a + b conj(c))``.

    The last axis holds the ``2**n`` components.
    """
    dim = x.shape[-1]
    if dim != y.shape[-1] or dim & (dim - 1):
        raise DimensionError(f"components must match and be a power of two, got {dim} and {y.shape[-1]}")
    if dim == 1:
        return x * y
    h = dim // 2
    a, b = x[..., :h], x[..., h:]
    c, d = y[..., :h], y[..., h:]
    first = cd_mul(a, c) - cd_mul(cd_conj(d), b)
    second = cd_mul(d, a) + cd_mul(b, cd_conj(c))
    return np.concatenate([first, second], axis=-1)


def hypercomplex_dim(channels: int) -> int:
    return 1 << max(0, (channels - 1).bit_length())


def q2n(a, b, window: int = WINDOW, stride: int = STRIDE) -> float:
    """Hypercomplex quality index of two ``C``-band images (``C <= 8``).

    For ``C == 1`` the signed real index is returned, so it coincides with
    :func:`q_index`; otherwise the modulus of the hypercomplex index.
    """
    a, b = _bands(a), _bands(b)
    if a.shape != b.shape:
        raise DimensionError(f"q2n needs equal shapes, got {a.shape} and {b.shape}")
    c = a.shape[0]
    if c > 8:
        raise ConfigError(f"q2n supports at most 8 bands, got {c}")
    dim = hypercomplex_dim(c)
    za = np.zeros((dim,) + a.shape[1:])
    zb = np.zeros((dim,) + b.shape[1:])
    za[:c], zb[:c] = a, b
    # (dim, nblocks, npix) -> (nblocks, npix, dim)
    ba = np.moveaxis(_blocks(za, window, stride), 0, -1)
    bb = np.moveaxis(_blocks(zb, window, stride), 0, -1)
    ma, mb = ba.mean(axis=1), bb.mean(axis=1)
    da, db = ba - ma[:, None], bb - mb[:, None]
    va = (da * da).sum(-1).mean(-1)
    vb = (db * db).sum(-1).mean(-1)
    cov = cd_mul(da, cd_conj(db)).mean(axis=1)
    na2, nb2 = (ma * ma).sum(-1), (mb * mb).sum(-1)
    den = (va + vb) * (na2 + nb2)
    if dim == 1:
        num = 4.0 * cov[:, 0] * ma[:, 0] * mb[:, 0]
    else:
        num = 4.0 * np.linalg.norm(cov, axis=-1) * np.sqrt(na2 * nb2)
    q = np.divide(num, den, out=np.zeros_like(num), where=den >= DEGENERATE_EPS)
    return _mean_of_valid(q, den, "q2n")


# ----------------------------------------------------------------------------
# no-reference metrics


def _fit_window(window: int, *shapes) -> int:
    return min([window] + [min(s[-2:]) for s in shapes])


def d_lambda(fused, lrms, kernel: MtfKernel, r: int | None = None, window: int = WINDOW) -> float:
    """Spectral distortion ``1 - Q2n(degrade(fused), lrms)`` clamped to ``[0, 1]``."""
    r = r or kernel.ratio
    f, y = _bands(fused), _bands(lrms)
    low = decimate(mtf_blur(f.astype(np.float32), kernel), r).astype(np.float64)
    if low.shape != y.shape:
        raise DimensionError(f"degraded fused {low.shape} does not match LRMS {y.shape}")
    w = _fit_window(window, y.shape)
    return float(np.clip(1.0 - q2n(low, y, w, w), 0.0, 1.0))


def d_s(fused, lrms, pan, pan_kernel: MtfKernel, r: int | None = None, window: int = WINDOW) -> float:
    """Spatial distortion ``mean_b |Q(fused_b, P) - Q(lrms_b, P_low)|`` clamped to ``[0, 1]``."""
    r = r or pan_kernel.ratio
    f, y, p = _bands(fused), _bands(lrms), _bands(pan)
    if p.shape[0] != 1 or p.shape[1:] != f.shape[1:]:
        raise DimensionError(f"PAN {p.shape} does not match fused {f.shape}")
    if f.shape[0] != y.shape[0]:
        raise DimensionError(f"fused has {f.shape[0]} bands, LRMS has {y.shape[0]}")
    p_low = decimate(mtf_blur(p.astype(np.float32), pan_kernel), r).astype(np.float64)
    if p_low.shape[1:] != y.shape[1:]:
        raise DimensionError(f"degraded PAN {p_low.shape} does not match LRMS {y.shape}")
    wh, wl = _fit_window(window, f.shape), _fit_window(window, y.shape)
    diffs = [abs(q_index(f[b], p[0], wh, wh) - q_index(y[b], p_low[0], wl, wl)) for b in range(f.shape[0])]
    return float(np.clip(np.mean(diffs), 0.0, 1.0))


def hqnr(d_lambda_value: float, d_s_value: float) -> float:
    for name, v in (("d_lambda", d_lambda_value), ("d_s", d_s_value)):
        if not (0.0 <= v <= 1.0):
            raise ValidationError(f"{name} must lie in [0, 1], got {v}")
    return (1.0 - d_lambda_value) * (1.0 - d_s_value)


# ----------------------------------------------------------------------------
# reference metrics


def sam(fused, gt) -> float:
    """Mean spectral angle in degrees over pixels with non-zero spectra."""
    f, g = _bands(fused), _bands(gt)
    if f.shape != g.shape:
        raise DimensionError(f"sam needs equal shapes, got {f.shape} and {g.shape}")
    nf, ng = np.linalg.norm(f, axis=0), np.linalg.norm(g, axis=0)
    ok = (nf >= DEGENERATE_EPS) & (ng >= DEGENERATE_EPS)
    if not np.any(ok):
        raise MetricUndefinedError("sam: every pixel has a zero spectrum")
    # 2 atan2(|u - v|, |u + v|) on unit spectra; unlike arccos of the cosine
    # it stays accurate for nearly parallel vectors
    u = f[:, ok] / nf[ok]
    v = g[:, ok] / ng[ok]
    angle = 2.0 * np.arctan2(np.linalg.norm(u - v, axis=0), np.linalg.norm(u + v, axis=0))
    return float(np.degrees(angle).mean())


def ergas(fused, gt, r: int) -> float:
    f, g = _bands(fused), _bands(gt)
    if f.shape != g.shape:
        raise DimensionError(f"ergas needs equal shapes, got {f.shape} and {g.shape}")
    mu = g.mean(axis=(1, 2))
    if np.any(mu == 0):
        raise MetricUndefinedError("ergas: a reference band has zero mean")
    mse = ((f - g) ** 2).mean(axis=(1, 2))
    return float(100.0 / r * np.sqrt(np.mean(mse / mu ** 2)))


def high_pass(x) -> np.ndarray:
    """3x3 Laplacian per band, mirrored at the border without repeating the edge."""
    arr = _bands(x)
    return np.stack([convolve(band, LAPLACIAN, mode="mirror") for band in arr])


def scc(fused, gt) -> float:
    """Pearson correlation of the Laplacian responses, pooled over bands."""
    f, g = _bands(fused), _bands(gt)
    if f.shape != g.shape:
        raise DimensionError(f"scc needs equal shapes, got {f.shape} and {g.shape}")
    hf, hg = high_pass(f).ravel(), high_pass(g).ravel()
    hf, hg = hf - hf.mean(), hg - hg.mean()
    den = np.sqrt((hf * hf).sum() * (hg * hg).sum())
    if den < DEGENERATE_EPS:
        raise MetricUndefinedError("scc: an input has no high-frequency content")
    return float(np.clip((hf * hg).sum() / den, -1.0, 1.0))


# ----------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    image_id: str = ""
    d_lambda: float | None = None
    d_s: float | None = None
    hqnr: float | None = None
    sam_deg: float | None = None
    ergas: float | None = None
    scc: float | None = None
    q2n: float | None = None
    wall_time_s: float = 0.0

    def __post_init__(self):
        full = (self.d_lambda, self.d_s, self.hqnr)
        if any(v is None for v in full) and any(v is not None for v in full):
            raise ValidationError("d_lambda, d_s and hqnr must be given together")
        for name in METRIC_COLUMNS[1:]:
            v = getattr(self, name)
            if v is not None and not np.isfinite(v):
                raise ValidationError(f"{name} is not finite: {v}")

    def row(self) -> list[str]:
        cells = [self.image_id]
        for name in METRIC_COLUMNS[1:]:
            v = getattr(self, name)
            cells.append("" if v is None else repr(float(v)))
        return cells

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(METRIC_COLUMNS)
        writer.writerow(self.row())
        return buf.getvalue()


def evaluate(fused, lrms, pan, ms_kernel: MtfKernel, pan_kernel: MtfKernel, r: int,
             gt=None, image_id: str = "", window: int = WINDOW) -> MetricReport:
    """Full-resolution metrics always; reference metrics when ``gt`` is given."""
    start = time.perf_counter()
    dl = d_lambda(fused, lrms, ms_kernel, r, window)
    ds = d_s(fused, lrms, pan, pan_kernel, r, window)
    values = dict(d_lambda=dl, d_s=ds, hqnr=hqnr(dl, ds))
    if gt is not None:
        w = _fit_window(window, _bands(gt).shape)
        values.update(sam_deg=sam(fused, gt), ergas=ergas(fused, gt, r), scc=scc(fused, gt),
                      q2n=q2n(fused, gt, w, w))
    return MetricReport(image_id=image_id, wall_time_s=time.perf_counter() - start, **values)
