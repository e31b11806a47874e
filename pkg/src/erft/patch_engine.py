"""Patch-wise adaptation and inference for one image.

The image is cut into ``p x p`` tiles (PAN pixels).  A random subset of ``M``
tiles trains the feature tailor with the unsupervised objective; afterwards
every tile, padded with an ``R``-pixel rim of real neighbouring context, goes
through the tailored network, the rim is dropped and the cores are tiled back
together.

Also here: the closed-form speedup model of patch-wise processing and a small
wall-clock bench that measures it.
"""

from __future__ import annotations

import contextlib
import csv
import io
import logging
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .backbone import BackboneSplit
from .errors import ConfigError, ContractError, GeometryError
from .feature_tailor import FeatureTailor, build_tailor, tailor_forward
from .losses import LossKernels, LossWeights, total_loss
from .raster_io import ImagePair, RasterImage, validate_pair
from .rng import numpy_rng, sample_without_replacement
from .tensor import Adam, Tensor, add_all, backward, conv2d, relu, scale

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "patch_id", "spe", "spa", "ori", "total")
BENCH_COLUMNS = ("arch", "phase", "H", "W", "p", "N", "M", "B",
                 "t_full_ms", "t_patch_ms", "speedup_measured", "speedup_theory")


# ----------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class PatchRecord:
    index: int
    row: int
    col: int
    pan_window: tuple  # (top, bottom, left, right) of the core, PAN pixels
    lrms_window: tuple  # same window on the LRMS grid
    rim_valid: tuple  # (top, bottom, left, right): True where the rim is real context


@dataclass
class PatchGrid:
    patch: int
    rim: int
    ratio: int
    rows: int
    cols: int
    height: int
    width: int
    records: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def is_interior(self, index: int) -> bool:
        return all(self.records[index].rim_valid)


@dataclass
class PatchPayload:
    """One tile with its rim: ``pan`` is ``1 x (p+2R) x (p+2R)``."""

    index: int
    pan: np.ndarray
    lrms: np.ndarray
    rim: int
    ratio: int

    def core_pan(self) -> np.ndarray:
        r = self.rim
        return self.pan[:, r:self.pan.shape[1] - r, r:self.pan.shape[2] - r]

    def core_lrms(self) -> np.ndarray:
        r = self.rim // self.ratio
        return self.lrms[:, r:self.lrms.shape[1] - r, r:self.lrms.shape[2] - r]


def split(pair: ImagePair, p: int, rim: int) -> tuple[PatchGrid, list[PatchPayload]]:
    """Tile ``pair`` into ``p x p`` cores, each carrying an ``rim``-pixel border.

    The border holds neighbouring pixels where they exist and a mirror image
    of the tile content at the outer edge of the image.
    """
    r = pair.ratio
    pan, lrms = pair.pan.data, pair.lrms.data
    _, h, w = pan.shape
    if p < r or p % r:
        raise GeometryError(f"patch size {p} must be a positive multiple of the ratio {r}")
    if rim < 0 or rim % r:
        raise GeometryError(f"rim {rim} must be a non-negative multiple of the ratio {r}")
    if h % p or w % p:
        raise GeometryError(f"{h}x{w} image cannot be tiled by {p}x{p} patches")
    if lrms.shape[1:] != (h // r, w // r):
        raise GeometryError(f"LRMS {lrms.shape[1:]} is not PAN {h}x{w} divided by {r}")
    lr_rim = rim // r
    if rim and (rim >= min(h, w) or lr_rim >= min(lrms.shape[1:])):
        raise GeometryError(f"rim {rim} is too large for a {h}x{w} image")
    pan_pad = np.pad(pan, ((0, 0), (rim, rim), (rim, rim)), mode="reflect")
    lrms_pad = np.pad(lrms, ((0, 0), (lr_rim, lr_rim), (lr_rim, lr_rim)), mode="reflect")
    rows, cols = h // p, w // p
    grid = PatchGrid(patch=p, rim=rim, ratio=r, rows=rows, cols=cols, height=h, width=w)
    payloads = []
    q = p // r
    for i in range(rows):
        for j in range(cols):
            idx = i * cols + j
            top, left = i * p, j * p
            valid = (i > 0, i < rows - 1, j > 0, j < cols - 1)
            grid.records.append(PatchRecord(index=idx, row=i, col=j,
                                             pan_window=(top, top + p, left, left + p),
                                             lrms_window=(top // r, top // r + q, left // r, left // r + q),
                                             rim_valid=valid))
            payloads.append(PatchPayload(
                index=idx,
                pan=np.ascontiguousarray(pan_pad[:, top:top + p + 2 * rim, left:left + p + 2 * rim]),
                lrms=np.ascontiguousarray(lrms_pad[:, top // r:top // r + q + 2 * lr_rim,
                                                   left // r:left // r + q + 2 * lr_rim]),
                rim=rim, ratio=r))
    return grid, payloads


def stitch(grid: PatchGrid, cores) -> RasterImage:
    """Place one ``C x p x p`` core per grid cell; every pixel is written once."""
    cores = list(cores)
    if len(cores) != grid.count or any(c is None for c in cores):
        raise ContractError(f"stitch needs {grid.count} cores, got {sum(c is not None for c in cores)}")
    channels = np.asarray(cores[0]).shape[0]
    out = np.empty((channels, grid.height, grid.width), dtype=np.float32)
    for rec, core in zip(grid.records, cores):
        core = np.asarray(core)
        if core.shape != (channels, grid.patch, grid.patch):
            raise ContractError(f"patch {rec.index} has shape {core.shape}")
        t, b, l, r = rec.pan_window
        out[:, t:b, l:r] = core
    return RasterImage(out)


def select_training(grid: PatchGrid, m: int, seed: int) -> list[int]:
    """``m`` distinct patch indices drawn with SplitMix64, ascending."""
    if not 1 <= m <= grid.count:
        raise ConfigError(f"need 1 <= M <= N = {grid.count}, got M = {m}")
    return sample_without_replacement(grid.count, m, seed)


def required_rim(backbone: BackboneSplit, tailor: FeatureTailor | None = None) -> int:
    """Rim width after which interior tiles match full-image inference.

    Every 3x3 conv reaches one pixel further; the clamped bilinear upsampling
    of a cropped LRMS tile disturbs another ``ceil(r / 2)`` pixels.
    """
    radius = backbone.receptive_radius + (tailor.receptive_radius if tailor is not None else 0)
    return radius + math.ceil(backbone.ratio / 2)


# ----------------------------------------------------------------------------
# adaptation


@dataclass
class AdaptConfig:
    patch: int = 64
    rim: int = 4
    m: int = 8
    batch: int = 32
    epochs: int = 10
    seed: int = 1
    lr: float = 1e-4
    weight_decay: float = 1e-5
    weights: LossWeights = field(default_factory=LossWeights)
    init_mode: str = "he"
    workers: int | None = None

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"M must be >= 1, got {self.m}")
        if self.batch < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        if self.workers is not None and self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


@dataclass
class AdaptResult:
    tailor: FeatureTailor
    selected: list
    log: list  # rows of (epoch, patch_id, spe, spa, ori, total)

    def epoch_totals(self) -> list[float]:
        """Sum of the per-patch totals of every logged epoch, in epoch order."""
        sums: dict = {}
        for epoch, _, _, _, _, total in self.log:
            sums[epoch] = sums.get(epoch, 0.0) + total
        return [sums[e] for e in sorted(sums)]


def _patch_tensors(payload: PatchPayload, dtype):
    y = Tensor(payload.core_lrms()[None], dtype=dtype)
    p = Tensor(payload.core_pan()[None], dtype=dtype)
    return y, p


def adapt(backbone: BackboneSplit, tailor: FeatureTailor, grid: PatchGrid, payloads,
          cfg: AdaptConfig, kernels: LossKernels) -> AdaptResult:
    """Train ``tailor`` on a random subset of tiles, then freeze it.

    Each epoch runs the selected tiles in ascending index order, sums their
    losses, divides by ``M`` and takes one Adam step.  The log holds one row
    per tile per epoch, computed before that epoch's step, plus a closing
    pass (epoch ``cfg.epochs``) with the final parameters.
    """
    if not backbone.frozen:
        raise ContractError("the backbone must be frozen before adaptation")
    if not tailor.trainable:
        raise ContractError("the feature tailor is frozen; unfreeze it to adapt")
    selected = select_training(grid, cfg.m, cfg.seed)
    if not selected:
        raise ConfigError("no training patches selected")
    dtype = backbone.dtype
    cache = []
    for idx in selected:
        y, p = _patch_tensors(payloads[idx], dtype)
        z = backbone.fe_forward(y, p)
        cache.append((idx, y, p, z, backbone.cm_forward(z, y)))

    params = tailor.parameters()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rows = []
    norm = 1.0 / len(selected)
    for epoch in range(cfg.epochs + 1):
        terms = []
        for idx, y, p, z, x0 in cache:
            x = backbone.cm_forward(tailor_forward(z, tailor), y)
            parts = total_loss(cfg.weights, x, x0, y, p, kernels)
            rows.append((epoch, idx, parts.spectral, parts.spatial, parts.consistency, parts.total))
            terms.append(parts.tensor)
        if epoch == cfg.epochs:
            break
        objective = scale(add_all(terms), norm)
        backward(objective, params)
        opt.step()
        log.info("adapt epoch %d objective %.6g", epoch, objective.item())
    tailor.freeze()
    return AdaptResult(tailor=tailor, selected=selected, log=rows)


def log_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for epoch, idx, spe, spa, ori, total in rows:
        writer.writerow([epoch, idx, repr(spe), repr(spa), repr(ori), repr(total)])
    return buf.getvalue()


# ----------------------------------------------------------------------------
# inference


def _worker_count(requested: int | None, batch: int) -> int:
    if requested is None:
        requested = os.cpu_count() or 1
    return max(1, min(requested, batch))


def infer_patch(backbone: BackboneSplit, tailor: FeatureTailor | None, payload: PatchPayload) -> np.ndarray:
    """Run one rim-padded tile and return its ``C x p x p`` core."""
    dtype = backbone.dtype
    y = Tensor(payload.lrms[None], dtype=dtype)
    p = Tensor(payload.pan[None], dtype=dtype)
    z = backbone.fe_forward(y, p)
    if tailor is not None:
        z = tailor_forward(z, tailor)
    out = backbone.cm_forward(z, y).data[0]
    r = payload.rim
    return np.ascontiguousarray(out[:, r:out.shape[1] - r, r:out.shape[2] - r])


def infer_all(backbone: BackboneSplit, tailor: FeatureTailor | None, grid: PatchGrid, payloads,
              batch: int = 32, workers: int | None = None) -> list[np.ndarray]:
    """Cores for every tile, in index order.

    Tiles are processed in groups of ``batch``; within a group up to
    ``workers`` threads run tiles side by side.  Each tile is computed on its
    own, so the result does not depend on the grouping or the thread count.
    """
    if not backbone.frozen:
        raise ContractError("the backbone must be frozen for inference")
    if tailor is not None and tailor.trainable:
        raise ContractError("freeze the feature tailor before inference")
    if len(payloads) != grid.count:
        raise ContractError(f"expected {grid.count} payloads, got {len(payloads)}")
    n_workers = _worker_count(workers, batch)
    cores = []
    if n_workers == 1:
        return [infer_patch(backbone, tailor, pl) for pl in payloads]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        for start in range(0, len(payloads), batch):
            group = payloads[start:start + batch]
            cores.extend(pool.map(lambda pl: infer_patch(backbone, tailor, pl), group))
    return cores


def rim_deviation(backbone: BackboneSplit, tailor: FeatureTailor | None, pair: ImagePair,
                  grid: PatchGrid, stitched: RasterImage) -> float | None:
    """Largest absolute gap between stitched and full-image output on interior tiles.

    ``None`` when the grid has no interior tile to compare.
    """
    interior = [rec for rec in grid.records if grid.is_interior(rec.index)]
    if not interior:
        log.warning("no interior tiles; rim deviation is undefined")
        return None
    z = backbone.fe_forward(pair.lrms, pair.pan)
    if tailor is not None:
        z = tailor_forward(z, tailor)
    full = backbone.cm_forward(z, pair.lrms).data[0]
    worst = 0.0
    for rec in interior:
        t, b, l, r = rec.pan_window
        worst = max(worst, float(np.abs(full[:, t:b, l:r] - stitched.data[:, t:b, l:r]).max()))
    return worst


# ----------------------------------------------------------------------------
# end to end


@dataclass
class ErftResult:
    hrms: RasterImage
    tailor: FeatureTailor | None
    selected: list
    log: list
    timings: dict
    rim_deviation: float | None = None

    def timing_line(self) -> str:
        return " ".join(f"{k}={v:.1f}" for k, v in self.timings.items())


def run_erft(pair: ImagePair, backbone: BackboneSplit, cfg: AdaptConfig, kernels: LossKernels,
             use_tailor: bool = True, report_rim: bool = False) -> ErftResult:
    """Split, adapt a fresh tailor, infer every tile and stitch.

    With ``use_tailor=False`` the frozen backbone runs alone on the tiles.
    Timings are wall-clock milliseconds per stage.
    """
    validate_pair(pair.pan, pair.lrms, pair.ratio)
    backbone.freeze()
    timings = {}
    t0 = time.perf_counter()
    grid, payloads = split(pair, cfg.patch, cfg.rim)
    timings["split_ms"] = (time.perf_counter() - t0) * 1e3

    tailor, selected, rows = None, [], []
    t0 = time.perf_counter()
    if use_tailor:
        tailor = build_tailor(backbone.features, cfg.init_mode, seed=cfg.seed, dtype=backbone.dtype)
        result = adapt(backbone, tailor, grid, payloads, cfg, kernels)
        selected, rows = result.selected, result.log
    timings["adapt_ms"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    cores = infer_all(backbone, tailor, grid, payloads, cfg.batch, cfg.workers)
    timings["infer_ms"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    hrms = stitch(grid, cores)
    timings["stitch_ms"] = (time.perf_counter() - t0) * 1e3

    need = required_rim(backbone, tailor)
    deviation = None
    if cfg.rim < need:
        log.warning("rim %d is below the %d pixels needed for seam-free tiles; "
                    "interior tiles may differ from full-image inference", cfg.rim, need)
    if report_rim:
        deviation = rim_deviation(backbone, tailor, pair, grid, hrms)
        if deviation is not None:
            log.warning("max interior deviation from full-image inference: %.3g", deviation)
    return ErftResult(hrms=hrms, tailor=tailor, selected=selected, log=rows,
                      timings=timings, rim_deviation=deviation)


# ----------------------------------------------------------------------------
# speedup model and bench


@dataclass(frozen=True)
class SpeedupQuery:
    arch: str
    phase: str
    n: int
    m: int
    batch: int
    height: int
    width: int
    patch_h: int
    patch_w: int

    def __post_init__(self):
        if self.arch not in ("cnn", "attention"):
            raise ConfigError(f"arch must be 'cnn' or 'attention', got {self.arch!r}")
        if self.phase not in ("train", "infer"):
            raise ConfigError(f"phase must be 'train' or 'infer', got {self.phase!r}")
        if min(self.n, self.m, self.batch) < 1:
            raise ConfigError("N, M and B must be positive")
        if self.m > self.n:
            raise ConfigError(f"M = {self.m} exceeds N = {self.n}")
        if self.n * self.patch_h * self.patch_w != self.height * self.width:
            raise ConfigError("N patches of h x w must cover the H x W image exactly")

    @classmethod
    def for_grid(cls, arch: str, phase: str, height: int, width: int, p: int, m: int, batch: int):
        n = (height // p) * (width // p)
        return cls(arch, phase, n, m, batch, height, width, p, p)


def theoretical_speedup(q: SpeedupQuery) -> Fraction:
    """Full-image cost over patch-wise cost.

    A conv stack costs the same per pixel everywhere, so the gain comes from
    touching only ``M`` of ``N`` tiles and from running ``B`` tiles at once.
    Dense token mixing is quadratic in the token count, so tiling alone saves
    a factor ``N``.
    """
    n, m, b = Fraction(q.n), Fraction(q.m), Fraction(q.batch)
    if q.arch == "cnn":
        return n / m * b if q.phase == "train" else b
    return n * n / m * b if q.phase == "train" else n * b


def _conv_stack(channels: int, depth: int, seed: int):
    rng = numpy_rng(seed, "bench-weights")
    ws = [Tensor(rng.normal(0, 0.1, size=(channels, channels, 3, 3))) for _ in range(depth)]

    def run(x: np.ndarray) -> np.ndarray:
        t = Tensor(x)
        for wt in ws:
            t = relu(conv2d(t, wt, padding="reflect"))
        return t.data
    return run


def _token_mixer(chunk: int = 1024):
    def run(x: np.ndarray) -> np.ndarray:
        # x: (n, d, h, w) -> tokens (n, hw, d); out = (X X^T / d) X, row blocks
        n, d = x.shape[:2]
        tokens = x.reshape(n, d, -1).transpose(0, 2, 1)
        out = np.empty_like(tokens)
        for s in range(0, tokens.shape[1], chunk):
            scores = tokens[:, s:s + chunk] @ tokens.transpose(0, 2, 1) / d
            out[:, s:s + chunk] = scores @ tokens
        return out
    return run


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


@dataclass
class BenchRow:
    arch: str
    phase: str
    H: int
    W: int
    p: int
    N: int
    M: int
    B: int
    t_full_ms: float
    t_patch_ms: float
    speedup_measured: float
    speedup_theory: Fraction

    def cells(self) -> list:
        return [self.arch, self.phase, self.H, self.W, self.p, self.N, self.M, self.B,
                f"{self.t_full_ms:.3f}", f"{self.t_patch_ms:.3f}",
                f"{self.speedup_measured:.4f}", f"{float(self.speedup_theory):.4f}"]


def bench(arch: str, sizes, p: int = 32, m: int = 8, batch: int = 1, channels: int = 8,
          depth: int = 4, repeats: int = 5, seed: int = 0, single_thread: bool = True) -> list[BenchRow]:
    """Median-of-``repeats`` wall time of full-image vs tiled execution.

    ``cnn`` runs a ``depth``-layer 3x3 conv stack; ``attention-toy`` runs one
    round of dense token mixing ``(X X^T / d) X``.  The ``train`` phase
    processes ``M`` tiles, the ``infer`` phase all ``N``; tiles are grouped
    ``batch`` at a time along the batch axis.
    """
    from threadpoolctl import threadpool_limits

    if arch == "cnn":
        kernel, model = _conv_stack(channels, depth, seed), "cnn"
    elif arch == "attention-toy":
        kernel, model = _token_mixer(), "attention"
    else:
        raise ConfigError(f"unknown bench architecture {arch!r}")
    rng = numpy_rng(seed, "bench-data")
    rows = []
    with (threadpool_limits(limits=1) if single_thread else contextlib.nullcontext()):
        for size in sizes:
            if size % p:
                raise GeometryError(f"size {size} is not divisible by patch {p}")
            x = rng.normal(size=(1, channels, size, size)).astype(np.float32)
            tiles = [x[:, :, i:i + p, j:j + p] for i in range(0, size, p) for j in range(0, size, p)]
            n = len(tiles)
            t_full = _median_ms(lambda: kernel(x), repeats)
            for phase, subset in (("train", tiles[:min(m, n)]), ("infer", tiles)):
                groups = [np.concatenate(subset[s:s + batch]) for s in range(0, len(subset), batch)]
                t_patch = _median_ms(lambda: [kernel(g) for g in groups], repeats)
                q = SpeedupQuery.for_grid(model, phase, size, size, p, min(m, n), batch)
                rows.append(BenchRow(arch, phase, size, size, p, n, min(m, n), batch, t_full, t_patch,
                                     t_full / t_patch, theoretical_speedup(q)))
    return rows


def bench_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_COLUMNS)
    for row in rows:
        writer.writerow(row.cells())
    return buf.getvalue()
