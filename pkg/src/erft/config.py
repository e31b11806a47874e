"""Run configuration as ``key=value`` text.

Blank lines and anything after ``#`` are ignored.  Unknown keys and values
that do not parse are rejected.  :meth:`RunConfig.dumps` writes every key,
so its output fed back through :func:`parse_config` reproduces the run.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .feature_tailor import INIT_MODES
from .losses import LossKernels, LossWeights
from .patch_engine import AdaptConfig

WORKERS_ENV = "ERFT_WORKERS"


@dataclass
class RunConfig:
    # geometry
    ratio: int = 4
    patch: int = 64
    rim: int = 4
    # adaptation
    m: int = 8
    batch: int = 32
    epochs: int = 10
    seed: int = 1
    lr: float = 1e-4
    weight_decay: float = 1e-5
    eta_spectral: float = 1.0
    eta_spatial: float = 1.0
    eta_consistency: float = 0.1
    init_mode: str = "he"
    # sensor model
    ms_gain: float = 0.30
    pan_gain: float = 0.15
    # backbone and its pretraining
    features: int = 32
    blocks: int = 4
    pretrain_epochs: int = 50
    pretrain_lr: float = 1e-3
    pretrain_crop: int = 64
    pretrain_crops: int = 4
    # metrics and execution
    metric_window: int = 32
    workers: int = 0  # 0 = take ERFT_WORKERS, else one per CPU

    def __post_init__(self):
        if self.ratio < 2:
            raise ConfigError(f"ratio must be >= 2, got {self.ratio}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.workers < 0:
            raise ConfigError(f"workers must be >= 0, got {self.workers}")
        for name in ("ms_gain", "pan_gain"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        self.loss_weights()

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.eta_spectral, self.eta_spatial, self.eta_consistency)

    def kernels(self) -> LossKernels:
        return LossKernels.default(self.ratio, self.ms_gain, self.pan_gain)

    def resolved_workers(self) -> int:
        if self.workers:
            return self.workers
        env = os.environ.get(WORKERS_ENV, "").strip()
        if env:
            try:
                value = int(env)
            except ValueError:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
            if value < 1:
                raise ConfigError(f"{WORKERS_ENV} must be >= 1, got {value}")
            return value
        return os.cpu_count() or 1

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(patch=self.patch, rim=self.rim, m=self.m, batch=self.batch,
                           epochs=self.epochs, seed=self.seed, lr=self.lr,
                           weight_decay=self.weight_decay, weights=self.loss_weights(),
                           init_mode=self.init_mode, workers=self.resolved_workers())

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n".replace("'", "") for f in fields(self))


def _convert(name: str, kind, text: str):
    try:
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind}") from None
    return text


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    values = dataclasses.asdict(base) if base is not None else {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, known[key], value)
    return RunConfig(**values)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
        cfg = parse_config(text, cfg)
    if overrides:
        unknown = set(overrides) - {f.name for f in fields(RunConfig)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = parse_config("\n".join(f"{k}={v}" for k, v in overrides.items()), cfg)
    return cfg
