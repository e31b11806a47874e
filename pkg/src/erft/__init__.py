"""Test-time feature tailoring for pansharpening networks.

A fusion CNN is cut into a feature extractor and a channel mapper.  For each
new image a small residual adapter is trained between the two with an
unsupervised, sensor-physics objective, on a few tiles only, and then applied
to every tile.
"""

from .backbone import BackboneSplit, build_backbone, full_forward, pretrain
from .degrade import (MtfKernel, SensorShift, WaldTriple, apply_sensor_shift, build_mtf_kernel,
                      decimate, degrade, mtf_blur, synth_scene, wald_simulate)
from .errors import (ConfigError, ContractError, DimensionError, ErftError, FormatError,
                     GeometryError, MetricUndefinedError, ValidationError)
from .feature_tailor import FeatureTailor, build_tailor, tailor_forward, tailored_forward
from .losses import (LossBreakdown, LossKernels, LossWeights, consistency_loss, spatial_loss,
                     spectral_loss, total_loss)
from .metrics import MetricReport, d_lambda, d_s, ergas, evaluate, hqnr, q2n, q_index, sam, scc
from .patch_engine import (AdaptConfig, PatchGrid, SpeedupQuery, adapt, bench, infer_all,
                           run_erft, select_training, split, stitch, theoretical_speedup)
from .raster_io import (ImagePair, RasterImage, WeightArchive, read_raster, read_weights,
                        validate_pair, write_raster, write_weights)

__version__ = "0.1.0"

__all__ = [
    "adapt", "AdaptConfig", "apply_sensor_shift", "BackboneSplit", "bench", "build_backbone",
    "build_mtf_kernel", "build_tailor", "ConfigError", "consistency_loss", "ContractError",
    "d_lambda", "d_s", "decimate", "degrade", "DimensionError", "ErftError", "ergas", "evaluate",
    "FeatureTailor", "FormatError", "full_forward", "GeometryError", "hqnr", "ImagePair",
    "infer_all", "LossBreakdown", "LossKernels", "LossWeights", "MetricReport",
    "MetricUndefinedError", "mtf_blur", "MtfKernel", "PatchGrid", "pretrain", "q2n", "q_index",
    "RasterImage", "read_raster", "read_weights", "run_erft", "sam", "scc", "select_training",
    "SensorShift", "spatial_loss", "spectral_loss", "SpeedupQuery", "split", "stitch",
    "synth_scene", "tailor_forward", "tailored_forward", "theoretical_speedup", "total_loss",
    "validate_pair", "ValidationError", "wald_simulate", "WaldTriple", "WeightArchive",
    "write_raster", "write_weights",
]
