"""Command-line entry point: ``erft simulate|pretrain|adapt|eval|bench``.

Exit codes: 0 success, 1 contract violation, 2 configuration error,
3 geometry error, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .backbone import BackboneSplit, build_backbone, pretrain
from .config import RunConfig, load_config
from .degrade import (SensorShift, WaldTriple, apply_sensor_shift, build_mtf_kernel, synth_scene,
                      wald_simulate)
from .errors import (ConfigError, ContractError, DimensionError, FormatError, GeometryError,
                     ValidationError)
from .metrics import evaluate
from .patch_engine import bench, bench_to_csv, log_to_csv, run_erft
from .raster_io import read_raster, read_weights, validate_pair, write_raster, write_weights

log = logging.getLogger("erft")

MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ("id", "split", "gt", "pan", "lrms", "ratio")


def _parse_shift(text: str) -> SensorShift:
    try:
        gain, offset, gamma = (float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"--shift expects gain,offset,gamma, got {text!r}") from None
    return SensorShift.uniform(gain, offset, gamma)


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), _overrides(getattr(args, "set", None)))


def _write_text(path, text: str) -> None:
    Path(path).write_text(text)


# ----------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise OSError(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    r = cfg.ratio
    n_test = args.scenes // 2 if args.test_scenes is None else args.test_scenes
    if not 0 <= n_test <= args.scenes:
        raise ConfigError(f"--test-scenes must lie in [0, {args.scenes}], got {n_test}")
    shift = _parse_shift(args.shift) if args.shift else None
    kernel = build_mtf_kernel(r, cfg.ms_gain)
    rows = []
    for i in range(args.scenes):
        split_name = "train" if i < args.scenes - n_test else "test"
        gt, pan = synth_scene(args.seed * 100003 + i, args.bands, args.size, args.size, r)
        if split_name == "test" and shift is not None:
            gt = apply_sensor_shift(gt, shift)
        triple = wald_simulate(gt, pan, kernel, r)
        sid = f"scene{i:03d}"
        names = {k: f"{sid}_{k}.erft" for k in ("gt", "pan", "lrms")}
        write_raster(triple.gt, out / names["gt"])
        write_raster(triple.pan, out / names["pan"])
        write_raster(triple.lrms, out / names["lrms"])
        rows.append((sid, split_name, names["gt"], names["pan"], names["lrms"], r))
    with open(out / MANIFEST, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    print(f"wrote {len(rows)} scenes ({args.scenes - n_test} train, {n_test} test) to {out}")
    return 0


def read_manifest(data_dir):
    """Rows of the dataset manifest as dicts."""
    path = Path(data_dir) / MANIFEST
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc.strerror}") from exc
    if rows and tuple(rows[0]) != MANIFEST_COLUMNS:
        raise FormatError(f"{path}: unexpected columns {tuple(rows[0])}")
    return rows


def load_triples(data_dir, split_name: str):
    base = Path(data_dir)
    triples = []
    for row in read_manifest(data_dir):
        if row["split"] != split_name:
            continue
        r = int(row["ratio"])
        gt, pan, lrms = (read_raster(base / row[k]) for k in ("gt", "pan", "lrms"))
        validate_pair(pan, lrms, r)
        triples.append(WaldTriple(lrms=lrms, pan=pan, gt=gt, ratio=r))
    return triples


def cmd_pretrain(args, cfg: RunConfig) -> int:
    triples = load_triples(args.data, "train")
    if not triples:
        raise ConfigError(f"{args.data} holds no training scenes")
    channels = triples[0].lrms.channels
    net = build_backbone(channels, cfg.features, cfg.blocks, seed=cfg.seed, ratio=cfg.ratio)
    history = pretrain(net, triples, epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, seed=cfg.seed,
                       crop=cfg.pretrain_crop, crops_per_step=cfg.pretrain_crops)
    write_weights(net.to_archive(), args.out)
    lines = ["epoch,l1"] + [f"{i},{v!r}" for i, v in enumerate(history)]
    _write_text(f"{args.out}.loss.csv", "\n".join(lines) + "\n")
    final = history[-1] if history else float("nan")
    print(f"final train L1 {final:.6f}")
    return 0


def _load_backbone(path, cfg: RunConfig) -> BackboneSplit:
    return BackboneSplit.from_archive(read_weights(path), ratio=cfg.ratio).freeze()


def cmd_adapt(args, cfg: RunConfig) -> int:
    pair = validate_pair(read_raster(args.pair[0]), read_raster(args.pair[1]), cfg.ratio)
    net = _load_backbone(args.weights, cfg)
    result = run_erft(pair, net, cfg.adapt_config(), cfg.kernels(), use_tailor=not args.no_ft,
                      report_rim=args.rim_report)
    write_raster(result.hrms, args.out)
    if result.tailor is not None:
        write_weights(result.tailor.to_archive(), f"{args.out}.tailor")
    _write_text(f"{args.out}.log.csv", log_to_csv(result.log))
    print(f"timing {result.timing_line()}")
    if result.rim_deviation is not None:
        print(f"rim deviation {result.rim_deviation:.6g}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    fused = read_raster(args.fused)
    pair = validate_pair(read_raster(args.pair[0]), read_raster(args.pair[1]), cfg.ratio)
    gt = read_raster(args.gt) if args.gt else None
    if gt is not None and gt.shape != fused.shape:
        raise GeometryError(f"reference {gt.shape} does not match fused {fused.shape}")
    kernels = cfg.kernels()
    report = evaluate(fused, pair.lrms, pair.pan, kernels.ms, kernels.pan, cfg.ratio, gt=gt,
                      image_id=Path(args.fused).stem, window=cfg.metric_window)
    text = report.to_csv()
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
    except ValueError:
        raise ConfigError(f"--sizes expects comma-separated integers, got {args.sizes!r}") from None
    rows = bench(args.arch, sizes, p=args.patch, m=cfg.m if args.m is None else args.m,
                 batch=args.batch, repeats=args.repeats, seed=cfg.seed)
    text = bench_to_csv(rows)
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return 0


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="erft", description="Test-time feature tailoring for pansharpening.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--test-scenes", type=int, help="how many of the scenes form the test split (default half)")
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--size", type=int, default=256, help="PAN height and width")
    p.add_argument("--shift", help="gain,offset,gamma applied to test scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pretrain", parents=[common], help="supervised backbone training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", parents=[common], help="adapt a feature tailor and fuse one pair")
    p.add_argument("--pair", nargs=2, metavar=("PAN", "LRMS"), required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-ft", action="store_true", help="run the frozen backbone without a tailor")
    p.add_argument("--rim-report", action="store_true", help="compare tiles against full-image inference")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", parents=[common], help="quality metrics of a fused image")
    p.add_argument("--fused", required=True)
    p.add_argument("--pair", nargs=2, metavar=("PAN", "LRMS"), required=True)
    p.add_argument("--gt")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="full-image vs tiled wall time")
    p.add_argument("--arch", choices=("cnn", "attention-toy"), required=True)
    p.add_argument("--sizes", default="128")
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--m", type=int)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


EXIT_CODES = ((ConfigError, 2), (GeometryError, 3), (DimensionError, 3),
              (FormatError, 4), (ValidationError, 4), (OSError, 4), (ContractError, 1))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        if args.print_config:
            sys.stdout.write(cfg.dumps())
            return 0
        return args.func(args, cfg)
    except Exception as exc:
        for kind, code in EXIT_CODES:
            if isinstance(exc, kind):
                print(f"erft: error: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
