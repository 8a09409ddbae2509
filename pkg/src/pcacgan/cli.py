"""Command-line interface: pcacgan <subcommand> [flags]."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import avrpm, metrics, nn, selftest, training
from .codec import Bitstream, CodecModel, decode, encode
from .errors import PcacError
from .pointcloud import load_ply, save_ply, synth_dataset

log = logging.getLogger("pcacgan")


class UsageError(Exception):
    """Bad flag combination detected after argparse succeeded."""


# ------------------------------------------------------------------ helpers


def _clouds(path):
    path = Path(path)
    files = sorted(path.glob("*.ply")) if path.is_dir() else [path]
    if not files:
        raise UsageError(f"no .ply files in {path}")
    return [load_ply(f) for f in files], files


def _model_path(path, lambda_index):
    path = Path(path)
    if path.is_dir():
        return path / f"lambda{lambda_index}.ckpt"
    return path


def _load_models(path):
    """All lambda checkpoints of a directory (or one file), keyed by lambda index."""
    path = Path(path)
    files = sorted(path.glob("lambda*.ckpt")) if path.is_dir() else [path]
    if not files:
        raise UsageError(f"no lambda*.ckpt checkpoints in {path}")
    models = {}
    for f in files:
        m = CodecModel.load(f)
        models[m.lambda_index] = m
    return models


def _avrpm_params(args):
    if getattr(args, "avrpm", None):
        return nn.load_checkpoint(args.avrpm)
    return None


def _train_config(args):
    cfg = training.TrainConfig(seed=args.seed)
    if args.config:
        cfg = training.load_config(args.config, cfg)
    changes = {"block_edge": args.block_edge}
    if args.latent_channels is not None:
        changes["codec"] = replace(cfg.codec, latent_channels=args.latent_channels)
    if args.iterations is not None:
        changes["iterations"] = args.iterations
    if args.no_discriminator:
        changes["use_discriminator"] = False
    if args.dense_conv:
        changes["dense_conv"] = True
    if args.no_avrpm:
        changes["use_avrpm"] = False
    return replace(cfg, **changes)


# -------------------------------------------------------------- subcommands


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pc in enumerate(synth_dataset(args.count, args.points, args.seed, args.extent)):
        save_ply(pc, out / f"synth_{i:03d}.ply")
    print(f"wrote {args.count} clouds to {out}")


def cmd_train_avrpm(args):
    clouds, _ = _clouds(args.inp)
    cfg = avrpm.AvrpmConfig(block_edge=args.block_edge, iterations=args.iterations or 300, seed=args.seed)
    params = avrpm.train_avrpm(clouds, cfg)
    nn.save_checkpoint(params, args.out)
    summaries, labels = avrpm.training_blocks(clouds, cfg)
    print(f"final loss {cfg.losses[-1]:.5f}, training accuracy "
          f"{avrpm.mask_accuracy(params, summaries, labels):.4f}")


def cmd_train(args):
    clouds, _ = _clouds(args.inp)
    cfg = _train_config(args)
    results = training.train_rate_sweep(clouds, cfg, _avrpm_params(args), out_dir=args.out)
    for lam, _, tlog in results:
        row = tlog.rows[-1] if len(tlog) else {}
        print(f"lambda {lam:g}: final L {row.get('L', float('nan')):.4f} R {row.get('R', float('nan')):.4f}")


def cmd_encode(args):
    pc = load_ply(args.inp)
    model = CodecModel.load(_model_path(args.model, args.lambda_index))
    timings = {}
    bs = encode(pc, model, _avrpm_params(args), not args.no_avrpm, args.block_edge, args.threads, timings)
    data = bs.to_bytes()
    Path(args.out).write_bytes(data)
    stages = ", ".join(f"{k} {v:.3f}s" for k, v in timings.items())
    print(f"{len(pc)} points -> {len(data)} bytes ({metrics.bpip(data, len(pc)):.4f} bpip); {stages}")


def cmd_decode(args):
    data = Path(args.inp).read_bytes()
    geometry = load_ply(args.geometry)
    stream = Bitstream.from_bytes(data)
    models = {stream.lambda_index: CodecModel.load(_model_path(args.model, stream.lambda_index))}
    timings = {}
    pc = decode(stream, geometry.positions, models, timings)
    save_ply(pc, args.out)
    stages = ", ".join(f"{k} {v:.3f}s" for k, v in timings.items())
    print(f"decoded {len(pc)} points; {stages}")


def cmd_eval(args):
    clouds, _ = _clouds(args.inp)
    models = _load_models(args.model)
    params = _avrpm_params(args)
    points = [training.evaluate(models[i], clouds, params, not args.no_avrpm, args.block_edge)
              for i in sorted(models)]
    metrics.write_points_csv(points, args.out)
    for p in points:
        print(f"lambda index {p.lambda_index}: {p.bpip:.4f} bpip, Y {p.psnr_y:.2f} dB")
    try:
        metrics.RDCurve(points)
    except ValueError as exc:
        log.warning("%s; bd will reject this file", exc)


def cmd_bd(args):
    report = metrics.bd_report(metrics.RDCurve.from_csv(args.ref), metrics.RDCurve.from_csv(args.test),
                               (Path(args.ref).stem, Path(args.test).stem))
    if args.out:
        Path(args.out).write_text(report)
    sys.stdout.write(report)


def cmd_selftest(args):
    failed = 0
    for res in selftest.run_all(args.suite or None):
        print(f"{'PASS' if res.passed else 'FAIL'} {res.name} ({res.seconds:.1f}s): {res.detail}")
        failed += not res.passed
    return 1 if failed else 0


# ------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="pcacgan", description="Learned point cloud attribute codec.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=False):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--block-edge", type=int, default=16, choices=(8, 16, 32, 64))
        if model:
            sp.add_argument("--model", required=True, help="checkpoint file or sweep directory")
            sp.add_argument("--lambda-index", type=int, default=0)
            sp.add_argument("--avrpm", help="mask-network checkpoint from train-avrpm")
            sp.add_argument("--no-avrpm", action="store_true", help="uniform 16^3 voxelization")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=5)
    sp.add_argument("--points", type=int, default=800)
    sp.add_argument("--extent", type=float, default=32.0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train-avrpm", help="pre-train the block classifier")
    common(sp)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.set_defaults(func=cmd_train_avrpm)

    sp = sub.add_parser("train", help="train one model per lambda")
    common(sp)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True, help="output directory for lambda{i}.ckpt")
    sp.add_argument("--config", help="key=value overrides file")
    sp.add_argument("--latent-channels", type=int)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--avrpm")
    sp.add_argument("--no-discriminator", action="store_true")
    sp.add_argument("--dense-conv", action="store_true")
    sp.add_argument("--no-avrpm", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("encode", help="compress the colours of a PLY cloud")
    common(sp, model=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="reconstruct colours from a stream and the geometry")
    common(sp)
    sp.add_argument("--model", required=True, help="checkpoint file or sweep directory")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--geometry", required=True, help="PLY holding the (lossless) positions")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval", help="RD curve of a sweep over a dataset")
    common(sp, model=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True, help="RD curve CSV")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bd", help="Bjontegaard report of two RD curve CSVs")
    sp.add_argument("ref")
    sp.add_argument("test")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bd)

    sp = sub.add_parser("selftest", help="run the oracle suites")
    sp.add_argument("--suite", action="append", choices=sorted(selftest.SUITES))
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    level = os.environ.get("PCAC_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        parser.error(f"PCAC_LOG={level!r} is not a log level")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args) or 0
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pcacgan: error: {exc}", file=sys.stderr)
        return 2
    except (PcacError, OSError, ValueError) as exc:
        print(f"pcacgan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
