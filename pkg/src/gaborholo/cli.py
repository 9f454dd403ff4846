"""``gaborholo`` command line: gen, train, reconstruct, predict, eval."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import pgm, wavefield
from .metrics import compare, format_number
from .synthgen import DatasetConfig, DatasetError, build_dataset, max_normalize
from .trainer import ConfigError, DivergenceError, TrainConfig, predict, train
from .unet import CheckpointError, UNetConfig, load_checkpoint
from .wavefield import PropagationParams


class InputError(Exception):
    pass


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return v


def _optics(p: argparse.ArgumentParser, z_default=wavefield.DEFAULT_DISTANCE):
    p.add_argument("--lambda", dest="wavelength", type=float, default=wavefield.DEFAULT_WAVELENGTH, help="wavelength in meters")
    p.add_argument("--pitch", type=float, default=wavefield.DEFAULT_PITCH, help="pixel pitch in meters")
    p.add_argument("--z", type=float, default=z_default, help="reconstruction distance in meters (> 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaborholo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic (A, I, H) dataset")
    p.add_argument("--m", type=int, required=True, help="number of triplets")
    p.add_argument("--n", type=int, required=True, help="image side in pixels (power of two)")
    _optics(p)
    p.add_argument("--nmin", type=int, default=1)
    p.add_argument("--nmax", type=int, default=None, help="default n*n/10")
    p.add_argument("--valfrac", type=float, default=0.15)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the UNet on a dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--base", type=int, default=16)
    p.add_argument("--epochs", type=int, default=70)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--target", choices=("hologram", "generating"), default="hologram")
    p.add_argument("--seed", type=_u64, default=0, help="weight-init and shuffle seed")
    p.add_argument("--ckpt-every", type=int, default=0, help="epochs between checkpoints (0: final only)")
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--out", required=True)

    p = sub.add_parser("reconstruct", help="classical hologram reconstruction of a PGM interferogram")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    _optics(p)

    p = sub.add_parser("predict", help="network hologram estimate of a PGM interferogram")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="compare two PGM images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", default=None, help="optional CSV report")
    return parser


def _read_input(path) -> np.ndarray:
    try:
        img = pgm.read_pgm(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except pgm.PGMError as exc:
        raise InputError(str(exc)) from exc
    if img.shape[0] != img.shape[1] or not wavefield.is_power_of_two(img.shape[0]):
        raise InputError(f"{path}: image must be square with a power-of-two side, got {img.shape[1]}x{img.shape[0]}")
    return img


def cmd_gen(args, parser):
    nmax = args.nmax if args.nmax is not None else max(1, args.n * args.n // 10)
    try:
        params = PropagationParams(args.wavelength, args.pitch, args.n, args.z)
        config = DatasetConfig(args.m, args.n, args.nmin, nmax, params, args.seed, args.valfrac)
    except ValueError as exc:
        parser.error(str(exc))
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    manifest = build_dataset(config, args.out, jobs=args.jobs)
    n_val = len(manifest.split("validation"))
    print(f"{Path(args.out) / 'manifest.json'}")
    print(f"triplets={len(manifest.entries)} train={len(manifest.entries) - n_val} validation={n_val}")


def cmd_train(args, parser):
    try:
        unet = UNetConfig(input_size=args.size, depth=args.depth, base_channels=args.base, seed=args.seed)
        config = TrainConfig(args.data, unet, args.epochs, args.lr, args.batch, args.target, args.seed,
                             args.ckpt_every, args.out, args.dtype)
    except ValueError as exc:
        parser.error(str(exc))

    def report(rec):
        print(f"epoch={rec.epoch} train_mse={rec.train_mse!r} val_mse={rec.val_mse!r} seconds={rec.seconds:.2f}", flush=True)

    train(config, on_epoch=report)
    print(Path(args.out) / "ckpt_final.gfnc")


def cmd_reconstruct(args, parser):
    if not args.z > 0:
        parser.error(f"--z must be positive for reconstruction, got {args.z}")
    img = _read_input(args.inp)
    try:
        params = PropagationParams(args.wavelength, args.pitch, img.shape[0], args.z)
    except ValueError as exc:
        parser.error(str(exc))
    h = wavefield.reconstruct_hologram(img, params)
    pgm.write_pgm16(args.out, max_normalize(h))


def cmd_predict(args, parser):
    config, params = load_checkpoint(args.ckpt)
    img = _read_input(args.inp)
    if img.shape[0] != config.input_size:
        raise InputError(f"{args.inp}: checkpoint expects {config.input_size}x{config.input_size}, got {img.shape[0]}x{img.shape[1]}")
    pgm.write_pgm16(args.out, max_normalize(predict(config, params, img)))


def cmd_eval(args, parser):
    a = pgm.read_pgm(args.a)
    b = pgm.read_pgm(args.b)
    if a.shape != b.shape:
        raise InputError(f"size mismatch: {args.a} is {a.shape[1]}x{a.shape[0]}, {args.b} is {b.shape[1]}x{b.shape[0]}")
    report = compare(a, b)
    print(report.format())
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mse", "psnr", "maxabs"])
            w.writerow([format_number(report.mse), format_number(report.psnr), format_number(report.max_abs_error)])


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "reconstruct": cmd_reconstruct, "predict": cmd_predict, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, parser)
    except (InputError, ConfigError, DatasetError, DivergenceError, CheckpointError, pgm.PGMError,
            wavefield.FieldError, OSError) as exc:
        print(f"gaborholo {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
