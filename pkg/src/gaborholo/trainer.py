"""Training and validation loop over a synthgen dataset."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pgm
from .layers import mse_loss
from .seeding import permutation, split_mix
from .synthgen import DatasetManifest, load_manifest
from .unet import Parameters, UNetConfig, init_parameters, save_checkpoint, sgd_step, unet_backward, unet_forward

log = logging.getLogger(__name__)

TARGET_MODES = ("hologram", "generating")


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dataset_manifest: str | Path
    unet: UNetConfig
    epochs: int = 70
    learning_rate: float = 0.1
    batch_size: int = 4
    target_mode: str = "hologram"
    shuffle_seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only
    output_dir: str | Path | None = None
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    seconds: float


@dataclass
class LossHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord):
        expected = len(self.records) + 1
        if rec.epoch != expected:
            raise ValueError(f"epoch {rec.epoch} out of order, expected {expected}")
        self.records.append(rec)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_mse), repr(r.val_mse), f"{r.seconds:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "LossHistory":
        hist = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                hist.append(EpochRecord(int(row["epoch"]), float(row["train_mse"]), float(row["val_mse"]), float(row["seconds"])))
        return hist


def _target_key(target_mode):
    return "h_path" if target_mode == "hologram" else "a_path"


def load_pairs(manifest: DatasetManifest, split: str, target_mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Stack (input, target) images of one split as (B, 1, n, n) float64 arrays."""
    entries = manifest.split(split)
    n = manifest.config.n
    xs = np.empty((len(entries), 1, n, n))
    ys = np.empty_like(xs)
    key = _target_key(target_mode)
    for j, e in enumerate(entries):
        for arr, rel in ((xs, e.i_path), (ys, getattr(e, key))):
            path = manifest.resolve(rel)
            try:
                img = pgm.read_pgm(path)
            except (OSError, pgm.PGMError) as exc:
                raise ConfigError(f"cannot read {path}: {exc}") from exc
            if img.shape != (n, n):
                raise ConfigError(f"{path}: expected {n}x{n}, got {img.shape}")
            arr[j, 0] = img
    return xs, ys


def evaluate(config: UNetConfig, params: Parameters, xs: np.ndarray, ys: np.ndarray, batch_size: int = 8) -> float:
    """Mean per-image MSE, fixed order, no parameter mutation."""
    if len(xs) == 0:
        raise ConfigError("cannot evaluate on an empty split")
    total = 0.0
    for start in range(0, len(xs), batch_size):
        out, _ = unet_forward(config, params, xs[start : start + batch_size])
        diff = out - ys[start : start + batch_size].astype(out.dtype)
        total += float(np.sum(np.mean(diff.astype(np.float64) ** 2, axis=(1, 2, 3))))
    return total / len(xs)


def validate(params: Parameters, manifest: DatasetManifest | str | Path, target_mode: str = "hologram",
             config: UNetConfig | None = None) -> float:
    """Mean MSE over the manifest's validation entries."""
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    if not manifest.split("validation"):
        raise ConfigError("dataset has no validation entries")
    if config is None:
        config = _infer_config(params, manifest.config.n)
    xs, ys = load_pairs(manifest, "validation", target_mode)
    return evaluate(config, params, xs, ys)


def _infer_config(params: Parameters, size: int) -> UNetConfig:
    depth = sum(1 for k in params if k.startswith("dec") and k.endswith(".up.w"))
    base = params["head.w"].shape[2]
    return UNetConfig(input_size=size, depth=depth, base_channels=base)


def predict(config: UNetConfig, params: Parameters, interferogram: np.ndarray) -> np.ndarray:
    """Network estimate H' for one (n, n) interferogram."""
    img = np.asarray(interferogram, dtype=np.float64)
    s = config.input_size
    if img.shape != (s, s):
        raise ConfigError(f"network expects a {s}x{s} image, got {img.shape}")
    out, _ = unet_forward(config, params, img[None, None])
    return np.asarray(out[0, 0], dtype=np.float64)


def epoch_order(shuffle_seed: int, epoch: int, count: int) -> np.ndarray:
    return permutation(count, split_mix(shuffle_seed, epoch))


def train(config: TrainConfig, on_epoch=None, initial: Parameters | None = None) -> tuple[Parameters, LossHistory]:
    """Plain minibatch SGD on MSE.

    Writes ``history.csv`` and ``ckpt_%04d.gfnc`` / ``ckpt_final.gfnc`` into
    ``config.output_dir`` when it is set. ``on_epoch(record)`` is called after
    each epoch.
    """
    manifest = load_manifest(config.dataset_manifest)
    if manifest.config.n != config.unet.input_size:
        raise ConfigError(f"dataset images are {manifest.config.n}px but the network expects {config.unet.input_size}px")
    if not manifest.split("train"):
        raise ConfigError("dataset has no training entries")
    out_dir = Path(config.output_dir) if config.output_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    dtype = np.dtype(config.dtype)
    x_train, y_train = load_pairs(manifest, "train", config.target_mode)
    x_val, y_val = load_pairs(manifest, "validation", config.target_mode) if manifest.split("validation") else (None, None)
    x_train, y_train = x_train.astype(dtype), y_train.astype(dtype)
    if x_val is not None:
        x_val, y_val = x_val.astype(dtype), y_val.astype(dtype)

    params = (initial.copy() if initial is not None else init_parameters(config.unet)).astype(dtype)
    history = LossHistory()
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = epoch_order(config.shuffle_seed, epoch, len(x_train))
        losses = []
        for batch_no, start in enumerate(range(0, len(order), bs)):
            idx = order[start : start + bs]
            out, cache = unet_forward(config.unet, params, x_train[idx])
            loss, grad = mse_loss(out, y_train[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            unet_backward(config.unet, params, cache, grad)
            sgd_step(params, config.learning_rate)
            losses.append(loss)
        train_mse = float(np.mean(losses))
        val_mse = evaluate(config.unet, params, x_val, y_val) if x_val is not None else float("nan")
        if x_val is not None and not math.isfinite(val_mse):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, train_mse, val_mse, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d train_mse=%.6g val_mse=%.6g (%.1fs)", epoch, train_mse, val_mse, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
        if out_dir is not None:
            history.write_csv(out_dir / "history.csv")
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt_{epoch:04d}.gfnc", config.unet, params.astype(np.float64))
    if out_dir is not None:
        save_checkpoint(out_dir / "ckpt_final.gfnc", config.unet, params.astype(np.float64))
    return params, history
