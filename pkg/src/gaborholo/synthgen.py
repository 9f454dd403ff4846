"""Synthetic (A, I, H) triplets and on-disk datasets.

A generating image A is a handful of random point sources, low-pass
filtered by a circular pupil. The interferogram I is |A propagated by -z|
and the magnitude hologram H is |I propagated by +z|. Every image is
max-normalised to a peak of 1 before storage.
"""

from __future__ import annotations

import json
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import pgm
from .seeding import PRNG_NAME, bounded, raw_stream, split_mix, unit_open_closed
from .wavefield import PropagationParams, check_field, dft2, idft2, propagate, reconstruct_hologram, rectify

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
# child-seed index reserved for the train/validation shuffle
VALIDATION_STREAM = 1 << 63


class DatasetError(RuntimeError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class DatasetConfig:
    m: int
    n: int
    n_points_min: int = 1
    n_points_max: int | None = None  # defaults to n*n // 10
    params: PropagationParams | None = None  # z is a magnitude here
    master_seed: int = 0
    validation_fraction: float = 0.15

    def __post_init__(self):
        if self.n_points_max is None:
            object.__setattr__(self, "n_points_max", max(1, self.n * self.n // 10))
        if self.params is None:
            object.__setattr__(self, "params", PropagationParams(n=self.n))
        if self.params.n != self.n:
            raise ValueError(f"params.n={self.params.n} does not match n={self.n}")
        if not self.params.z > 0:
            raise ValueError("dataset distance z must be a positive magnitude")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 1 <= self.n_points_min <= self.n_points_max <= self.n * self.n:
            raise ValueError(
                f"need 1 <= n_points_min <= n_points_max <= n^2, got {self.n_points_min}, {self.n_points_max}"
            )
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in [0, 1)")
        if not 0 <= self.master_seed < 1 << 64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if self.n_validation >= self.m:
            raise ValueError("validation split would leave no training entries")

    @property
    def n_validation(self) -> int:
        return round_half_up(self.validation_fraction * self.m)

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "n": self.n,
            "n_points_min": self.n_points_min,
            "n_points_max": self.n_points_max,
            "wavelength": self.params.wavelength,
            "pixel_pitch": self.params.pixel_pitch,
            "z": self.params.z,
            "master_seed": self.master_seed,
            "validation_fraction": self.validation_fraction,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetConfig":
        params = PropagationParams(d["wavelength"], d["pixel_pitch"], d["n"], d["z"])
        return cls(
            m=d["m"],
            n=d["n"],
            n_points_min=d["n_points_min"],
            n_points_max=d["n_points_max"],
            params=params,
            master_seed=d["master_seed"],
            validation_fraction=d["validation_fraction"],
        )


@dataclass
class ImageTriplet:
    a: np.ndarray
    i: np.ndarray
    h: np.ndarray
    seed: int
    n_points: int


@dataclass
class ManifestEntry:
    index: int
    seed: int
    n_points: int
    split: str
    a_path: str
    i_path: str
    h_path: str


@dataclass
class DatasetManifest:
    config: DatasetConfig
    entries: list[ManifestEntry]
    root: Path = field(default=Path("."), compare=False)
    prng_name: str = PRNG_NAME

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_json(),
            "prng_name": self.prng_name,
            "entries": [asdict(e) for e in self.entries],
        }


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Load ``manifest.json`` given the file or its dataset directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    if raw.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format_version {raw.get('format_version')!r}")
    if raw.get("invalid"):
        raise DatasetError(f"{path}: dataset is flagged invalid ({raw['invalid']})")
    entries = [ManifestEntry(**e) for e in raw["entries"]]
    return DatasetManifest(DatasetConfig.from_json(raw["config"]), entries, path.parent, raw["prng_name"])


# -- image synthesis -------------------------------------------------------------


def point_counts(config: DatasetConfig) -> list[int]:
    """Log-spaced source-point counts, one per triplet."""
    lo, hi, m = config.n_points_min, config.n_points_max, config.m
    if m == 1:
        return [lo]
    out = []
    for j in range(m):
        v = round_half_up(math.exp(math.log(lo) + (j / (m - 1)) * (math.log(hi) - math.log(lo))))
        out.append(min(max(v, lo), hi))
    return out


def generate_source_image(n: int, n_points: int, seed: int) -> np.ndarray:
    """Random point sources with brightness in (0, 1] on a zero background.

    Locations are drawn with replacement; on a collision the later draw wins.
    """
    if not 1 <= n_points <= n * n:
        raise ValueError(f"n_points must be in [1, {n * n}], got {n_points}")
    raw = raw_stream(seed, 2 * n_points)
    loc = bounded(raw[0::2], n * n).astype(np.int64)
    bright = unit_open_closed(raw[1::2])
    # index of the last draw for each distinct location
    _, first_in_reversed = np.unique(loc[::-1], return_index=True)
    last = n_points - 1 - first_in_reversed
    img = np.zeros(n * n)
    img[loc[last]] = bright[last]
    return img.reshape(n, n)


def aperture_mask(n: int) -> np.ndarray:
    """Disk of radius sqrt(2)*n/4 frequency samples about DC (boundary included)."""
    m = np.arange(n)
    c = np.where(m < n // 2, m, m - n)
    d2 = c[:, None] ** 2 + c[None, :] ** 2
    # d2 <= (sqrt(2) n / 4)^2  <=>  8 d2 <= n^2, kept in integers for an exact tie
    return 8 * d2 <= n * n


def lowpass_circular(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    spec = dft2(check_field(image)) * aperture_mask(image.shape[0])
    return np.maximum(idft2(spec).real, 0.0)


def synth_interferogram(a: np.ndarray, params: PropagationParams) -> np.ndarray:
    """|A propagated by -|z||."""
    if not params.z > 0:
        raise ValueError("pass z as a positive magnitude; the sign is applied here")
    return rectify(propagate(np.asarray(a, dtype=np.complex128), params.with_z(-params.z)))


def max_normalize(image: np.ndarray) -> np.ndarray:
    peak = image.max()
    return image / peak if peak > 0 else image.copy()


def synth_triplet(n_points: int, seed: int, config: DatasetConfig) -> ImageTriplet:
    params = config.params
    a = lowpass_circular(generate_source_image(config.n, n_points, seed))
    i = synth_interferogram(a, params)
    h = reconstruct_hologram(i, params)
    return ImageTriplet(max_normalize(a), max_normalize(i), max_normalize(h), seed, n_points)


def triplet_seed(config: DatasetConfig, index: int) -> int:
    return split_mix(config.master_seed, index)


def split_assignment(config: DatasetConfig) -> list[str]:
    """'train' / 'validation' label per index.

    The last ``n_validation`` positions of a seeded shuffle are validation.
    """
    from .seeding import permutation

    perm = permutation(config.m, split_mix(config.master_seed, VALIDATION_STREAM))
    labels = ["train"] * config.m
    for idx in perm[config.m - config.n_validation :]:
        labels[int(idx)] = "validation"
    return labels


def _triplet_job(args):
    n_points, seed, config = args
    return synth_triplet(n_points, seed, config)


def build_dataset(config: DatasetConfig, output_dir: str | os.PathLike, jobs: int = 1) -> DatasetManifest:
    """Generate and store ``config.m`` triplets plus ``manifest.json``.

    Output is byte-identical for equal configs regardless of ``jobs``. On an
    I/O failure every file written so far is removed before raising.
    """
    root = Path(output_dir)
    counts = point_counts(config)
    labels = split_assignment(config)
    seeds = [triplet_seed(config, j) for j in range(config.m)]
    written: list[Path] = []
    created_dirs: list[Path] = []
    try:
        for sub in ("", "a", "i", "h"):
            d = root / sub
            if not d.exists():
                d.mkdir(parents=True)
                created_dirs.append(d)
        work = [(counts[j], seeds[j], config) for j in range(config.m)]
        if jobs > 1:
            pool = ProcessPoolExecutor(max_workers=jobs)
            triplets = pool.map(_triplet_job, work, chunksize=max(1, config.m // (4 * jobs)))
        else:
            pool = None
            triplets = map(_triplet_job, work)
        entries = []
        try:
            for j, trip in enumerate(triplets):
                paths = {}
                for key, img in (("a", trip.a), ("i", trip.i), ("h", trip.h)):
                    rel = f"{key}/{j:06d}.pgm"
                    target = root / rel
                    try:
                        pgm.write_pgm16(target, img)
                    except OSError as exc:
                        raise DatasetError(f"failed writing {target}: {exc}") from exc
                    written.append(target)
                    paths[f"{key}_path"] = rel
                entries.append(ManifestEntry(j, trip.seed, trip.n_points, labels[j], **paths))
        finally:
            if pool is not None:
                pool.shutdown()
        manifest = DatasetManifest(config, entries, root)
        target = root / MANIFEST_NAME
        try:
            with open(target, "w", encoding="utf-8") as fh:
                json.dump(manifest.to_json(), fh, indent=1)
                fh.write("\n")
        except OSError as exc:
            written.append(target)
            raise DatasetError(f"failed writing {target}: {exc}") from exc
        return manifest
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        for d in reversed(created_dirs):
            shutil.rmtree(d, ignore_errors=True)
        raise
