"""Dataset ingestion: IDX and PGM files, patch extraction, synthetic sets, splits, manifests."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Rng

IDX_IMAGES = 0x00000803
IDX_IMAGES_CHANNELS = 0x00000804  # (N, C, H, W) ubyte, for pre-converted colour sets
IDX_LABELS = 0x00000801

LESION, NORMAL = 1, 0
REGIONS = ("lesion", "normal")
REGION_LABEL = {"lesion": LESION, "normal": NORMAL}
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
MIN_COVERAGE = 0.7


class DataError(Exception):
    """Base class for every dataset problem (CLI exit code 2)."""


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class RegionError(DataError):
    pass


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedFileError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file (plain or gzipped) into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_IMAGES_CHANNELS, IDX_LABELS):
        raise BadMagicError(f"{path}: unexpected magic number 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    body = raw[header:]
    if len(body) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} data bytes, found {len(body)}")
    if len(body) > expected:
        raise CountMismatchError(f"{path}: {len(body) - expected} trailing bytes after {dims}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims).copy()


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    """Write a uint8 array of rank 1 (labels), 3 or 4 (images) as IDX."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError(f"IDX writer expects uint8 data, got {array.dtype}")
    magic = {1: IDX_LABELS, 3: IDX_IMAGES, 4: IDX_IMAGES_CHANNELS}.get(array.ndim)
    if magic is None:
        raise ValueError(f"cannot store a rank-{array.ndim} array as IDX")
    blob = struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()
    path = Path(path)
    if compress if compress is not None else path.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0


def minmax_scale(pixels: np.ndarray) -> np.ndarray:
    """Rescale to span [0, 1]; a constant image maps to zeros."""
    pixels = np.asarray(pixels, dtype=np.float64)
    lo, hi = pixels.min(), pixels.max()
    return np.zeros_like(pixels) if hi == lo else (pixels - lo) / (hi - lo)


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


@dataclass
class LabeledImage:
    pixels: np.ndarray                   # (C, H, W) in [0, 1]
    label: int = -1
    masks: dict = field(default_factory=dict)  # region name -> (H, W) bool
    image_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[None]
        for name, mask in self.masks.items():
            if mask.shape != self.pixels.shape[1:]:
                raise DataError(f"{self.image_id}: mask {name!r} shape {mask.shape} "
                                f"differs from image {self.pixels.shape[1:]}")
            if not mask.any():
                raise RegionError(f"{self.image_id}: region {name!r} is empty")


def load_idx_arrays(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """(N, C, H, W) float images in [0, 1] and (N,) int labels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim not in (3, 4):
        raise BadMagicError(f"{images_path}: not an image file")
    if labels.ndim != 1:
        raise BadMagicError(f"{labels_path}: not a label file")
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if images.ndim == 3:
        images = images[:, None]
    return to_unit(images), labels.astype(np.int64)


def load_idx(images_path, labels_path) -> list[LabeledImage]:
    x, y = load_idx_arrays(images_path, labels_path)
    return [LabeledImage(x[i], int(y[i]), image_id=str(i)) for i in range(len(x))]


# ---------------------------------------------------------------------------
# PGM (binary P5, 8-bit)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {image.shape}")
    if image.dtype != np.uint8:
        image = to_bytes(image)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM as a uint8 (H, W) array."""
    raw = _read_bytes(path)
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError(f"{path}: PGM header truncated")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise BadMagicError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    body = raw[pos + 1:]
    if len(body) < w * h:
        raise TruncatedFileError(f"{path}: expected {w * h} pixels, found {len(body)}")
    return np.frombuffer(body[:w * h], dtype=np.uint8).reshape(h, w).copy()


def read_mask(path) -> np.ndarray:
    return read_pgm(path) >= 128


def load_annotated_dir(directory) -> list[LabeledImage]:
    """Images ``<id>.pgm`` with masks ``<id>.lesion.pgm`` and ``<id>.normal.pgm``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"image directory not found: {directory}")
    images = []
    for path in sorted(directory.glob("*.pgm")):
        stem = path.name[:-4]
        if "." in stem:
            continue
        masks = {}
        for region in REGIONS:
            mpath = directory / f"{stem}.{region}.pgm"
            if not mpath.exists():
                raise DataError(f"missing {region} mask for image {stem}: {mpath}")
            masks[region] = read_mask(mpath)
        images.append(LabeledImage(minmax_scale(read_pgm(path))[None], masks=masks, image_id=stem))
    if not images:
        raise DataError(f"no images found in {directory}")
    return images


# ---------------------------------------------------------------------------
# patches


@dataclass(frozen=True)
class PatchSample:
    patch: np.ndarray  # (C, size, size)
    label: int
    source: str
    x: int             # column of the top-left corner
    y: int             # row of the top-left corner


def valid_placements(mask: np.ndarray, size: int = 16,
                     min_coverage: float = MIN_COVERAGE) -> np.ndarray:
    """Top-left (row, col) pairs whose size x size window is in bounds and
    at least ``min_coverage`` inside the mask, in row-major order."""
    h, w = mask.shape
    if h < size or w < size:
        return np.zeros((0, 2), dtype=np.int64)
    counts = sliding_window_view(mask.astype(np.int32), (size, size)).sum(axis=(2, 3))
    need = int(np.ceil(min_coverage * size * size - 1e-9))
    return np.argwhere(counts >= need)


def extract_patches(img: LabeledImage, per_region: int = 30, rng: Rng | None = None,
                    size: int = 16, min_coverage: float = MIN_COVERAGE) -> list[PatchSample]:
    """``per_region`` patches from each annotated region (lesion first, then normal).

    Placements are drawn uniformly from the valid set; without replacement
    when the set is large enough, with replacement otherwise.
    """
    rng = rng or Rng(0)
    out = []
    for region in REGIONS:
        if region not in img.masks:
            raise RegionError(f"{img.image_id}: no {region} mask")
        places = valid_placements(img.masks[region], size, min_coverage)
        if len(places) == 0:
            raise RegionError(f"{img.image_id}: region {region!r} admits no valid "
                              f"{size}x{size} placement")
        idx = rng.choice(len(places), size=per_region, replace=len(places) < per_region)
        for k in idx:
            r, c = (int(v) for v in places[k])
            out.append(PatchSample(img.pixels[:, r:r + size, c:c + size].copy(),
                                   REGION_LABEL[region], img.image_id, c, r))
    return out


# ---------------------------------------------------------------------------
# synthetic data


def _disk(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _balanced_labels(n: int, rng: Rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % 2)


def synth_simple(n: int, rng: Rng, size: int = 16):
    """Bright (class 1) or dark (class 0) disk on a flat mid-grey background."""
    if n <= 0:
        raise ValueError("n must be > 0")
    labels = _balanced_labels(n, rng)
    x = np.empty((n, 1, size, size))
    for k in range(n):
        img = 0.5 + rng.normal(0.03, (size, size), dtype=np.float64)
        r = rng.uniform(3.0, 5.0)
        cy, cx = rng.uniform(r, size - 1 - r, size=2)
        img[_disk(size, cy, cx, r)] = 0.9 if labels[k] else 0.1
        x[k, 0] = img
    return np.clip(x, 0, 1), labels


def _texture(size: int, rng: Rng, amplitude: float) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size] / size
    field_ = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return amplitude * field_ / 3


def synth_complex(n: int, rng: Rng, size: int = 16):
    """Small disks whose class is their contrast against a heterogeneous background.

    Each image is split by a random line into a brighter and a darker half
    around a random level, overlaid with a faint sinusoidal texture and one
    or two distractor squares.  Class 1 disks sit above the level and class 0
    disks below it, by a jittered margin smaller than the half-to-half step,
    so neither mean intensity nor the local brightness alone gives the class.
    """
    if n <= 0:
        raise ValueError("n must be > 0")
    labels = _balanced_labels(n, rng)
    x = np.empty((n, 1, size, size))
    yy, xx = np.mgrid[:size, :size] - (size - 1) / 2
    for k in range(n):
        level = rng.uniform(0.35, 0.65)
        theta = rng.uniform(0, 2 * np.pi)
        side = (np.cos(theta) * xx + np.sin(theta) * yy) > rng.uniform(-2, 2)
        step = rng.uniform(0.15, 0.25)
        img = np.where(side, level + step, level - step)
        img = img + _texture(size, rng, 0.04) + rng.normal(0.03, (size, size), dtype=np.float64)
        for _ in range(int(rng.integers(1, 3))):
            s = int(rng.integers(2, 4))
            r0, c0 = (int(v) for v in rng.integers(0, size - s, size=2))
            img[r0:r0 + s, c0:c0 + s] = level + rng.uniform(-0.3, 0.3)
        r = rng.uniform(2.0, 3.0)
        cy, cx = rng.uniform(r, size - 1 - r, size=2)
        contrast = rng.uniform(0.06, 0.12)
        img[_disk(size, cy, cx, r)] = level + (contrast if labels[k] else -contrast)
        x[k, 0] = img
    return np.clip(x, 0, 1), labels


def synth_annotated(n: int, rng: Rng, size: int = 64) -> list[LabeledImage]:
    """Whole images with a lesion disk and a separate normal-tissue rectangle."""
    images = []
    for k in range(n):
        level = rng.uniform(0.3, 0.6)
        img = level + _texture(size, rng, 0.08) + rng.normal(0.03, (size, size), dtype=np.float64)
        r = rng.uniform(10.0, 14.0)
        cy, cx = rng.uniform(r + 1, size / 2 - 1, size=2)
        lesion = _disk(size, cy, cx, r)
        img[lesion] += rng.uniform(0.2, 0.35)
        normal = np.zeros((size, size), dtype=bool)
        r0, c0 = (int(v) for v in rng.integers(size // 2 + 2, size - 22, size=2))
        normal[r0:r0 + 20, c0:c0 + 20] = True
        images.append(LabeledImage(np.clip(img, 0, 1)[None], masks={"lesion": lesion,
                                                                    "normal": normal},
                                   image_id=f"img{k:03d}"))
    return images


def write_annotated_dir(directory, images: list[LabeledImage]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for img in images:
        write_pgm(directory / f"{img.image_id}.pgm", img.pixels[0])
        for region, mask in img.masks.items():
            write_pgm(directory / f"{img.image_id}.{region}.pgm", mask.astype(np.uint8) * 255)


def mean_threshold_accuracy(x: np.ndarray, y: np.ndarray) -> float:
    """Best accuracy of any threshold (either polarity) on mean pixel intensity."""
    means = x.reshape(len(x), -1).mean(axis=1)
    order = np.argsort(means, kind="stable")
    ys = np.asarray(y)[order]
    n = len(ys)
    # predict 1 above the cut: errors = ones below + zeros above
    ones_below = np.concatenate([[0], np.cumsum(ys)])
    zeros_above = (n - np.sum(ys)) - (np.arange(n + 1) - ones_below)
    best = n - np.min(ones_below + zeros_above)
    best = max(best, n - np.min(n - (ones_below + zeros_above)))
    return best / n


# ---------------------------------------------------------------------------
# splits and manifests


def split_sources(sources, seed: int) -> dict:
    """Assign each distinct source image to train/val/test (80/10/10)."""
    unique = sorted(set(sources))
    n = len(unique)
    if n < 10:
        raise DataError(f"need at least 10 source images to split, got {n}")
    order = Rng(seed).child("split").permutation(n)
    n_val = int(n * SPLIT_FRACTIONS[1] + 0.5)
    n_test = int(n * SPLIT_FRACTIONS[2] + 0.5)
    n_train = n - n_val - n_test
    assignment = {}
    for rank, idx in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        assignment[unique[idx]] = split
    return assignment


@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    split: str
    label: int
    source: str
    x: int = 0
    y: int = 0


def split(rows: list[ManifestRow], seed: int) -> list[ManifestRow]:
    """Re-assign splits at source-image granularity."""
    assignment = split_sources([r.source for r in rows], seed)
    return [ManifestRow(r.sample_id, assignment[r.source], r.label, r.source, r.x, r.y)
            for r in rows]


def write_manifest(path, rows: list[ManifestRow]) -> None:
    lines = [f"{r.sample_id}\t{r.split}\t{r.label}\t{r.source}\t{r.x}\t{r.y}\n" for r in rows]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 6 or parts[1] not in SPLITS:
            raise DataError(f"{path}:{lineno}: malformed manifest line {line!r}")
        rows.append(ManifestRow(parts[0], parts[1], int(parts[2]), parts[3],
                                int(parts[4]), int(parts[5])))
    return rows


def split_counts(rows: list[ManifestRow]) -> dict:
    out = {}
    for s in SPLITS:
        sel = [r for r in rows if r.split == s]
        out[s] = {"samples": len(sel), "sources": len({r.source for r in sel})}
    return out


def leaking_sources(rows: list[ManifestRow]) -> set:
    seen: dict[str, set] = {}
    for r in rows:
        seen.setdefault(r.source, set()).add(r.split)
    return {s for s, splits in seen.items() if len(splits) > 1}


# ---------------------------------------------------------------------------
# in-memory dataset


@dataclass
class Dataset:
    x: np.ndarray            # (N, C, H, W) in [0, 1]
    y: np.ndarray            # (N,)
    rows: list[ManifestRow]

    def __post_init__(self):
        if len(self.x) != len(self.y) or len(self.x) != len(self.rows):
            raise DataError("dataset arrays and manifest disagree in length")

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = np.array([k for k, r in enumerate(self.rows) if r.split == name], dtype=np.int64)
        return self.x[idx], self.y[idx]

    @classmethod
    def from_arrays(cls, x, y, seed: int, sources=None) -> "Dataset":
        sources = [f"s{k:06d}" for k in range(len(x))] if sources is None else list(sources)
        rows = [ManifestRow(str(k), "train", int(y[k]), sources[k]) for k in range(len(x))]
        return cls(np.asarray(x), np.asarray(y, dtype=np.int64), split(rows, seed))

    @classmethod
    def from_patches(cls, patches: list[PatchSample], seed: int) -> "Dataset":
        rows = [ManifestRow(str(k), "train", p.label, p.source, p.x, p.y)
                for k, p in enumerate(patches)]
        x = np.stack([p.patch for p in patches]) if patches else np.zeros((0, 1, 16, 16))
        return cls(x, np.array([p.label for p in patches], dtype=np.int64), split(rows, seed))

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        pixels = to_bytes(self.x)
        write_idx(directory / "images.idx", pixels[:, 0] if pixels.shape[1] == 1 else pixels)
        write_idx(directory / "labels.idx", self.y.astype(np.uint8))
        write_manifest(directory / "manifest.tsv", self.rows)

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        if not directory.is_dir():
            raise DataError(f"dataset directory not found: {directory}")
        x, y = load_idx_arrays(directory / "images.idx", directory / "labels.idx")
        rows = read_manifest(directory / "manifest.tsv")
        if len(rows) != len(x):
            raise CountMismatchError(f"{directory}: manifest has {len(rows)} rows for {len(x)} images")
        return cls(x, y, rows)


def synthetic_dataset(kind: str, n: int, seed: int, size: int = 16) -> Dataset:
    gen = {"synthetic-simple": synth_simple, "simple": synth_simple,
           "synthetic-complex": synth_complex, "complex": synth_complex}.get(kind)
    if gen is None:
        raise DataError(f"unknown synthetic kind {kind!r}")
    x, y = gen(n, Rng(seed).child(f"data/{kind.removeprefix('synthetic-')}"), size)
    return Dataset.from_arrays(x, y, seed)
