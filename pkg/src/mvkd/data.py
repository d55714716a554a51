"""Datasets: image folders, stratified splits, preprocessing, batching, synthetic scenes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import (
    DecodeError,
    EmptyDataset,
    InvalidDataset,
    InvalidParameter,
    IoError,
    StratificationError,
)
from .tensor import Rng, Tensor

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.2, 0.1)
IMAGE_EXTENSIONS = (".ppm", ".pnm", ".png")


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float in [0, 1]
    label: int
    source_id: str


@dataclass
class Entry:
    source_id: str
    label: int
    split: str = ""


@dataclass
class DatasetManifest:
    class_names: list[str]
    entries: list[Entry]
    seed: int | None = None
    split_fractions: tuple[float, float, float] | None = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def indices(self, split: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == split]

    def counts(self, split: str | None = None) -> list[int]:
        out = [0] * self.num_classes
        for e in self.entries:
            if split is None or e.split == split:
                out[e.label] += 1
        return out

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "entries": [{"source_id": e.source_id, "label": e.label, "split": e.split} for e in self.entries],
            "seed": self.seed,
            "split_fractions": list(self.split_fractions) if self.split_fractions else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        fr = d.get("split_fractions")
        return cls(
            class_names=list(d["class_names"]),
            entries=[Entry(e["source_id"], int(e["label"]), e.get("split", "")) for e in d["entries"]],
            seed=d.get("seed"),
            split_fractions=tuple(fr) if fr else None,
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


@dataclass
class Dataset:
    """A manifest with its images decoded and preprocessed in memory."""

    manifest: DatasetManifest
    images: np.ndarray  # [N, 3, S, S] float32
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.labels = np.array([e.label for e in self.manifest.entries], dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise InvalidDataset(f"{len(self.images)} images for {len(self.labels)} manifest entries")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def sample(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), self.manifest.entries[i].source_id)

    def split(self, fractions=DEFAULT_FRACTIONS, seed: int = 0) -> "Dataset":
        return Dataset(split_dataset(self.manifest, fractions, seed), self.images)

    def split_arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.manifest.indices(split)
        return self.images[idx], self.labels[idx]

    def save_folder(self, root) -> Path:
        """Write ``root/<class_name>/<n>.ppm`` (8-bit) plus ``manifest.json``."""
        root = Path(root)
        for i, e in enumerate(self.manifest.entries):
            name = e.source_id.rsplit("/", 1)[-1]
            write_ppm(root / self.manifest.class_names[e.label] / f"{name}.ppm", self.images[i])
        self.manifest.save(root / "manifest.json")
        return root


# ---------------------------------------------------------------------------
# image codecs
# ---------------------------------------------------------------------------


def _ppm_tokens(raw: bytes, count: int, pos: int) -> tuple[list[int], int]:
    tokens = []
    n = len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("unexpected end of header")
        tokens.append(int(raw[start:pos]))
    return tokens, pos


def decode_ppm(raw: bytes) -> np.ndarray:
    """Decode binary (P6) or ASCII (P3) PPM into a float [3, H, W] array in [0, 1]."""
    magic = raw[:2]
    if magic not in (b"P6", b"P3"):
        raise ValueError(f"not a PPM file (magic {magic!r})")
    (w, h, maxval), pos = _ppm_tokens(raw, 3, 2)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ValueError(f"bad PPM header {w}x{h} maxval {maxval}")
    if magic == b"P6":
        pos += 1  # single whitespace after maxval
        dtype = ">u2" if maxval > 255 else "u1"
        count = w * h * 3
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos) if len(raw) - pos >= count * np.dtype(dtype).itemsize else None
        if data is None:
            raise ValueError("truncated pixel data")
    else:
        data = np.array(raw[pos:].split(), dtype=np.int64)
        if data.size < w * h * 3:
            raise ValueError("truncated pixel data")
        data = data[: w * h * 3]
    img = data.reshape(h, w, 3).astype(np.float64) / maxval
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def encode_ppm(image: np.ndarray) -> bytes:
    """[3, H, W] floats in [0, 1] -> 8-bit P6 bytes."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise InvalidParameter(f"expected [3,H,W] image, got {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{q.shape[1]} {q.shape[0]}\n255\n".encode() + q.tobytes()


def write_ppm(path, image: np.ndarray) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_ppm(image))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def _decode_png(path: Path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError:  # optional codec
        raise DecodeError(f"{path}: PNG support needs Pillow") from None
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            img = _decode_png(path)
        else:
            img = decode_ppm(path.read_bytes())
    except DecodeError:
        raise
    except Exception as exc:
        raise DecodeError(f"{path}: {exc}") from None
    if img.shape[1] == 0 or img.shape[2] == 0:
        raise DecodeError(f"{path}: empty image")
    return img


# ---------------------------------------------------------------------------
# folders and splits
# ---------------------------------------------------------------------------


def load_image_folder(root) -> tuple[DatasetManifest, Callable[[str], np.ndarray]]:
    """Index ``root/<class_name>/<image>``; returns (manifest, loader).

    Classes and files are sorted lexicographically; ``source_id`` is the path
    relative to ``root``. The loader decodes one source_id to [3, H, W].
    """
    root = Path(root)
    if not root.is_dir():
        raise InvalidDataset(f"{root} is not a directory")
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name)
    if len(class_dirs) < 2:
        raise InvalidDataset(f"{root}: need at least 2 class folders, found {len(class_dirs)}")
    entries = []
    for label, d in enumerate(class_dirs):
        files = sorted(f.name for f in d.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise InvalidDataset(f"{d}: class folder has no images")
        entries.extend(Entry(f"{d.name}/{f}", label) for f in files)
    manifest = DatasetManifest([d.name for d in class_dirs], entries)

    def loader(source_id: str) -> np.ndarray:
        return read_image(root / source_id)

    return manifest, loader


def load_dataset(root, image_size: int = 64, normalization=None) -> Dataset:
    """Decode and preprocess every image of an image folder."""
    manifest, loader = load_image_folder(root)
    images = np.stack([preprocess(loader(e.source_id), image_size, normalization) for e in manifest.entries])
    return Dataset(manifest, images.astype(np.float32))


def _validate_fractions(fractions) -> tuple[float, float, float]:
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f <= 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
        raise InvalidParameter(f"split fractions must be 3 positive numbers summing to 1, got {fractions}")
    return fr


def split_counts(n: int, fractions=DEFAULT_FRACTIONS) -> tuple[int, int, int]:
    """(train, val, test) sizes for a class of ``n`` items: floor to val/test, rest to train."""
    _, f_val, f_test = _validate_fractions(fractions)
    n_val = math.floor(n * f_val + 1e-9)
    n_test = math.floor(n * f_test + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_dataset(manifest: DatasetManifest, fractions=DEFAULT_FRACTIONS, seed: int = 0) -> DatasetManifest:
    """Stratified train/val/test assignment.

    Within each class the members are shuffled with a seeded permutation;
    the first floor(n*f_val) go to val, the next floor(n*f_test) to test and
    the remainder to train.
    """
    fractions = _validate_fractions(fractions)
    rng = Rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        by_class.setdefault(e.label, []).append(i)
    assignment = [""] * len(manifest.entries)
    for label in sorted(by_class):
        members = by_class[label]
        n = len(members)
        if n < 3:
            name = manifest.class_names[label]
            raise StratificationError(f"class {name!r} has {n} items; need at least 3 to stratify")
        _, n_val, n_test = split_counts(n, fractions)
        perm = rng.stream("split", label).permutation(n)
        for rank, j in enumerate(perm):
            if rank < n_val:
                split = "val"
            elif rank < n_val + n_test:
                split = "test"
            else:
                split = "train"
            assignment[members[j]] = split
    entries = [Entry(e.source_id, e.label, s) for e, s in zip(manifest.entries, assignment)]
    return DatasetManifest(list(manifest.class_names), entries, seed, fractions)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def _resize_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, edge clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a [C, H, W] array (half-pixel sampling, edge clamp)."""
    c, h, w = image.shape
    if h < 1 or w < 1:
        raise DecodeError("cannot resize an empty image")
    if (h, w) == (height, width):
        return image.copy()
    y0, y1, fy = _resize_weights(h, height)
    x0, x1, fx = _resize_weights(w, width)
    rows = image[:, y0, :] * (1 - fy)[None, :, None] + image[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]


def preprocess(image: np.ndarray, target_size: int, normalization=None) -> np.ndarray:
    """Resize to ``target_size`` squared, clip to [0, 1], optionally normalize.

    ``image`` is [3, H, W] either in [0, 1] floats or 0..255 integers.
    ``normalization`` is an optional ``(mean, std)`` pair of 3-vectors.
    """
    if target_size < 8:
        raise InvalidParameter(f"target size must be >= 8, got {target_size}")
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3 or img.shape[1] == 0 or img.shape[2] == 0:
        raise DecodeError(f"expected a non-empty [3,H,W] image, got shape {img.shape}")
    img = img.astype(np.float64) / 255.0 if img.dtype.kind in "ui" else img.astype(np.float64)
    out = np.clip(resize_bilinear(img, target_size, target_size), 0.0, 1.0)
    if normalization is not None:
        mean, std = (np.asarray(v, dtype=np.float64).reshape(3, 1, 1) for v in normalization)
        out = (out - mean) / std
    return out


def channel_stats(dataset: Dataset, split: str = "train") -> tuple[list[float], list[float]]:
    """Per-channel (mean, std) over one split, for input standardization."""
    images, _ = dataset.split_arrays(split)
    if not len(images):
        raise EmptyDataset(f"split {split!r} is empty")
    x = images.astype(np.float64)
    std = x.std(axis=(0, 2, 3))
    return x.mean(axis=(0, 2, 3)).tolist(), np.maximum(std, 1e-6).tolist()


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def batch_indices(
    dataset: Dataset, split: str, batch_size: int, seed: int, epoch: int, shuffle: bool = True
) -> Iterator[np.ndarray]:
    """Row indices of each mini-batch of ``split``; the last batch may be short.

    The order is a permutation drawn from (seed, epoch), so each epoch is
    reproducible on its own.
    """
    if batch_size < 1:
        raise InvalidParameter(f"batch_size must be >= 1, got {batch_size}")
    idx = np.array(dataset.manifest.indices(split), dtype=np.int64)
    if idx.size == 0:
        raise EmptyDataset(f"split {split!r} is empty")
    if shuffle:
        idx = idx[Rng(seed).stream("shuffle", epoch).permutation(idx.size)]
    for start in range(0, idx.size, batch_size):
        yield idx[start : start + batch_size]


def batch_iterator(
    dataset: Dataset, split: str, batch_size: int, seed: int, epoch: int, shuffle: bool = True
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield (images [b,3,S,S], labels) for each mini-batch of :func:`batch_indices`."""
    for sel in batch_indices(dataset, split, batch_size, seed, epoch, shuffle):
        yield Tensor(dataset.images[sel]), dataset.labels[sel]


# ---------------------------------------------------------------------------
# synthetic fire scenes
# ---------------------------------------------------------------------------

FIRE_CLASSES = ["fire", "non_fire"]


def _smooth_noise(gen: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = gen.uniform(-1.0, 1.0, size=(1, cells, cells))
    return resize_bilinear(grid, size, size)[0]


def _background(gen: np.random.Generator, size: int) -> np.ndarray:
    tint = gen.uniform(0.06, 0.28, size=3)
    tint[0] = min(tint[0], tint[1] + 0.05)  # background never warm-dominant
    texture = 0.10 * _smooth_noise(gen, size, max(2, size // 8)) + 0.04 * _smooth_noise(gen, size, max(2, size // 3))
    img = tint[:, None, None] * (1.0 + texture[None]) + 0.02 * gen.standard_normal((3, size, size))
    return img


def _warm_color(gen: np.random.Generator) -> np.ndarray:
    return np.array([1.0, gen.uniform(0.35, 0.75), gen.uniform(0.0, 0.15)])


def _add_fire(gen, img, cx, cy, count, elongation, amplitude, spread=(0.04, 0.10)):
    """Additive cluster of soft Gaussian blobs with irregular intensity (R > G > B)."""
    size = img.shape[-1]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    flicker = 1.0 + 0.45 * _smooth_noise(gen, size, max(2, size // 6))
    for _ in range(count):
        bx = cx + gen.normal(0.0, size * 0.06)
        by = cy + gen.normal(0.0, size * 0.06)
        sx = gen.uniform(*spread) * size
        sy = sx * elongation
        g = np.exp(-0.5 * (((xx - bx) / sx) ** 2 + ((yy - by) / sy) ** 2))
        img += amplitude * gen.uniform(0.7, 1.0) * _warm_color(gen)[:, None, None] * (g * flicker)[None]
    return img


def _add_disk(gen, img, amplitude):
    """Sharp-edged warm disk (sunset / red-object distractor)."""
    size = img.shape[-1]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = gen.uniform(0.07, 0.16) * size
    cx, cy = gen.uniform(r, size - r, size=2)
    mask = ((xx - cx) ** 2 + (yy - cy) ** 2) <= r * r
    alpha = amplitude * gen.uniform(0.6, 0.9)
    color = _warm_color(gen)
    img[:, mask] = (1 - alpha) * img[:, mask] + alpha * color[:, None]
    return img


_MULTI_ARCHETYPES = [
    (count, shape, pos)
    for count in (1, 2, 3)
    for shape in ("round", "tall")
    for pos in ("upper", "lower")
]


def multiclass_names() -> list[str]:
    return [f"c{i:02d}_n{c}_{s}_{p}" for i, (c, s, p) in enumerate(_MULTI_ARCHETYPES)]


def synth_image(seed: int, num_classes: int, hardness: str, image_size: int, label: int, index: int) -> np.ndarray:
    """One deterministic scene for (seed, class, index)."""
    hard = hardness == "hard"
    gen = Rng(seed).stream("data", num_classes, int(hard), image_size, label, index)
    img = _background(gen, image_size)
    s = image_size
    if num_classes == 2:
        if label == 0:
            cx, cy = gen.uniform(0.25 * s, 0.75 * s, size=2)
            if hard:
                _add_fire(gen, img, cx, cy, int(gen.integers(1, 4)), gen.uniform(0.8, 1.6), gen.uniform(0.35, 0.8))
                if gen.uniform() < 0.4:
                    _add_disk(gen, img, gen.uniform(0.5, 1.0))
            else:
                _add_fire(gen, img, cx, cy, int(gen.integers(3, 7)), gen.uniform(0.8, 1.6), gen.uniform(0.9, 1.2),
                          spread=(0.08, 0.16))
        elif hard:
            for _ in range(int(gen.integers(1, 3))):
                _add_disk(gen, img, gen.uniform(0.5, 1.0))
    else:
        count, shape, pos = _MULTI_ARCHETYPES[label]
        cx = gen.uniform(0.3 * s, 0.7 * s)
        cy = gen.uniform(0.2 * s, 0.35 * s) if pos == "upper" else gen.uniform(0.65 * s, 0.8 * s)
        elong = gen.uniform(0.8, 1.2) if shape == "round" else gen.uniform(2.0, 2.8)
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        for k in range(count):
            bx = cx + (k - (count - 1) / 2) * 0.22 * s
            sx = gen.uniform(0.05, 0.08) * s
            sy = sx * elong
            g = np.exp(-0.5 * (((xx - bx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
            img += gen.uniform(0.7, 1.0) * _warm_color(gen)[:, None, None] * g[None]
        if hard:
            _add_disk(gen, img, gen.uniform(0.4, 0.8))
    return np.clip(img, 0.0, 1.0)


def synth_fire_dataset(
    num_per_class: int,
    num_classes: int = 2,
    hardness: str = "easy",
    image_size: int = 64,
    seed: int = 0,
) -> Dataset:
    """Procedural fire / non-fire scenes (2 classes) or 12 blob archetypes.

    Easy 2-class mode: fire = dark textured background plus a warm cluster of
    soft blobs; non-fire = background only. Hard mode dims the fire, adds
    sharp warm disks (sunset / red-object distractors) to every non-fire
    image and to some fire images.
    """
    if num_per_class < 3:
        raise InvalidParameter(f"num_per_class must be >= 3, got {num_per_class}")
    if num_classes not in (2, 12):
        raise InvalidParameter(f"num_classes must be 2 or 12, got {num_classes}")
    if hardness not in ("easy", "hard"):
        raise InvalidParameter(f"hardness must be easy or hard, got {hardness!r}")
    if image_size < 8:
        raise InvalidParameter(f"image_size must be >= 8, got {image_size}")
    names = FIRE_CLASSES if num_classes == 2 else multiclass_names()
    entries, images = [], []
    for label in range(num_classes):
        for i in range(num_per_class):
            entries.append(Entry(f"synth/{names[label]}/{i:05d}", label))
            images.append(synth_image(seed, num_classes, hardness, image_size, label, i))
    manifest = DatasetManifest(list(names), entries, seed)
    return Dataset(manifest, np.stack(images).astype(np.float32))
