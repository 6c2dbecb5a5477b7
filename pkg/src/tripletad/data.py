"""Image preprocessing, patch sampling, random-erasing negatives, and the
dataset indexer.

Images travel as float32 arrays in [0, 1]. Preprocessing converts RGB to
luma (0.299 / 0.587 / 0.114), resizes bilinearly to a square target (1024 by
default), and min-max scales per image; a constant image maps to all zeros.
Patches are 64x64 crops taken from a randomly rescaled copy of the image so
that textural regularities at several spatial scales all land in the fixed
patch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, LayoutError, ShapeError
from .rng import RngStream

PATCH_SIZE = 64
FULL_SCALES = (1024, 512, 256, 128)
ERASE_AREA_RANGE = (0.02, 0.25)
ERASE_ASPECT_RANGE = (0.3, 3.3)
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


# ---------------------------------------------------------------------------
# preprocessing


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centered sampling; identity when the
    size already matches."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[:, None]
    wx = (xs - x0).astype(np.float32)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def minmax_scale(img: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant image becomes all zeros."""
    lo = float(img.min())
    hi = float(img.max())
    if hi == lo:
        return np.zeros_like(img, dtype=np.float32)
    return ((img - lo) / (hi - lo)).astype(np.float32)


def preprocess(img: np.ndarray, size: int = 1024) -> np.ndarray:
    """Grayscale conversion, bilinear resize to size x size, min-max scale."""
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[-1] in (3, 4):
        arr = arr[..., :3].astype(np.float32) @ _LUMA
    elif arr.ndim == 2:
        arr = arr.astype(np.float32)
    else:
        raise ShapeError(f"preprocess: expected (H, W) or (H, W, 3) raster, got {arr.shape}")
    arr = resize_bilinear(arr, size, size)
    return minmax_scale(arr)


def load_and_preprocess(path, size: int = 1024) -> np.ndarray:
    """Read an 8-bit grayscale or RGB raster and preprocess it."""
    try:
        with Image.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im)
            else:
                arr = np.asarray(im.convert("RGB"))
    except OSError:
        raise
    except Exception as exc:  # Pillow raises assorted types on corrupt files
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return preprocess(arr, size=size)


# ---------------------------------------------------------------------------
# patch pipeline


def scales_for(side: int, patch_size: int = PATCH_SIZE) -> tuple[int, ...]:
    """Halving pyramid below `side`, keeping scales at least twice the patch."""
    return tuple(side >> k for k in range(4) if (side >> k) >= 2 * patch_size)


def choose_scale(rng: np.random.Generator, scales: Sequence[int]) -> int:
    """Pick one side uniformly from the scale set."""
    return int(scales[rng.integers(len(scales))])


def random_rescale(img: np.ndarray, rng: np.random.Generator,
                   scales: Sequence[int] | None = None) -> np.ndarray:
    """Downscale to one of the allowed sides, chosen uniformly.

    For 1024 inputs the scale set is (1024, 512, 256, 128); choosing the
    native side returns the image unchanged.
    """
    side = img.shape[0]
    if img.shape[0] != img.shape[1]:
        raise ShapeError(f"random_rescale: image must be square, got {img.shape}")
    if scales is None:
        scales = scales_for(side)
    if not scales or scales[0] != side:
        raise ShapeError(f"random_rescale: side {side} not the largest of {scales}")
    chosen = choose_scale(rng, scales)
    if chosen == side:
        return img
    return resize_bilinear(img, chosen, chosen)


def sample_patches(img: np.ndarray, rng: np.random.Generator,
                   count: int | None = None, patch_size: int = PATCH_SIZE) -> np.ndarray:
    """Uniform random fully-in-bounds square patches: (count, patch, patch).

    Count defaults to 16 for sides >= 512 and 8 below, matching the
    multi-scale sampling scheme; patches may overlap.
    """
    h, w = img.shape
    if h < patch_size or w < patch_size:
        raise ShapeError(f"sample_patches: image {h}x{w} smaller than patch {patch_size}")
    if count is None:
        count = 16 if min(h, w) >= 512 else 8
    ys = rng.integers(0, h - patch_size + 1, size=count)
    xs = rng.integers(0, w - patch_size + 1, size=count)
    out = np.empty((count, patch_size, patch_size), dtype=np.float32)
    for i, (y, x) in enumerate(zip(ys, xs)):
        out[i] = img[y:y + patch_size, x:x + patch_size]
    return out


def random_erase(patch: np.ndarray, rng: np.random.Generator,
                 area_range: tuple[float, float] = ERASE_AREA_RANGE,
                 aspect_range: tuple[float, float] = ERASE_ASPECT_RANGE) -> np.ndarray:
    """Overwrite one random rectangle with uniform noise in [0, 1].

    The rectangle's area ratio is uniform in `area_range`, its aspect ratio
    log-uniform in `aspect_range`; draws are retried until the integer
    rectangle both fits the patch and keeps its pixel count inside the
    configured area bounds, so the erased count is always within
    [ceil(lo * A), floor(hi * A)] for patch area A.
    """
    h, w = patch.shape
    area = h * w
    lo = math.ceil(area_range[0] * area)
    hi = math.floor(area_range[1] * area)
    log_lo, log_hi = math.log(aspect_range[0]), math.log(aspect_range[1])
    he = we = 0
    for _ in range(100):
        target = rng.uniform(*area_range) * area
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cand_h = int(round(math.sqrt(target / aspect)))
        cand_w = int(round(math.sqrt(target * aspect)))
        if 1 <= cand_h <= h and 1 <= cand_w <= w and lo <= cand_h * cand_w <= hi:
            he, we = cand_h, cand_w
            break
    else:
        he = we = int(round(math.sqrt(0.1 * area)))  # mid-range fallback
    y0 = int(rng.integers(0, h - he + 1))
    x0 = int(rng.integers(0, w - we + 1))
    out = patch.copy()
    out[y0:y0 + he, x0:x0 + we] = rng.uniform(0.0, 1.0, size=(he, we)).astype(patch.dtype)
    return out


def build_patch_pools(images_by_class: dict[str, Sequence[np.ndarray]],
                      stream: RngStream,
                      patch_size: int = PATCH_SIZE) -> dict[str, np.ndarray]:
    """One multi-scale sampling pass over every image, grouped per class.

    Each image is randomly rescaled once and contributes its scale's patch
    count; the per-class pools are stacked (n, patch, patch) arrays.
    """
    resize_rng = stream.substream("resize")
    patch_rng = stream.substream("patch")
    pools: dict[str, np.ndarray] = {}
    for cls in sorted(images_by_class):
        chunks = []
        for img in images_by_class[cls]:
            scaled = random_rescale(img, resize_rng,
                                    scales=scales_for(img.shape[0], patch_size))
            chunks.append(sample_patches(scaled, patch_rng, patch_size=patch_size))
        if chunks:
            pools[cls] = np.concatenate(chunks, axis=0)
    return pools


# ---------------------------------------------------------------------------
# triplet batches


@dataclass
class TripletBatch:
    anchors: np.ndarray    # (n, patch, patch, 1) float32 in [0, 1]
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        if not (len(self.anchors) == len(self.positives) == len(self.negatives)):
            raise ShapeError("triplet arrays must have equal length")

    def __len__(self) -> int:
        return len(self.anchors)


def build_triplet_batch(index: "DatasetIndex", stream: RngStream, size: int = 256,
                        image_size: int = 1024, patch_size: int = PATCH_SIZE,
                        image_cache: dict | None = None) -> TripletBatch:
    """Assemble one batch of (anchor, positive, negative) patch triplets.

    Per triplet: a known class is chosen uniformly, anchor and positive come
    from that class's patch pool (possibly different images), and the
    negative is a random-erased fresh patch of the same class. Only
    non-defective training images feed the pools.
    """
    classes = sorted(name for name, entry in index.classes.items()
                     if entry.role == "known" and entry.train_images)
    if not classes:
        raise ConfigError("build_triplet_batch: no known class with training images")

    def load(path) -> np.ndarray:
        if image_cache is None:
            return load_and_preprocess(path, size=image_size)
        key = (str(path), image_size)
        if key not in image_cache:
            image_cache[key] = load_and_preprocess(path, size=image_size)
        return image_cache[key]

    images = {cls: [load(p) for p in index.classes[cls].train_images]
              for cls in classes}
    pools = build_patch_pools(images, stream, patch_size=patch_size)
    triplet_rng = stream.substream("triplet")
    erase_rng = stream.substream("erase")

    a = np.empty((size, patch_size, patch_size, 1), dtype=np.float32)
    p = np.empty_like(a)
    n = np.empty_like(a)
    for i in range(size):
        pool = pools[classes[triplet_rng.integers(len(classes))]]
        a[i, ..., 0] = pool[triplet_rng.integers(len(pool))]
        p[i, ..., 0] = pool[triplet_rng.integers(len(pool))]
        fresh = pool[triplet_rng.integers(len(pool))]
        n[i, ..., 0] = random_erase(fresh, erase_rng)
    return TripletBatch(anchors=a, positives=p, negatives=n)


# ---------------------------------------------------------------------------
# dataset indexing


@dataclass
class ClassEntry:
    name: str
    role: str                      # "known" or "novel"
    train_images: list[Path]       # feed CNN training (empty for novel classes)
    reserved_images: list[Path]    # held-out good images: prototypes + eval
    test_good: list[Path]
    test_defective: dict[str, list[Path]] = field(default_factory=dict)


@dataclass
class DatasetIndex:
    root: Path
    classes: dict[str, ClassEntry]

    def known_classes(self) -> list[str]:
        return sorted(c for c, e in self.classes.items() if e.role == "known")

    def novel_classes(self) -> list[str]:
        return sorted(c for c, e in self.classes.items() if e.role == "novel")


def _pngs(directory: Path) -> list[Path]:
    return sorted(directory.glob("*.png"))


def index_dataset(root, known_classes: Sequence[str] | None = None,
                  seed: int = 0) -> DatasetIndex:
    """Index a dataset laid out as <root>/<class>/{train/good,test/<label>}.

    Known classes contribute training images; their good images are split in
    half (deterministically under the seed) between CNN training and a
    reserved evaluation set. Novel classes keep all good images reserved and
    never train. Without an explicit known-class list, an 11-of-15-shaped
    pseudo-random partition is drawn from the seed.
    """
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"dataset root not found: {root}")
    names = sorted(d.name for d in root.iterdir()
                   if d.is_dir() and not d.name.startswith("."))
    if not names:
        raise LayoutError(f"no class directories under {root}")

    stream = RngStream(seed)
    if known_classes is None:
        n_known = max(1, round(len(names) * 11 / 15))
        order = stream.substream("shuffle").permutation(len(names))
        known = {names[i] for i in order[:n_known]}
    else:
        unknown = set(known_classes) - set(names)
        if unknown:
            raise ConfigError(f"known classes not in dataset: {sorted(unknown)}")
        known = set(known_classes)

    split_rng = stream.substream("split")
    classes: dict[str, ClassEntry] = {}
    for name in names:
        train_good_dir = root / name / "train" / "good"
        test_dir = root / name / "test"
        if not train_good_dir.is_dir():
            raise LayoutError(f"missing directory: {train_good_dir}")
        if not test_dir.is_dir():
            raise LayoutError(f"missing directory: {test_dir}")
        good = _pngs(train_good_dir)
        test_good = _pngs(test_dir / "good") if (test_dir / "good").is_dir() else []
        defective = {d.name: _pngs(d) for d in sorted(test_dir.iterdir())
                     if d.is_dir() and d.name != "good"}
        defective = {k: v for k, v in defective.items() if v}
        if name in known:
            order = split_rng.permutation(len(good))
            n_train = (len(good) + 1) // 2
            train_imgs = sorted(good[i] for i in order[:n_train])
            reserved = sorted(good[i] for i in order[n_train:])
            role = "known"
        else:
            train_imgs = []
            reserved = good
            role = "novel"
        classes[name] = ClassEntry(name=name, role=role, train_images=train_imgs,
                                   reserved_images=reserved, test_good=test_good,
                                   test_defective=defective)
    return DatasetIndex(root=root, classes=classes)
