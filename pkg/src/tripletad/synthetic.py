"""Procedural texture dataset generator for desk-scale experiments.

Emits the same on-disk layout the indexer expects (train/good, test/good,
test/<defect>) plus ground_truth/<defect>/*_mask.png binary masks marking
exactly the pixels a defect changed. Textures come in three families
(sinusoidal gratings, smoothed grain, warped checkers); injected defects are
contamination blobs, scratch strokes, and crack polylines. Everything is
drawn from named substreams of one seed, so reruns are byte-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError
from .rng import RngStream

DEFECT_TYPES = ("blob", "scratch", "crack")


@dataclass
class DefectSpec:
    types: tuple[str, ...] = DEFECT_TYPES
    area_range: tuple[float, float] = (0.012, 0.04)  # fraction of image pixels
    images_per_type: int = 8


# ---------------------------------------------------------------------------
# texture families


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size, dtype=np.float32)
    return np.meshgrid(c, c, indexing="ij")


def _grating_params(rng: np.random.Generator) -> dict:
    return {
        "period1": float(rng.uniform(9.0, 26.0)),
        "period2": float(rng.uniform(9.0, 26.0)),
        "theta1": float(rng.uniform(0.0, math.pi)),
        "theta2": float(rng.uniform(0.0, math.pi)),
        "phase1": float(rng.uniform(0.0, 2 * math.pi)),
        "phase2": float(rng.uniform(0.0, 2 * math.pi)),
    }


def _grating(size: int, params: dict, rng: np.random.Generator) -> np.ndarray:
    y, x = _grid(size)
    img = np.full((size, size), 0.5, dtype=np.float32)
    for k in ("1", "2"):
        theta = params[f"theta{k}"]
        period = params[f"period{k}"]
        phase = params[f"phase{k}"] + rng.uniform(-0.15, 0.15)
        wave = np.sin(2 * math.pi * (x * math.cos(theta) + y * math.sin(theta))
                      / period + phase)
        img += (0.21 if k == "1" else 0.17) * wave.astype(np.float32)
    img += rng.normal(0.0, 0.015, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _grain_params(rng: np.random.Generator, size: int) -> dict:
    base = ndimage.gaussian_filter(rng.normal(size=(size, size)),
                                   sigma=float(rng.uniform(2.0, 4.0)))
    base = (base - base.min()) / (base.max() - base.min())
    return {"base": (0.15 + 0.7 * base).astype(np.float32)}


def _grain(size: int, params: dict, rng: np.random.Generator) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=1.5)
    img = params["base"] + 0.06 * noise.astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _checker_params(rng: np.random.Generator) -> dict:
    return {
        "cell": float(rng.uniform(12.0, 26.0)),
        "warp_amp": float(rng.uniform(2.0, 5.0)),
        "warp_period": float(rng.uniform(60.0, 140.0)),
        "warp_phase": float(rng.uniform(0.0, 2 * math.pi)),
    }


def _checker(size: int, params: dict, rng: np.random.Generator) -> np.ndarray:
    y, x = _grid(size)
    xw = x + params["warp_amp"] * np.sin(
        2 * math.pi * y / params["warp_period"] + params["warp_phase"])
    yw = y + params["warp_amp"] * np.cos(
        2 * math.pi * x / params["warp_period"] + params["warp_phase"])
    pattern = np.sin(2 * math.pi * xw / params["cell"]) \
        * np.sin(2 * math.pi * yw / params["cell"])
    img = np.where(pattern > 0, 0.72, 0.33).astype(np.float32)
    img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


_FAMILIES = (
    ("grating", _grating_params, _grating),
    ("grain", _grain_params, _grain),
    ("checker", _checker_params, _checker),
)


# ---------------------------------------------------------------------------
# defect shapes


def _blob_mask(size: int, area: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    frac = rng.uniform(*area)
    aspect = rng.uniform(0.6, 1.7)
    r_base = math.sqrt(frac * size * size / math.pi)
    ry, rx = r_base * aspect, r_base / aspect
    cy = rng.uniform(ry + 2, size - ry - 2)
    cx = rng.uniform(rx + 2, size - rx - 2)
    theta = rng.uniform(0, math.pi)
    y, x = _grid(size)
    yc, xc = y - cy, x - cx
    u = xc * math.cos(theta) + yc * math.sin(theta)
    v = -xc * math.sin(theta) + yc * math.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _segment_mask(size: int, p0, p1, width: float) -> np.ndarray:
    y, x = _grid(size)
    dy, dx = p1[0] - p0[0], p1[1] - p0[1]
    length2 = dy * dy + dx * dx
    t = ((y - p0[0]) * dy + (x - p0[1]) * dx) / max(length2, 1e-9)
    t = np.clip(t, 0.0, 1.0)
    dist2 = (y - (p0[0] + t * dy)) ** 2 + (x - (p0[1] + t * dx)) ** 2
    return dist2 <= (width / 2.0) ** 2


def _scratch_mask(size: int, area: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    frac = rng.uniform(*area)
    length = rng.uniform(0.5, 0.9) * size
    theta = rng.uniform(0, math.pi)
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    p0 = (cy - 0.5 * length * math.sin(theta), cx - 0.5 * length * math.cos(theta))
    p1 = (cy + 0.5 * length * math.sin(theta), cx + 0.5 * length * math.cos(theta))
    width = max(2.0, frac * size * size / max(length, 1.0))
    return _segment_mask(size, p0, p1, width)


def _crack_mask(size: int, area: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    n_seg = int(rng.integers(5, 9))
    pos = np.array([rng.uniform(0.25, 0.75) * size, rng.uniform(0.25, 0.75) * size])
    heading = rng.uniform(0, 2 * math.pi)
    width = rng.uniform(2.5, 4.0)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n_seg):
        heading += rng.uniform(-0.9, 0.9)
        step = rng.uniform(0.08, 0.16) * size
        nxt = pos + step * np.array([math.sin(heading), math.cos(heading)])
        nxt = np.clip(nxt, 2, size - 3)
        mask |= _segment_mask(size, tuple(pos), tuple(nxt), width)
        pos = nxt
    return mask


_DEFECT_MASKS = {"blob": _blob_mask, "scratch": _scratch_mask, "crack": _crack_mask}


def apply_defect(img: np.ndarray, defect_type: str, rng: np.random.Generator,
                 area_range: tuple[float, float] = (0.012, 0.04)):
    """Inject one defect; returns (defective uint8-ready image, boolean mask).

    The mask is recomputed as the set of pixels that actually changed after
    8-bit quantization, so "clean outside, different inside" holds exactly.
    """
    size = img.shape[0]
    mask = _DEFECT_MASKS[defect_type](size, area_range, rng)
    min_px = math.ceil(area_range[0] * size * size)
    while mask.sum() < min_px:
        mask = ndimage.binary_dilation(mask, iterations=2)
    local_mean = float(img[mask].mean()) if mask.any() else 0.5
    base = 0.06 if local_mean > 0.5 else 0.94
    noise = rng.uniform(-0.05, 0.05, size=int(mask.sum())).astype(np.float32)
    out = img.copy()
    out[mask] = np.clip(base + noise, 0.0, 1.0)
    clean_q = _quantize(img)
    defect_q = _quantize(out)
    changed = clean_q != defect_q
    defect_q = np.where(changed, defect_q, clean_q)
    return defect_q, changed


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _save_gray(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


# ---------------------------------------------------------------------------
# dataset assembly


def generate_synthetic_dataset(out_dir, seed: int = 0, n_classes: int = 2,
                               images_per_class: int = 32, image_size: int = 256,
                               n_test_good: int = 8,
                               defect_spec: DefectSpec | None = None,
                               force: bool = False) -> Path:
    """Write a complete synthetic dataset tree under `out_dir`.

    Each class gets `images_per_class` clean training images, `n_test_good`
    clean test images, and `defect_spec.images_per_type` defective test
    images per defect type with matching ground-truth masks.
    """
    spec = defect_spec or DefectSpec()
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()) and not force:
        raise ConfigError(f"output directory {root} is not empty (use force)")
    root.mkdir(parents=True, exist_ok=True)

    stream = RngStream(seed)
    for ci in range(n_classes):
        family, make_params, make_image = _FAMILIES[ci % len(_FAMILIES)]
        cls = f"{family}{ci:02d}"
        params_rng = stream.substream(f"{cls}/params")
        params = make_params(params_rng, image_size) if family == "grain" \
            else make_params(params_rng)

        for i in range(images_per_class):
            rng = stream.substream(f"{cls}/train/{i}")
            _save_gray(_quantize(make_image(image_size, params, rng)),
                       root / cls / "train" / "good" / f"{i:03d}.png")
        for i in range(n_test_good):
            rng = stream.substream(f"{cls}/test-good/{i}")
            _save_gray(_quantize(make_image(image_size, params, rng)),
                       root / cls / "test" / "good" / f"{i:03d}.png")
        for defect in spec.types:
            for i in range(spec.images_per_type):
                rng = stream.substream(f"{cls}/test-{defect}/{i}")
                clean = make_image(image_size, params, rng)
                defective, mask = apply_defect(clean, defect, rng,
                                               area_range=spec.area_range)
                _save_gray(defective,
                           root / cls / "test" / defect / f"{i:03d}.png")
                _save_gray(mask.astype(np.uint8) * 255,
                           root / cls / "ground_truth" / defect / f"{i:03d}_mask.png")
    return root
