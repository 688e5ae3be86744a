"""Synthetic shape scenes, labeled/unlabeled splits and the weak/strong
augmentation policy.

Images are ``H x W x 3`` float32 arrays in ``[0, 1]``, quantized to multiples
of 1/255 so that PNG export is lossless.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .geometry import BBox

CLASS_NAMES = ("circle", "square", "triangle")


class HiddenLabelsError(RuntimeError):
    """Raised when training code reads the ground truth of an unlabeled scene."""


@dataclass
class DataConfig:
    image_size: int = 64
    num_classes: int = 3
    max_objects: int = 3
    min_object_size: int = 12
    max_object_size: int = 26
    noise_std: float = 0.06
    n_scenes: int = 1000
    n_eval: int = 200
    labeled_fraction: float = 0.10
    seed: int = 0

    def validate(self):
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [2, {len(CLASS_NAMES)}]")
        if self.max_objects < 1:
            raise ValueError("max_objects must be >= 1")
        if not 0 < self.min_object_size <= self.max_object_size < self.image_size:
            raise ValueError("object size range is invalid")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in (0, 1]")


@dataclass
class Scene:
    image: np.ndarray
    _objects: list[tuple[BBox, int]] = field(repr=False)
    seed: int
    scene_id: int = 0
    labeled: bool = True

    @property
    def objects(self) -> list[tuple[BBox, int]]:
        if not self.labeled:
            raise HiddenLabelsError(f"scene {self.scene_id} is unlabeled")
        return self._objects

    def reveal(self) -> list[tuple[BBox, int]]:
        """Hidden ground truth, for analysis code only."""
        return self._objects

    def hide(self) -> "Scene":
        return replace(self, labeled=False)

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


@dataclass
class DatasetSplit:
    labeled: list[Scene]
    unlabeled: list[Scene]
    labeled_fraction: float


def _shape_mask(kind: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == 0:  # circle
        r = size / 2
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if kind == 1:  # square
        return np.ones((size, size), dtype=bool)
    # upright isosceles triangle: apex top-center, base along the bottom row
    half = size / 2
    return np.abs(xx - half) <= half * yy / size


def generate_scene(seed: int, config: DataConfig, scene_id: int = 0) -> Scene:
    config.validate()
    rng = np.random.default_rng(seed)
    s = config.image_size
    base = rng.uniform(0.1, 0.5, size=3)
    image = base[None, None, :] + rng.normal(0.0, config.noise_std, size=(s, s, 3))

    n_target = int(rng.integers(1, config.max_objects + 1))
    objects: list[tuple[BBox, int]] = []
    occupied = np.zeros((s, s), dtype=bool)
    for _ in range(n_target):
        cls = int(rng.integers(config.num_classes))
        size = int(rng.integers(config.min_object_size, config.max_object_size + 1))
        color = rng.uniform(0.0, 1.0, size=3)
        # boost contrast against the background
        color = np.where(np.abs(color - base) < 0.25, 1.0 - color, color)
        placed = False
        for _attempt in range(20):
            x0 = int(rng.integers(0, s - size + 1))
            y0 = int(rng.integers(0, s - size + 1))
            # one pixel of margin so tight boxes never touch
            y_lo, x_lo = max(y0 - 1, 0), max(x0 - 1, 0)
            if not occupied[y_lo:y0 + size + 1, x_lo:x0 + size + 1].any():
                placed = True
                break
        if not placed:
            continue
        mask = _shape_mask(cls, size)
        region = image[y0:y0 + size, x0:x0 + size]
        region[mask] = color + rng.normal(0.0, config.noise_std / 2, size=(int(mask.sum()), 3))
        occupied[y0:y0 + size, x0:x0 + size] = True
        ys, xs = np.nonzero(mask)
        box = BBox(float(x0 + xs.min()), float(y0 + ys.min()),
                   float(x0 + xs.max() + 1), float(y0 + ys.max() + 1))
        objects.append((box, cls))

    if not objects:  # the first placement on an empty canvas cannot fail
        raise AssertionError("scene generation produced no objects")
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return Scene(image.astype(np.float32), objects, seed, scene_id, True)


def _scene_seeds(base_seed: int, count: int, stream: int) -> list[int]:
    ss = np.random.SeedSequence([base_seed, stream])
    return [int(x) for x in ss.generate_state(count, dtype=np.uint32)]


def make_splits(config: DataConfig) -> DatasetSplit:
    config.validate()
    n = config.n_scenes
    n_labeled = int(round(n * config.labeled_fraction))
    if n_labeled < 1:
        raise ValueError("labeled split would be empty")
    seeds = _scene_seeds(config.seed, n, stream=0)
    scenes = [generate_scene(sd, config, scene_id=i) for i, sd in enumerate(seeds)]
    order = np.random.default_rng([config.seed, 1]).permutation(n)
    labeled = [scenes[i] for i in sorted(order[:n_labeled])]
    unlabeled = [scenes[i].hide() for i in sorted(order[n_labeled:])]
    return DatasetSplit(labeled, unlabeled, config.labeled_fraction)


def make_eval_set(config: DataConfig) -> list[Scene]:
    """Held-out labeled scenes, disjoint from :func:`make_splits` by id."""
    seeds = _scene_seeds(config.seed, config.n_eval, stream=2)
    return [generate_scene(sd, config, scene_id=config.n_scenes + i) for i, sd in enumerate(seeds)]


# ---------------------------------------------------------------------------
# augmentation


def weak_augment(scene: Scene, rng: np.random.Generator, p_flip: float = 0.5) -> Scene:
    """Random horizontal flip; boxes (hidden or not) follow the image."""
    if rng.random() >= p_flip:
        return scene
    w = scene.width
    objects = [(b.flip_horizontal(w), c) for b, c in scene._objects]
    return replace(scene, image=np.ascontiguousarray(scene.image[:, ::-1]), _objects=objects)


@dataclass
class StrongAugConfig:
    p_jitter: float = 0.8
    p_grayscale: float = 0.2
    p_blur: float = 0.5
    p_cutout: float = 0.5
    jitter_strength: float = 0.4
    blur_sigma: tuple[float, float] = (0.1, 1.5)
    cutout_scale: tuple[float, float] = (0.05, 0.2)


def strong_augment(
    image: np.ndarray,
    rng: np.random.Generator,
    config: Optional[StrongAugConfig] = None,
) -> np.ndarray:
    """Photometric augmentation: color jitter, grayscale, blur, cutout.

    Geometry is untouched, so boxes valid for ``image`` stay valid.
    """
    cfg = config or StrongAugConfig()
    out = image.astype(np.float32, copy=True)
    if rng.random() < cfg.p_jitter:
        k = cfg.jitter_strength
        brightness = rng.uniform(1 - k, 1 + k)
        contrast = rng.uniform(1 - k, 1 + k)
        channel_gain = rng.uniform(1 - k / 2, 1 + k / 2, size=3)
        mean = out.mean()
        out = ((out - mean) * contrast + mean) * brightness * channel_gain[None, None, :]
        out = np.clip(out, 0.0, 1.0)
    if rng.random() < cfg.p_grayscale:
        gray = out @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        out = np.repeat(gray[:, :, None], 3, axis=2)
    if rng.random() < cfg.p_blur:
        sigma = rng.uniform(*cfg.blur_sigma)
        out = gaussian_filter(out, sigma=(sigma, sigma, 0), mode="nearest")
    if rng.random() < cfg.p_cutout:
        h, w = out.shape[:2]
        area = rng.uniform(*cfg.cutout_scale) * h * w
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        ch = min(h, max(1, int(round(math.sqrt(area * aspect)))))
        cw = min(w, max(1, int(round(math.sqrt(area / aspect)))))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        out[y0:y0 + ch, x0:x0 + cw] = np.float32(rng.uniform(0.0, 1.0))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# export / import
#
# <dir>/images/<scene_id>.png plus <dir>/annotations.jsonl, one JSON object per
# scene with keys in this order: scene_id, seed, labeled, boxes, classes.


def export_scenes(scenes: list[Scene], directory: str | Path):
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with open(directory / "annotations.jsonl", "w", encoding="utf-8") as fh:
        for sc in scenes:
            pixels = np.round(sc.image * 255.0).astype(np.uint8)
            Image.fromarray(pixels, mode="RGB").save(directory / "images" / f"{sc.scene_id:06d}.png")
            record = {
                "scene_id": sc.scene_id,
                "seed": sc.seed,
                "labeled": sc.labeled,
                "boxes": [list(b.as_tuple()) for b, _ in sc._objects],
                "classes": [c for _, c in sc._objects],
            }
            fh.write(json.dumps(record) + "\n")


def import_scenes(directory: str | Path) -> list[Scene]:
    directory = Path(directory)
    scenes = []
    with open(directory / "annotations.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            pixels = np.asarray(Image.open(directory / "images" / f"{rec['scene_id']:06d}.png").convert("RGB"))
            image = (pixels.astype(np.float64) / 255.0).astype(np.float32)
            objects = [(BBox(*b), int(c)) for b, c in zip(rec["boxes"], rec["classes"])]
            scenes.append(Scene(image, objects, rec["seed"], rec["scene_id"], rec["labeled"]))
    return scenes
