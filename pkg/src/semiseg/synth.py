"""Seeded synthetic scenes of colored shapes with per-instance masks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .embeddings import CategoryVocabulary
from .errors import ConfigError

SHAPES = ("circle", "square", "triangle", "bar")

BASE_COLORS = {
    "circle": (0.90, 0.20, 0.20),
    "square": (0.20, 0.85, 0.25),
    "triangle": (0.25, 0.35, 0.95),
    "bar": (0.95, 0.85, 0.20),
}

MAX_RETRIES = 10


@dataclass
class InstanceAnnotation:
    class_id: int
    mask: np.ndarray  # bool, H x W

    @property
    def bbox(self) -> tuple:
        """(row_min, col_min, row_max, col_max), inclusive."""
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class ImageSample:
    id: str
    image: np.ndarray  # float32, 3 x H x W, values in [0, 1]
    instances: list = field(default_factory=list)

    @property
    def hw(self) -> tuple:
        return self.image.shape[1:]

    def masks(self) -> np.ndarray:
        H, W = self.hw
        if not self.instances:
            return np.zeros((0, H, W), dtype=bool)
        return np.stack([inst.mask for inst in self.instances])

    def class_ids(self) -> np.ndarray:
        return np.array([inst.class_id for inst in self.instances], dtype=np.int64)


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    shapes: tuple = SHAPES
    min_instances: int = 1
    max_instances: int = 3
    min_size: int = 5
    max_size: int = 12
    color_jitter: float = 0.1
    allow_overlap: bool = True

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        if not self.shapes:
            raise ConfigError("scene needs at least one shape class", key="data.shapes")
        unknown = [s for s in self.shapes if s not in SHAPES]
        if unknown:
            raise ConfigError(f"unknown shape class {unknown[0]!r}", key="data.shapes")
        if len(set(self.shapes)) != len(self.shapes):
            raise ConfigError("duplicate shape class", key="data.shapes")
        if not 1 <= self.min_instances <= self.max_instances <= 8:
            raise ConfigError("instance count range must lie within [1, 8]", key="data.max_instances")
        if not 1 <= self.min_size <= self.max_size:
            raise ConfigError("size range must satisfy 1 <= min_size <= max_size", key="data.min_size")
        if 2 * self.max_size + 1 > min(self.height, self.width):
            raise ConfigError("shapes cannot exceed the image", key="data.max_size")
        if not 0 <= self.color_jitter <= 0.5:
            raise ConfigError("color_jitter must be in [0, 0.5]", key="data.color_jitter")

    @property
    def vocab(self) -> CategoryVocabulary:
        return CategoryVocabulary.from_categories(self.shapes)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float32) / np.float32(255.0)


def _shape_mask(kind: str, H: int, W: int, cy: int, cx: int, s: int, vertical: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= s * s
    if kind == "square":
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if kind == "triangle":
        # apex up, base width 2s at the bottom row
        t = dy + s
        return (t >= 0) & (t <= 2 * s) & (2 * np.abs(dx) <= t)
    if kind == "bar":
        thick = max(1, s // 3)
        if vertical:
            return (np.abs(dy) <= s) & (np.abs(dx) <= thick)
        return (np.abs(dy) <= thick) & (np.abs(dx) <= s)
    raise ConfigError(f"unknown shape {kind!r}")


def generate_scene(spec: SceneSpec, seed, sample_id: str = "img") -> ImageSample:
    """Render one scene; later shapes occlude earlier ones."""
    rng = np.random.default_rng(seed)
    H, W = spec.height, spec.width
    background = rng.uniform(0.05, 0.35, size=3)
    image = np.empty((3, H, W), dtype=np.float64)
    image[:] = background[:, None, None]
    count = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    placed: list = []  # [class_id, mask]
    occupied = np.zeros((H, W), dtype=bool)
    for _ in range(count):
        for _attempt in range(MAX_RETRIES):
            cls_index = int(rng.integers(len(spec.shapes)))
            kind = spec.shapes[cls_index]
            s = int(rng.integers(spec.min_size, spec.max_size + 1))
            cy = int(rng.integers(s, H - s))
            cx = int(rng.integers(s, W - s))
            vertical = bool(rng.integers(2))
            jitter = rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
            mask = _shape_mask(kind, H, W, cy, cx, s, vertical)
            if not mask.any():
                continue
            if not spec.allow_overlap and (mask & occupied).any():
                continue
            break
        else:
            continue
        color = np.clip(np.array(BASE_COLORS[kind]) + jitter, 0.0, 1.0)
        image[:, mask] = color[:, None]
        for entry in placed:
            entry[1] &= ~mask
        occupied |= mask
        placed.append([cls_index + 1, mask])
    image += rng.normal(0.0, 0.02, size=image.shape)
    instances = [InstanceAnnotation(c, m) for c, m in placed if m.any()]
    return ImageSample(sample_id, dequantize(quantize(image)), instances)


def generate_dataset(spec: SceneSpec, count: int, seed: int, prefix: str = "img", stream: int = 0) -> list:
    """``count`` scenes; scene ``i`` depends only on ``(spec, seed, stream, i)``."""
    return [generate_scene(spec, (seed, stream, i), f"{prefix}{i:05d}") for i in range(count)]


@dataclass
class DatasetSplit:
    labeled_ids: list
    unlabeled_ids: list
    fraction: float

    def is_labeled(self, sample_id: str) -> bool:
        return sample_id in set(self.labeled_ids)


def labeled_count(pool_size: int, fraction: float) -> int:
    return max(1, min(pool_size, int(math.floor(fraction * pool_size + 0.5))))


def split_dataset(ids, fraction: float, seed: int) -> DatasetSplit:
    """Seeded uniform labeled subset of ``ids``; the rest is unlabeled. Pool order is kept."""
    ids = list(ids)
    if not 0 < fraction <= 1:
        raise ConfigError(f"labeled fraction must be in (0, 1], got {fraction}", key="data.fraction")
    if not ids:
        raise ConfigError("cannot split an empty pool", key="data.train_count")
    k = labeled_count(len(ids), fraction)
    chosen = set(np.random.default_rng(seed).choice(len(ids), size=k, replace=False).tolist())
    labeled = [x for i, x in enumerate(ids) if i in chosen]
    unlabeled = [x for i, x in enumerate(ids) if i not in chosen]
    return DatasetSplit(labeled, unlabeled, fraction)
