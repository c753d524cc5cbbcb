"""Weak (geometric) and strong (photometric) augmentation with replayable records."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .synth import ImageSample, InstanceAnnotation

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class AugConfig:
    scale_range: tuple = (0.75, 1.25)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.5, 1.5)
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.10)
    erase_aspect: tuple = (0.3, 3.3)
    fill: tuple = (0.5, 0.5, 0.5)


@dataclass
class AugRecord:
    kind: str  # "weak" | "strong"
    flip: bool = False
    scale: float = 1.0
    jitter: tuple | None = None  # (brightness, contrast, saturation) factors
    grayscale: bool = False
    blur_sigma: float | None = None
    erase: tuple | None = None  # (row, col, h, w)


def dataset_mean(samples) -> tuple:
    """Per-channel mean pixel value over ``samples``."""
    if not samples:
        return (0.5, 0.5, 0.5)
    total = np.zeros(3, dtype=np.float64)
    for s in samples:
        total += s.image.reshape(3, -1).mean(axis=1)
    return tuple(float(v) for v in total / len(samples))


# -- geometry ---------------------------------------------------------------

def _scaled_size(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def _bilinear(image: np.ndarray, nh: int, nw: int) -> np.ndarray:
    _, H, W = image.shape

    def axis(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(np.float32)

    y0, y1, wy = axis(nh, H)
    x0, x1, wx = axis(nw, W)
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy)[:, None] + bot * wy[:, None]).astype(np.float32)


def _nearest(mask: np.ndarray, nh: int, nw: int) -> np.ndarray:
    H, W = mask.shape
    ys = np.minimum(np.floor((np.arange(nh) + 0.5) * (H / nh)).astype(np.int64), H - 1)
    xs = np.minimum(np.floor((np.arange(nw) + 0.5) * (W / nw)).astype(np.int64), W - 1)
    return mask[ys][:, xs]


def _fit(arr: np.ndarray, H: int, W: int) -> np.ndarray:
    """Center-crop or zero-pad the last two axes to ``H x W``."""
    h, w = arr.shape[-2:]
    out = np.zeros(arr.shape[:-2] + (H, W), dtype=arr.dtype)
    sy, dy = ((h - H) // 2, 0) if h >= H else (0, (H - h) // 2)
    sx, dx = ((w - W) // 2, 0) if w >= W else (0, (W - w) // 2)
    ch, cw = min(h, H), min(w, W)
    out[..., dy:dy + ch, dx:dx + cw] = arr[..., sy:sy + ch, sx:sx + cw]
    return out


def apply_geometry_image(image: np.ndarray, record: AugRecord) -> np.ndarray:
    _, H, W = image.shape
    out = image
    if record.scale != 1.0:
        out = _fit(_bilinear(image, _scaled_size(H, record.scale), _scaled_size(W, record.scale)), H, W)
    if record.flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out, dtype=np.float32)


def apply_geometry_mask(mask: np.ndarray, record: AugRecord) -> np.ndarray:
    H, W = mask.shape
    out = mask
    if record.scale != 1.0:
        out = _fit(_nearest(mask, _scaled_size(H, record.scale), _scaled_size(W, record.scale)), H, W)
    if record.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out, dtype=bool)


def replay_weak(instances, record: AugRecord) -> list:
    """Apply a recorded weak transform to annotations, dropping ones that leave the frame."""
    out = []
    for inst in instances:
        m = apply_geometry_mask(inst.mask, record)
        if m.any():
            out.append(InstanceAnnotation(inst.class_id, m))
    return out


def weak_aug(sample: ImageSample, rng: np.random.Generator, cfg: AugConfig | None = None):
    cfg = cfg or AugConfig()
    lo, hi = cfg.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    flip = bool(rng.random() < cfg.flip_prob)
    record = AugRecord("weak", flip=flip, scale=scale)
    image = apply_geometry_image(sample.image, record)
    return ImageSample(sample.id, image, replay_weak(sample.instances, record)), record


# -- photometric ------------------------------------------------------------

def _gray(image: np.ndarray) -> np.ndarray:
    return np.tensordot(GRAY_WEIGHTS, image, axes=1)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    x = np.arange(-2, 3, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 5x5 Gaussian blur with reflect padding."""
    k = _gaussian_kernel(sigma)
    _, H, W = image.shape
    padded = np.pad(image, ((0, 0), (2, 2), (2, 2)), mode="reflect")
    rows = sum(k[i] * padded[:, i:i + H, :] for i in range(5))
    return sum(k[j] * rows[:, :, j:j + W] for j in range(5)).astype(np.float32)


def _erase_rect(rng, H: int, W: int, cfg: AugConfig) -> tuple:
    area = rng.uniform(*cfg.erase_area) * H * W
    log_lo, log_hi = math.log(cfg.erase_aspect[0]), math.log(cfg.erase_aspect[1])
    aspect = math.exp(rng.uniform(log_lo, log_hi))
    h = int(min(H, max(1, round(math.sqrt(area * aspect)))))
    w = int(min(W, max(1, round(math.sqrt(area / aspect)))))
    row = int(rng.integers(0, H - h + 1))
    col = int(rng.integers(0, W - w + 1))
    return row, col, h, w


def strong_aug(sample: ImageSample, rng: np.random.Generator, cfg: AugConfig | None = None):
    """Photometric transforms only; the returned sample shares the input's annotations."""
    cfg = cfg or AugConfig()
    image = sample.image.astype(np.float32, copy=True)
    _, H, W = image.shape
    record = AugRecord("strong")
    if rng.random() < cfg.jitter_prob:
        b = float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness))
        c = float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast))
        s = float(rng.uniform(1 - cfg.saturation, 1 + cfg.saturation))
        record.jitter = (b, c, s)
        image = np.clip(image * b, 0, 1)
        m = _gray(image).mean()
        image = np.clip((image - m) * c + m, 0, 1)
        g = _gray(image)[None]
        image = np.clip(g + (image - g) * s, 0, 1)
    if rng.random() < cfg.grayscale_prob:
        record.grayscale = True
        image = np.repeat(_gray(image)[None], 3, axis=0)
    if rng.random() < cfg.blur_prob:
        record.blur_sigma = float(rng.uniform(*cfg.blur_sigma))
        image = gaussian_blur(image, record.blur_sigma)
    image = np.clip(image, 0, 1).astype(np.float32)
    if rng.random() < cfg.erase_prob:
        record.erase = _erase_rect(rng, H, W, cfg)
        r, c, h, w = record.erase
        image[:, r:r + h, c:c + w] = np.clip(np.asarray(cfg.fill, dtype=np.float32), 0, 1)[:, None, None]
    return ImageSample(sample.id, image, list(sample.instances)), record


def weak_strong_pair(sample: ImageSample, rng: np.random.Generator, cfg: AugConfig | None = None):
    """Weak copy plus a strong copy of the weak copy; both share one annotation set."""
    weak, wrec = weak_aug(sample, rng, cfg)
    strong, srec = strong_aug(weak, rng, cfg)
    srec = replace(srec, flip=wrec.flip, scale=wrec.scale)
    return weak, strong, wrec, srec
