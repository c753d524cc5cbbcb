"""Mask AP: IoU, greedy score-ordered matching and 101-point interpolated precision."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, ParseError

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = 101


@dataclass
class DetectionRecord:
    image_id: str
    class_id: int
    score: float
    mask: np.ndarray  # bool H x W


@dataclass
class APReport:
    AP: float
    AP50: float
    AP75: float
    per_class: dict = field(default_factory=dict)  # class_id -> AP over thresholds

    def as_row(self) -> dict:
        return {"AP": self.AP, "AP50": self.AP50, "AP75": self.AP75}

    def __str__(self) -> str:
        return f"AP {self.AP:.2f}  AP50 {self.AP50:.2f}  AP75 {self.AP75:.2f}"


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask size mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(det_masks, gt_masks) -> np.ndarray:
    if len(det_masks) == 0 or len(gt_masks) == 0:
        return np.zeros((len(det_masks), len(gt_masks)))
    d = np.stack([np.asarray(m, bool).reshape(-1) for m in det_masks]).astype(np.float64)
    g = np.stack([np.asarray(m, bool).reshape(-1) for m in gt_masks]).astype(np.float64)
    if d.shape[1] != g.shape[1]:
        raise DimensionError("detection and ground-truth masks differ in size")
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def sort_by_score(dets) -> list:
    """Descending score; ties keep input order."""
    return sorted(dets, key=lambda d: -d.score)


def _greedy_flags(ious: np.ndarray, same: np.ndarray, threshold: float) -> list:
    """``ious``/``same`` are det x gt; rows already in score order."""
    taken = np.zeros(ious.shape[1], dtype=bool)
    flags = []
    for i in range(ious.shape[0]):
        cand = np.where(same[i] & ~taken & (ious[i] >= threshold), ious[i], -1.0)
        if cand.size and cand.max() >= 0:
            j = int(np.argmax(cand))
            taken[j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def match_detections(dets, gts, iou_threshold: float) -> list:
    """TP/FP flag per detection, in the order given (callers sort by score).

    ``gts`` holds ``(image_id, class_id, mask)`` triples. A detection may only
    claim a ground truth from its own image and class.
    """
    if not dets:
        return []
    ious = np.zeros((len(dets), len(gts)))
    same = np.zeros((len(dets), len(gts)), dtype=bool)
    for i, d in enumerate(dets):
        for j, (img, cls, mask) in enumerate(gts):
            if d.image_id == img and d.class_id == cls:
                same[i, j] = True
                ious[i, j] = mask_iou(d.mask, mask)
    return _greedy_flags(ious, same, iou_threshold)


def average_precision(flags, num_gt: int):
    """101-point interpolated AP in percent, or ``None`` when the class is absent from GT and detections."""
    flags = np.asarray(flags, dtype=bool)
    if num_gt == 0:
        return 0.0 if flags.size else None
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, flags.size + 1)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= k/100  <=>  100 * tp >= k * num_gt  (exact in integers)
    needed = np.arange(RECALL_POINTS) * num_gt
    idx = np.searchsorted(100 * tp, needed, side="left")
    sampled = np.where(idx < flags.size, precision[np.minimum(idx, flags.size - 1)], 0.0)
    return float(sampled.sum() / RECALL_POINTS * 100.0)


def evaluate(detections, ground_truth) -> APReport:
    """AP/AP50/AP75 macro-averaged over classes that occur in ``ground_truth`` (ImageSamples)."""
    ground_truth = list(ground_truth)
    if not ground_truth:
        raise ConfigError("evaluation needs a non-empty validation set")
    gt_by_image = {s.id: s for s in ground_truth}
    classes = sorted({inst.class_id for s in ground_truth for inst in s.instances})
    if not classes:
        return APReport(0.0, 0.0, 0.0)
    dets_by_image: dict = {}
    for order, d in enumerate(detections):
        if d.image_id in gt_by_image:
            dets_by_image.setdefault(d.image_id, []).append((order, d))

    per_class = {}
    at50, at75 = [], []
    for cls in classes:
        # per-image IoU tables, global score order across images
        entries = []  # (score, order, image_id, local det index)
        tables = {}
        num_gt = 0
        for s in ground_truth:
            gmasks = [inst.mask for inst in s.instances if inst.class_id == cls]
            num_gt += len(gmasks)
            dets = [(o, d) for o, d in dets_by_image.get(s.id, []) if d.class_id == cls]
            tables[s.id] = (iou_matrix([d.mask for _, d in dets], gmasks), len(gmasks))
            for k, (o, d) in enumerate(dets):
                entries.append((d.score, o, s.id, k))
        entries.sort(key=lambda e: (-e[0], e[1]))
        values = []
        for thr in IOU_THRESHOLDS:
            taken = {img: np.zeros(n, dtype=bool) for img, (_, n) in tables.items()}
            flags = []
            for _, _, img, k in entries:
                row = tables[img][0][k] if tables[img][1] else np.zeros(0)
                cand = np.where(~taken[img] & (row >= thr), row, -1.0)
                if cand.size and cand.max() >= 0:
                    taken[img][int(np.argmax(cand))] = True
                    flags.append(True)
                else:
                    flags.append(False)
            values.append(average_precision(flags, num_gt))
        per_class[cls] = float(np.mean(values))
        at50.append(values[IOU_THRESHOLDS.index(0.5)])
        at75.append(values[IOU_THRESHOLDS.index(0.75)])
    return APReport(float(np.mean(list(per_class.values()))), float(np.mean(at50)), float(np.mean(at75)), per_class)


# -- detection files ---------------------------------------------------------

def write_detections(path, detections) -> None:
    """One line per detection: ``image_id class_id score mask_relpath`` (masks as PGM)."""
    from .dataio import write_pgm

    path = Path(path)
    mask_dir = path.parent / (path.stem + "_masks")
    mask_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, d in enumerate(detections):
        rel = f"{mask_dir.name}/{d.image_id}_{k}.pgm"
        write_pgm(path.parent / rel, d.mask)
        lines.append(f"{d.image_id} {d.class_id} {float(d.score)!r} {rel}")
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_detections(path) -> list:
    from .dataio import read_pgm

    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read detections {path}: {exc}", path=path) from exc
    out = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"{path}:{lineno}: expected 'image_id class_id score mask_relpath'", path=path, line=lineno)
        try:
            cls, score = int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}", path=path, line=lineno) from exc
        if not np.isfinite(score):
            raise ParseError(f"{path}:{lineno}: non-finite score", path=path, line=lineno)
        out.append(DetectionRecord(parts[0], cls, score, read_pgm(path.parent / parts[3])))
    return out
