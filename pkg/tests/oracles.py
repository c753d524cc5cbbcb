"""Independent reference computations used as test oracles.

Nothing here imports the code paths being checked except for the forward
function handed to :func:`finite_difference`.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i][t]) * float(b[t][j])
            out[i][j] = acc
    return np.array(out)


def naive_conv2d(x, k, bias):
    """Direct nested loops: x C_in x H x W, k C_out x C_in x 3 x 3, zero padding 1."""
    c_in, H, W = x.shape
    c_out = k.shape[0]
    out = np.zeros((c_out, H, W))
    for o in range(c_out):
        for r in range(H):
            for c in range(W):
                acc = float(bias[o])
                for ci in range(c_in):
                    for dr in range(3):
                        for dc in range(3):
                            rr, cc = r + dr - 1, c + dc - 1
                            if 0 <= rr < H and 0 <= cc < W:
                                acc += float(k[o, ci, dr, dc]) * float(x[ci, rr, cc])
                out[o, r, c] = acc
    return out


def finite_difference(f, arr: np.ndarray, index, h: float = 1e-3) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``arr[index]`` (``arr`` is perturbed in place)."""
    orig = arr[index]
    arr[index] = orig + h
    fp = f()
    arr[index] = orig - h
    fm = f()
    arr[index] = orig
    return (fp - fm) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def scalar_ce(probs, targets, clamp=1e-7):
    total = 0.0
    for row, t in zip(probs, targets):
        total += -math.log(max(float(row[t]), clamp))
    return total / len(targets)


def scalar_bce(logits, targets):
    total, n = 0.0, 0
    for x, y in zip(np.ravel(logits), np.ravel(targets)):
        x = float(x)
        p = 1.0 / (1.0 + math.exp(-x))
        total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
        n += 1
    return total / n


def scalar_dice(logits, targets, smooth=1.0):
    vals = []
    for lrow, trow in zip(logits, targets):
        p = [1.0 / (1.0 + math.exp(-float(x))) for x in np.ravel(lrow)]
        y = [float(v) for v in np.ravel(trow)]
        inter = sum(a * b for a, b in zip(p, y))
        vals.append(1.0 - (2 * inter + smooth) / (sum(p) + sum(y) + smooth))
    return sum(vals) / len(vals)


def brute_force_assignment(cost) -> float:
    """Minimum total cost over all injections of columns (g) into rows (q)."""
    cost = np.asarray(cost)
    q, g = cost.shape
    best = math.inf
    for rows in itertools.permutations(range(q), g):
        best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    return 0.0 if g == 0 else best


def mask_iou_ref(a, b) -> Fraction:
    inter = union = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        inter += bool(x) and bool(y)
        union += bool(x) or bool(y)
    return Fraction(inter, union) if union else Fraction(0)


def pr_integration_ap(flags, num_gt) -> float:
    """101-point interpolated AP from the PR points, computed with exact rationals."""
    if num_gt == 0:
        return 0.0
    points = []  # (recall, precision)
    tp = 0
    for i, f in enumerate(flags, start=1):
        tp += bool(f)
        points.append((Fraction(tp, num_gt), Fraction(tp, i)))
    total = Fraction(0)
    for k in range(101):
        r = Fraction(k, 100)
        reachable = [p for rec, p in points if rec >= r]
        total += max(reachable) if reachable else Fraction(0)
    return float(total / 101 * 100)


def greedy_flags_ref(dets, gts, thr):
    """Greedy matching straight from the definition; dets sorted by score (stable)."""
    used = set()
    flags = []
    for d in dets:
        best, best_iou = None, None
        for j, (img, cls, mask) in enumerate(gts):
            if j in used or img != d.image_id or cls != d.class_id:
                continue
            iou = float(mask_iou_ref(d.mask, mask))
            if iou >= thr and (best_iou is None or iou > best_iou):
                best, best_iou = j, iou
        if best is None:
            flags.append(False)
        else:
            used.add(best)
            flags.append(True)
    return flags


def brute_force_evaluate(dets, samples):
    """AP, AP50, AP75 recomputed from definitions."""
    gts = [(s.id, inst.class_id, inst.mask) for s in samples for inst in s.instances]
    classes = sorted({c for _, c, _ in gts})
    ids = {s.id for s in samples}
    thresholds = [round(0.5 + 0.05 * k, 2) for k in range(10)]
    per_class, a50, a75 = [], [], []
    for cls in classes:
        cdets = [d for d in dets if d.class_id == cls and d.image_id in ids]
        order = sorted(range(len(cdets)), key=lambda i: (-cdets[i].score, i))
        cdets = [cdets[i] for i in order]
        cgts = [g for g in gts if g[1] == cls]
        vals = [pr_integration_ap(greedy_flags_ref(cdets, cgts, t), len(cgts)) for t in thresholds]
        per_class.append(sum(vals) / len(vals))
        a50.append(vals[0])
        a75.append(vals[5])
    n = len(classes)
    return sum(per_class) / n, sum(a50) / n, sum(a75) / n
