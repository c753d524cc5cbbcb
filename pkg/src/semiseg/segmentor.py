"""Toy box-free query-based instance segmentor.

A three-layer conv encoder produces a per-pixel feature map. Learnable
queries attend over it (dot-product attention, softmax over pixels) to give
one feature vector per query; each query's mask is its inner product with an
embedded feature map, and its class comes either from the semantic branch
or, when that branch is ablated, from a plain linear head.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_CLAMP, Tensor
from .embeddings import EmbeddingMatrix
from .errors import DimensionError
from .matching import MatchResult, hungarian_match
from .semantic import ClassifierHead, ProjectionLayer, classify, project, uniform_init

ENCODER_WIDTHS = (16, 32)

PARAM_GROUPS = {
    "encoder": ("encoder.",),
    "queries": ("queries",),
    "mask_head": ("mask_embed.",),
    "projection": ("projection",),
    "classifier": ("head.", "classifier."),
}


@dataclass
class ModelConfig:
    n_classes: int
    queries: int = 10
    dim: int = 32
    hidden: int = 0  # 0 -> 2 * n_classes
    semantic: bool = True
    pos_encoding: bool = True
    freeze_embeddings: bool = True

    @property
    def hidden_width(self) -> int:
        return self.hidden or 2 * self.n_classes


@dataclass
class LossWeights:
    ce: float = 1.0
    bce: float = 1.0
    dice: float = 1.0
    match_ce: float = 1.0
    match_dice: float = 1.0


class ModelWeights:
    """Named parameter tensors of one segmentor instance."""

    def __init__(self, config: ModelConfig, params: dict, frozen=()):
        self.config = config
        self.params = dict(params)
        self.frozen = set(frozen)

    # -- construction -----------------------------------------------------
    @classmethod
    def init(cls, config: ModelConfig, embeddings: EmbeddingMatrix | None, rng: np.random.Generator) -> "ModelWeights":
        d, N = config.dim, config.n_classes
        params = {}
        c_in = 3
        for k, c_out in enumerate(ENCODER_WIDTHS + (d,)):
            fan_in = c_in * 9
            bound = np.sqrt(6.0 / fan_in)
            params[f"encoder.{k}.weight"] = rng.uniform(-bound, bound, (c_out, c_in, 3, 3)).astype(np.float32)
            params[f"encoder.{k}.bias"] = np.zeros(c_out, np.float32)
            c_in = c_out
        params["queries"] = rng.normal(0.0, 1.0, (config.queries, d)).astype(np.float32)
        params["mask_embed.weight"] = uniform_init(rng, (d, d), d)
        params["mask_embed.bias"] = np.zeros(d, np.float32)
        frozen = set()
        if config.semantic:
            if embeddings is None:
                raise ValueError("semantic branch needs an embedding matrix")
            if embeddings.vocab.N != N:
                raise DimensionError(f"embedding rows {embeddings.vocab.N} != n_classes {N}")
            params["embeddings"] = embeddings.rows.data.astype(np.float32, copy=True)
            params["projection"] = ProjectionLayer.init(embeddings.d_w, d, rng).P.data
            head = ClassifierHead.init(N, config.hidden_width, rng)
            for name in ("w1", "b1", "w2", "b2"):
                params[f"head.{name}"] = getattr(head, name).data
            if config.freeze_embeddings:
                frozen.add("embeddings")
        else:
            params["classifier.weight"] = uniform_init(rng, (d, N), d)
            params["classifier.bias"] = np.zeros(N, np.float32)
        tensors = {k: Tensor(v, requires_grad=k not in frozen, name=k) for k, v in params.items()}
        return cls(config, tensors, frozen)

    @classmethod
    def from_arrays(cls, arrays: dict, freeze_embeddings: bool = True) -> "ModelWeights":
        """Rebuild weights (and their config) from a name -> array mapping."""
        arrays = dict(arrays)
        pos = bool(arrays.pop("meta.pos_encoding", np.array(1.0)).reshape(-1)[0])
        q, d = arrays["queries"].shape
        semantic = "projection" in arrays
        if semantic:
            n_classes, hidden = arrays["head.w1"].shape
        else:
            n_classes = arrays["classifier.weight"].shape[1]
            hidden = 0
        config = ModelConfig(n_classes, q, d, hidden, semantic, pos, freeze_embeddings)
        frozen = {"embeddings"} if semantic and freeze_embeddings else set()
        tensors = {k: Tensor(np.array(v, dtype=np.float32), requires_grad=k not in frozen, name=k)
                   for k, v in arrays.items()}
        return cls(config, tensors, frozen)

    # -- views ------------------------------------------------------------
    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list:
        return list(self.params)

    def trainable(self) -> dict:
        return {k: t for k, t in self.params.items() if k not in self.frozen}

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.params.items()}

    def to_arrays(self) -> dict:
        """Arrays plus the metadata scalars that checkpoints carry."""
        out = dict(self.arrays())
        out["meta.pos_encoding"] = np.array(1.0 if self.config.pos_encoding else 0.0, np.float32)
        return out

    def group(self, group: str) -> list:
        prefixes = PARAM_GROUPS[group]
        return [k for k in self.params if k.startswith(prefixes)]

    def copy(self, requires_grad: bool | None = None, dtype=None) -> "ModelWeights":
        params = {}
        for k, t in self.params.items():
            rg = t.requires_grad if requires_grad is None else (requires_grad and k not in self.frozen)
            data = t.data.astype(dtype or t.data.dtype, copy=True)
            params[k] = Tensor(data, requires_grad=rg, name=k, dtype=data.dtype)
        return ModelWeights(replace(self.config), params, self.frozen)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict:
        return {k: t.grad for k, t in self.trainable().items() if t.grad is not None}

    def equal(self, other: "ModelWeights") -> bool:
        """Bitwise equality of every tensor."""
        if self.params.keys() != other.params.keys():
            return False
        return all(np.array_equal(self.params[k].data, other.params[k].data) and
                   self.params[k].data.dtype == other.params[k].data.dtype for k in self.params)

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.params.values())


@dataclass
class Prediction:
    class_probs: Tensor  # B x q x N
    mask_logits: Tensor  # B x q x H x W
    query_features: Tensor  # B x q x d

    @property
    def batch_size(self) -> int:
        return self.class_probs.shape[0]

    def probs_np(self, b: int) -> np.ndarray:
        return self.class_probs.data[b]

    def logits_np(self, b: int) -> np.ndarray:
        return self.mask_logits.data[b]


@lru_cache(maxsize=8)
def _pos_encoding(d: int, H: int, W: int) -> np.ndarray:
    """Fixed sinusoidal 2-D position code, ``d x (H*W)``; a quarter of the channels per sin/cos and axis."""
    k = max(1, d // 4)
    freqs = np.pi * (np.arange(k) + 1) / 2.0
    ys = (np.arange(H) + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    yy = np.repeat(ys, W)
    xx = np.tile(xs, H)
    rows = [np.sin(np.outer(freqs, yy)), np.cos(np.outer(freqs, yy)),
            np.sin(np.outer(freqs, xx)), np.cos(np.outer(freqs, xx))]
    pe = np.concatenate(rows, axis=0)[:d]
    if pe.shape[0] < d:
        pe = np.concatenate([pe, np.zeros((d - pe.shape[0], H * W))], axis=0)
    pe.setflags(write=False)
    return pe


def forward(images, w: ModelWeights) -> Prediction:
    """Run the segmentor on ``B x 3 x H x W`` images (a single ``3 x H x W`` image is promoted)."""
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"segmentor expects B x 3 x H x W images, got {x.shape}")
    dtype = w["queries"].dtype
    if x.dtype != dtype:
        x = Tensor(x.data.astype(dtype))
    B, _, H, W = x.shape
    cfg = w.config
    d = cfg.dim
    h = x
    n_layers = len(ENCODER_WIDTHS) + 1
    for k in range(n_layers):
        h = ad.conv2d(h, w[f"encoder.{k}.weight"], w[f"encoder.{k}.bias"])
        if k < n_layers - 1:
            h = ad.relu(h)
    feats = h.reshape(B, d, H * W)
    if cfg.pos_encoding:
        feats = feats + _pos_encoding(d, H, W).astype(dtype)
    attn_logits = (w["queries"] @ feats) * (1.0 / np.sqrt(d))  # B x q x HW
    attn = ad.softmax(attn_logits, axis=-1)
    V = attn @ feats.swapaxes(1, 2)  # B x q x d
    embedded = w["mask_embed.weight"] @ feats + w["mask_embed.bias"].reshape(d, 1)
    mask_logits = (V @ embedded).reshape(B, cfg.queries, H, W)
    if cfg.semantic:
        w_se_vi = project(w["embeddings"], ProjectionLayer(w["projection"]))
        head = ClassifierHead(w["head.w1"], w["head.b1"], w["head.w2"], w["head.b2"])
        probs = classify(V, w_se_vi, head)
    else:
        probs = ad.softmax(V @ w["classifier.weight"] + w["classifier.bias"], axis=-1)
    return Prediction(probs, mask_logits, V)


def infer(images, w: ModelWeights, batch_size: int = 16) -> list:
    """Forward pass without gradient recording; returns ``(probs, mask_logits)`` per image."""
    images = np.asarray(images)
    out = []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            pred = forward(images[start:start + batch_size], w)
            out.extend((pred.probs_np(b), pred.logits_np(b)) for b in range(pred.batch_size))
    return out


# -- matching and loss -------------------------------------------------------

def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def match_cost(probs: np.ndarray, mask_logits: np.ndarray, gt_classes, gt_masks, weights: LossWeights | None = None) -> np.ndarray:
    """``q x g`` cost: class cross-entropy plus Dice distance between soft masks and targets."""
    weights = weights or LossWeights()
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    q = probs.shape[0]
    g = len(gt_classes)
    if g == 0:
        return np.zeros((q, 0))
    p = _np_sigmoid(mask_logits.reshape(q, -1).astype(np.float64))
    y = np.asarray(gt_masks, dtype=np.float64).reshape(g, -1)
    ce = -np.log(np.maximum(probs[:, gt_classes].astype(np.float64), PROB_CLAMP))
    inter = p @ y.T
    dice = 1.0 - (2.0 * inter + 1.0) / (p.sum(1)[:, None] + y.sum(1)[None, :] + 1.0)
    return weights.match_ce * ce + weights.match_dice * dice


def match_prediction(probs: np.ndarray, mask_logits: np.ndarray, gt, weights: LossWeights | None = None) -> MatchResult:
    classes = [inst.class_id for inst in gt]
    masks = [inst.mask for inst in gt]
    return hungarian_match(match_cost(probs, mask_logits, classes, masks, weights))


def compute_loss(class_probs: Tensor, mask_logits: Tensor, gt, match: MatchResult,
                 weights: LossWeights | None = None) -> Tensor:
    """Loss of one image's prediction (``q x N`` probs, ``q x H x W`` logits).

    Every query gets a classification term (matched queries toward their
    object's class, the rest toward background); matched queries add mask
    BCE and Dice against their object's mask.
    """
    weights = weights or LossWeights()
    q = class_probs.shape[0]
    targets = np.zeros(q, dtype=np.int64)
    qi, gi = match.query_indices, match.gt_indices
    if len(gt):
        targets[qi] = [gt[j].class_id for j in gi]
    loss = ad.cross_entropy(class_probs, targets) * weights.ce
    if len(qi):
        flat = mask_logits.reshape(q, -1)[qi]
        target_masks = np.stack([gt[j].mask for j in gi]).reshape(len(gi), -1)
        loss = loss + ad.bce_with_logits(flat, target_masks) * weights.bce
        loss = loss + ad.dice_loss(flat, target_masks) * weights.dice
    return loss


def batch_loss(pred: Prediction, gts, weights: LossWeights | None = None, index=None) -> Tensor:
    """Mean per-image loss over the batch entries listed in ``index`` (default: all)."""
    index = list(range(pred.batch_size)) if index is None else list(index)
    total = None
    for b, gt in zip(index, gts):
        match = match_prediction(pred.probs_np(b), pred.logits_np(b), gt, weights)
        term = compute_loss(pred.class_probs[b], pred.mask_logits[b], gt, match, weights)
        total = term if total is None else total + term
    return total * (1.0 / len(index))


# -- decoding ----------------------------------------------------------------

def decode(probs: np.ndarray, mask_logits: np.ndarray, score_floor: float = 0.05, image_id: str = "") -> list:
    """Per-query detections: best non-background class, its probability, mask ``sigmoid > 0.5``.

    Queries whose score does not exceed ``score_floor`` or whose mask is
    empty are dropped. The background probability only enters through the
    softmax normalization.
    """
    from .evaluator import DetectionRecord

    out = []
    fg = probs[:, 1:]
    classes = fg.argmax(axis=1) + 1
    scores = fg.max(axis=1)
    for i in range(probs.shape[0]):
        mask = mask_logits[i] > 0
        if scores[i] <= score_floor or not mask.any():
            continue
        out.append(DetectionRecord(image_id, int(classes[i]), float(scores[i]), mask))
    return out
