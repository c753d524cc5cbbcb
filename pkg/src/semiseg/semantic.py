"""Word-embedding projection and similarity-based query classification."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ProjectionLayer:
    P: Tensor  # d_w x d

    @classmethod
    def init(cls, d_w: int, d: int, rng: np.random.Generator) -> "ProjectionLayer":
        return cls(Tensor(uniform_init(rng, (d_w, d), d_w), requires_grad=True, name="projection"))


@dataclass
class ClassifierHead:
    """Per-row MLP mapping N class similarities to N logits (one ReLU hidden layer)."""

    w1: Tensor  # N x h
    b1: Tensor  # h
    w2: Tensor  # h x N
    b2: Tensor  # N

    @classmethod
    def init(cls, n_classes: int, hidden: int, rng: np.random.Generator) -> "ClassifierHead":
        return cls(
            Tensor(uniform_init(rng, (n_classes, hidden), n_classes), requires_grad=True, name="head.w1"),
            Tensor(np.zeros(hidden, np.float32), requires_grad=True, name="head.b1"),
            Tensor(uniform_init(rng, (hidden, n_classes), hidden), requires_grad=True, name="head.w2"),
            Tensor(np.zeros(n_classes, np.float32), requires_grad=True, name="head.b2"),
        )

    @property
    def n_classes(self) -> int:
        return self.w1.shape[0]

    def __call__(self, scores: Tensor) -> Tensor:
        hidden = ad.relu(scores @ self.w1 + self.b1)
        return hidden @ self.w2 + self.b2


def project(w_se: Tensor, layer: ProjectionLayer) -> Tensor:
    """Map ``N x d_w`` word embeddings into the ``d``-wide image-feature space."""
    if w_se.shape[-1] != layer.P.shape[0]:
        raise DimensionError(
            f"projection mismatch: embeddings have d_w={w_se.shape[-1]}, projection expects d_w={layer.P.shape[0]}")
    return w_se @ layer.P


def similarity(V: Tensor, w_se_vi: Tensor) -> Tensor:
    """Raw query/category scores ``V @ W_se_vi^T``; ``V`` may carry a leading batch axis."""
    if V.shape[-1] != w_se_vi.shape[-1]:
        raise DimensionError(f"feature width mismatch: V has d={V.shape[-1]}, embeddings have d={w_se_vi.shape[-1]}")
    return V @ w_se_vi.transpose()


def classify(V: Tensor, w_se_vi: Tensor, head: ClassifierHead) -> Tensor:
    """Class probabilities per query: ``softmax(MLP(V @ W_se_vi^T))`` over the last axis."""
    scores = similarity(V, w_se_vi)
    return ad.softmax(head(scores), axis=-1)
