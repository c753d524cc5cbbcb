"""Category vocabularies and their word-embedding matrices.

Embedding file format (UTF-8, ``\\n`` line ends)::

    N d_w
    background 0.1 -0.2 ...
    circle 0.3 0.0 ...

Rows may appear in any order; they are realigned to the vocabulary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import AlignmentError, ConfigError, ParseError

BACKGROUND = "background"

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_GOLDEN = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class CategoryVocabulary:
    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ConfigError("vocabulary needs background plus at least one category")
        if names[0] != BACKGROUND:
            raise ConfigError(f"vocabulary index 0 must be {BACKGROUND!r}, got {names[0]!r}")
        if len(set(names)) != len(names):
            raise ConfigError("vocabulary names must be unique")
        for n in names:
            if not n or any(c.isspace() for c in n):
                raise ConfigError(f"invalid category name {n!r}")

    @classmethod
    def from_categories(cls, categories) -> "CategoryVocabulary":
        return cls((BACKGROUND, *categories))

    @property
    def N(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class EmbeddingMatrix:
    rows: Tensor
    vocab: CategoryVocabulary
    source: str  # "loaded" | "hashed"

    @property
    def d_w(self) -> int:
        return self.rows.shape[1]

    def row(self, name: str) -> np.ndarray:
        return self.rows.data[self.vocab.index(name)]


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def splitmix64(key: int, counter: int) -> int:
    """Output ``counter`` of the SplitMix64 stream keyed by ``key``."""
    z = (key + (counter + 1) * _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _hashed_row(name: str, d_w: int, seed: int) -> np.ndarray:
    key = fnv1a64(name.encode("utf-8")) ^ (seed & _MASK64)
    # top 53 bits -> uniform [-1, 1)
    vals = [(splitmix64(key, k) >> 11) * (2.0 / (1 << 53)) - 1.0 for k in range(d_w)]
    norm = math.sqrt(math.fsum(v * v for v in vals))
    return np.array([v / norm for v in vals], dtype=np.float64)


def hash_embed(vocab: CategoryVocabulary, d_w: int = 32, seed: int = 0) -> EmbeddingMatrix:
    """Deterministic unit-norm pseudo-embeddings, one per category name."""
    if d_w < 2:
        raise ConfigError(f"embedding dimension must be >= 2, got {d_w}", key="model.d_w")
    rows = np.stack([_hashed_row(n, d_w, seed) for n in vocab.names]).astype(np.float32)
    return EmbeddingMatrix(Tensor(rows), vocab, "hashed")


def load_embeddings(path, vocab: CategoryVocabulary) -> EmbeddingMatrix:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").split("\n")
    except OSError as exc:
        raise ParseError(f"cannot read embeddings file {path}: {exc}", path=path) from exc
    header = lines[0].split()
    if len(header) != 2 or not all(h.isdigit() for h in header):
        raise ParseError(f"{path}:1: header must be 'N d_w'", path=path, line=1)
    n_rows, d_w = int(header[0]), int(header[1])
    table = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != d_w + 1:
            raise ParseError(f"{path}:{lineno}: expected name and {d_w} floats, got {len(parts) - 1} values",
                             path=path, line=lineno)
        try:
            vec = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: malformed float ({exc})", path=path, line=lineno) from exc
        if not all(math.isfinite(v) for v in vec):
            raise ParseError(f"{path}:{lineno}: non-finite value", path=path, line=lineno)
        table[parts[0]] = vec
    if len(table) != n_rows:
        raise ParseError(f"{path}: header declares {n_rows} rows, found {len(table)}", path=path)
    missing = [n for n in vocab.names if n not in table]
    if missing:
        raise AlignmentError(f"{path}: no embedding for category {missing[0]!r}")
    rows = np.array([table[n] for n in vocab.names], dtype=np.float32)
    return EmbeddingMatrix(Tensor(rows), vocab, "loaded")


def save_embeddings(path, emb: EmbeddingMatrix) -> None:
    lines = [f"{emb.vocab.N} {emb.d_w}"]
    for name, row in zip(emb.vocab.names, emb.rows.data):
        lines.append(" ".join([name] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
