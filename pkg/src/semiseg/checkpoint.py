"""Binary tensor checkpoints.

Layout (little-endian): ``b"SSIC"``, u32 version, u32 tensor count, then per
tensor u16 name length, UTF-8 name, u8 rank, u32 per dim, float32 data in
row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError
from .optim import AdamWState

MAGIC = b"SSIC"
VERSION = 1

_OPT_SCALARS = ("step", "learning_rate", "beta1", "beta2", "epsilon", "weight_decay")


def encode_tensors(tensors: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_tensors(buf: bytes, source="<bytes>") -> dict:
    def fail(msg):
        raise ParseError(f"{source}: {msg}", path=source)

    if len(buf) < 12:
        fail("truncated header")
    if buf[:4] != MAGIC:
        fail(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        fail(f"unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    for index in range(count):
        label = f"tensor #{index}"
        if pos + 2 > len(buf):
            fail(f"truncated before {label} name")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n > len(buf):
            fail(f"truncated inside {label} name")
        try:
            name = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            fail(f"{label} name is not UTF-8")
        pos += n
        if pos + 1 > len(buf):
            fail(f"truncated in tensor {name!r} (rank)")
        rank = buf[pos]
        pos += 1
        if pos + 4 * rank > len(buf):
            fail(f"truncated in tensor {name!r} (shape)")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            fail(f"truncated in tensor {name!r} (data: {len(buf) - pos} of {nbytes} bytes)")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(buf):
        fail(f"{len(buf) - pos} trailing bytes")
    return tensors


def save_tensors(path, tensors: dict) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path) -> dict:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc}", path=path) from exc
    return decode_tensors(buf, path)


def save_weights(path, weights) -> None:
    save_tensors(path, weights.to_arrays())


def load_weights(path, freeze_embeddings: bool = True):
    from .segmentor import ModelWeights

    tensors = load_tensors(path)
    try:
        return ModelWeights.from_arrays(tensors, freeze_embeddings)
    except KeyError as exc:
        raise ParseError(f"{path}: checkpoint lacks tensor {exc.args[0]!r}", path=path) from exc


def save_optimizer(path, state: AdamWState) -> None:
    tensors = {k: np.array(float(getattr(state, k)), np.float32) for k in _OPT_SCALARS}
    for name in state.m:
        tensors[f"m/{name}"] = state.m[name]
        tensors[f"v/{name}"] = state.v[name]
    save_tensors(path, tensors)


def load_optimizer(path) -> AdamWState:
    tensors = load_tensors(path)
    try:
        scalars = {k: float(tensors[k]) for k in _OPT_SCALARS}
    except KeyError as exc:
        raise ParseError(f"{path}: optimizer checkpoint lacks {exc.args[0]!r}", path=path) from exc
    state = AdamWState(**{k: v for k, v in scalars.items() if k != "step"})
    state.step = int(scalars["step"])
    for key, arr in tensors.items():
        if key.startswith("m/"):
            state.m[key[2:]] = arr.copy()
        elif key.startswith("v/"):
            state.v[key[2:]] = arr.copy()
    return state
