"""Dataset directories: a text manifest, PPM images and PGM masks.

Layout::

    <dir>/manifest.txt          training pool (labeled + unlabeled)
    <dir>/images/<id>.ppm
    <dir>/masks/<id>_<k>.pgm
    <dir>/val/...               validation set, same layout, all records labeled

Manifest record: ``id labeled|unlabeled image_relpath k mask_1 class_1 ... mask_k class_k``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError
from .synth import DatasetSplit, ImageSample, InstanceAnnotation, dequantize, quantize

MANIFEST = "manifest.txt"
VAL_DIR = "val"


def _read_pnm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}", path=path) from exc
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated header", path=path)
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if fields[0] != magic:
        raise ParseError(f"{path}: expected {magic.decode()} file, found {fields[0][:8]!r}", path=path)
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ParseError(f"{path}: malformed header", path=path) from exc
    if maxval != 255:
        raise ParseError(f"{path}: maxval must be 255, got {maxval}", path=path)
    expected = width * height * channels
    body = raw[pos:pos + expected]
    if len(body) != expected:
        raise ParseError(f"{path}: pixel data truncated ({len(body)} of {expected} bytes)", path=path)
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(height, width, channels) if channels > 1 else arr.reshape(height, width)


def write_ppm(path: Path, image: np.ndarray) -> None:
    """``image`` is 3 x H x W in [0, 1]; stored as 8-bit."""
    q = quantize(image)
    _, H, W = q.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (W, H) + q.transpose(1, 2, 0).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    arr = _read_pnm(Path(path), b"P6", 3)
    return dequantize(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def write_pgm(path: Path, mask: np.ndarray) -> None:
    H, W = mask.shape
    q = np.where(mask, 255, 0).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (W, H) + q.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    arr = _read_pnm(Path(path), b"P5", 1)
    if not np.isin(arr, (0, 255)).all():
        raise ParseError(f"{path}: mask values must be 0 or 255", path=path)
    return arr == 255


def save_samples(samples, directory, labeled_ids=None) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    labeled = None if labeled_ids is None else set(labeled_ids)
    lines = []
    for sample in samples:
        img_rel = f"images/{sample.id}.ppm"
        write_ppm(directory / img_rel, sample.image)
        flag = "labeled" if labeled is None or sample.id in labeled else "unlabeled"
        parts = [sample.id, flag, img_rel, str(len(sample.instances))]
        for k, inst in enumerate(sample.instances):
            mask_rel = f"masks/{sample.id}_{k}.pgm"
            write_pgm(directory / mask_rel, inst.mask)
            parts += [mask_rel, str(inst.class_id)]
        lines.append(" ".join(parts))
    (directory / MANIFEST).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_samples(directory) -> tuple:
    """Return ``(samples, flags)`` where ``flags[id]`` is ``"labeled"`` or ``"unlabeled"``."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    try:
        text = manifest.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read manifest {manifest}: {exc}", path=manifest) from exc
    samples, flags = [], {}
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        parts = line.split()
        where = f"{manifest}:{lineno}"
        if len(parts) < 4 or parts[1] not in ("labeled", "unlabeled"):
            raise ParseError(f"{where}: malformed record", path=manifest, line=lineno)
        try:
            k = int(parts[3])
        except ValueError as exc:
            raise ParseError(f"{where}: bad instance count {parts[3]!r}", path=manifest, line=lineno) from exc
        if len(parts) != 4 + 2 * k:
            raise ParseError(f"{where}: expected {k} mask/class pairs", path=manifest, line=lineno)
        image = read_ppm(directory / parts[2])
        instances = []
        for j in range(k):
            mask_rel, cls = parts[4 + 2 * j], parts[5 + 2 * j]
            mask_path = directory / mask_rel
            if not mask_path.exists():
                raise ParseError(f"{where}: missing mask file {mask_path}", path=mask_path, line=lineno)
            mask = read_pgm(mask_path)
            if mask.shape != image.shape[1:]:
                raise ParseError(f"{mask_path}: mask size {mask.shape} != image size {image.shape[1:]}",
                                 path=mask_path)
            try:
                class_id = int(cls)
            except ValueError as exc:
                raise ParseError(f"{where}: bad class id {cls!r}", path=manifest, line=lineno) from exc
            instances.append(InstanceAnnotation(class_id, mask))
        samples.append(ImageSample(parts[0], image, instances))
        flags[parts[0]] = parts[1]
    return samples, flags


def save_dataset(samples, split: DatasetSplit, directory, val_samples=None) -> None:
    save_samples(samples, directory, split.labeled_ids)
    if val_samples is not None:
        save_samples(val_samples, Path(directory) / VAL_DIR)


def load_dataset(directory) -> tuple:
    """Return ``(samples, split)`` for the training pool in ``directory``."""
    samples, flags = load_samples(directory)
    labeled = [s.id for s in samples if flags[s.id] == "labeled"]
    unlabeled = [s.id for s in samples if flags[s.id] == "unlabeled"]
    fraction = len(labeled) / len(samples) if samples else 0.0
    return samples, DatasetSplit(labeled, unlabeled, fraction)


def load_validation(directory) -> list:
    return load_samples(Path(directory) / VAL_DIR)[0]
