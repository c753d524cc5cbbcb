"""Experiment configuration: ``section.key = value`` lines with ``#`` comments.

Every key has a declared type, default and range; unknown keys are
rejected. :func:`render` writes the resolved configuration back in the same
format, and parsing that text reproduces it exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .augment import AugConfig
from .errors import ConfigError
from .segmentor import LossWeights, ModelConfig
from .synth import SHAPES, SceneSpec
from .trainer import TrainerConfig


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | bool | str | shapes | ratio
    default: Any
    check: Callable[[Any], bool] | None = None
    hint: str = ""


def _rng(lo=None, hi=None):
    def check(v):
        return (lo is None or v >= lo) and (hi is None or v <= hi)
    return check


_PROB = (_rng(0.0, 1.0), "in [0, 1]")

SCHEMA: dict = {
    "data": {
        "height": Key("int", 64, _rng(8, 512), ">= 8"),
        "width": Key("int", 64, _rng(8, 512), ">= 8"),
        "shapes": Key("shapes", SHAPES),
        "min_instances": Key("int", 1, _rng(1, 8), "in [1, 8]"),
        "max_instances": Key("int", 3, _rng(1, 8), "in [1, 8]"),
        "min_size": Key("int", 5, _rng(1), ">= 1"),
        "max_size": Key("int", 12, _rng(1), ">= 1"),
        "color_jitter": Key("float", 0.1, _rng(0.0, 0.5), "in [0, 0.5]"),
        "allow_overlap": Key("bool", True),
        "train_count": Key("int", 400, _rng(1), ">= 1"),
        "val_count": Key("int", 100, _rng(1), ">= 1"),
        "fraction": Key("float", 0.05, lambda v: 0.0 < v <= 1.0, "in (0, 1]"),
        "seed": Key("int", 0, _rng(0), ">= 0"),
    },
    "model": {
        "q": Key("int", 10, _rng(1), ">= 1"),
        "d": Key("int", 32, _rng(2), ">= 2"),
        "h": Key("int", 0, _rng(0), ">= 0 (0 means 2N)"),
        "d_w": Key("int", 32, _rng(2), ">= 2"),
        "embedding_seed": Key("int", 0, _rng(0), ">= 0"),
        "pos_encoding": Key("bool", True),
        "freeze_embeddings": Key("bool", True),
    },
    "train": {
        "supervised_epochs": Key("int", 200, _rng(0), ">= 0"),
        "semi_epochs": Key("int", 10, _rng(0), ">= 0"),
        "batch_size": Key("int", 4, _rng(1), ">= 1"),
        "ratio": Key("ratio", (1, 1)),
        "score_threshold": Key("float", 0.7, *_PROB),
        "keep_rate": Key("float", 0.999, *_PROB),
        "learning_rate": Key("float", 1e-4, lambda v: v > 0, "> 0"),
        "weight_decay": Key("float", 0.05, _rng(0.0), ">= 0"),
        "unlabeled_weight": Key("float", 1.0, _rng(0.0), ">= 0"),
        "seed": Key("int", 0, _rng(0), ">= 0"),
        "workers": Key("int", 0, _rng(0, 64), "in [0, 64]"),
        "ce_weight": Key("float", 1.0, _rng(0.0), ">= 0"),
        "bce_weight": Key("float", 1.0, _rng(0.0), ">= 0"),
        "dice_weight": Key("float", 1.0, _rng(0.0), ">= 0"),
        "match_ce_weight": Key("float", 1.0, _rng(0.0), ">= 0"),
        "match_dice_weight": Key("float", 1.0, _rng(0.0), ">= 0"),
        "scale_min": Key("float", 0.75, _rng(0.1, 4.0), "in [0.1, 4]"),
        "scale_max": Key("float", 1.25, _rng(0.1, 4.0), "in [0.1, 4]"),
        "flip_prob": Key("float", 0.5, *_PROB),
        "jitter_prob": Key("float", 0.8, *_PROB),
        "grayscale_prob": Key("float", 0.2, *_PROB),
        "blur_prob": Key("float", 0.5, *_PROB),
        "erase_prob": Key("float", 0.5, *_PROB),
    },
    "ablation": {
        "semantic_branch": Key("bool", True),
        "two_stage": Key("bool", True),
    },
    "eval": {
        "interval": Key("int", 0, _rng(0), ">= 0 (0 means final epoch only)"),
        "score_floor": Key("float", 0.05, *_PROB),
    },
    "paths": {
        "embeddings": Key("str", "", hint="embedding file, empty for hashed"),
    },
}

_TRUE = {"on", "true", "yes", "1"}
_FALSE = {"off", "false", "no", "0"}


def _parse_value(key: str, spec: Key, raw: str):
    kind = spec.kind
    try:
        if kind == "int":
            value = int(raw)
        elif kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
        elif kind == "bool":
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            value = low in _TRUE
        elif kind == "shapes":
            value = tuple(s.strip() for s in raw.split(",") if s.strip())
            bad = [s for s in value if s not in SHAPES]
            if not value or bad:
                raise ValueError(raw)
        elif kind == "ratio":
            value = parse_ratio(raw)
        else:
            value = raw
    except (ValueError, ConfigError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}", key=key) from None
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"{key}: value {raw!r} out of range ({spec.hint})", key=key)
    return value


def parse_ratio(raw: str) -> tuple:
    parts = raw.strip().split(":")
    if len(parts) != 2:
        raise ConfigError(f"ratio must look like 'a:b', got {raw!r}", key="train.ratio")
    try:
        a, b = int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"ratio must look like 'a:b', got {raw!r}", key="train.ratio") from None
    if a <= 0 or b <= 0:
        raise ConfigError(f"ratio parts must be positive, got {raw!r}", key="train.ratio")
    return a, b


def format_value(spec: Key, value) -> str:
    if spec.kind == "bool":
        return "on" if value else "off"
    if spec.kind == "shapes":
        return ",".join(value)
    if spec.kind == "ratio":
        return f"{value[0]}:{value[1]}"
    if spec.kind == "float":
        return repr(float(value))
    return str(value)


class ExperimentConfig:
    """Resolved settings, addressed as ``cfg["train.keep_rate"]``."""

    def __init__(self, values: dict | None = None):
        self.values = {f"{s}.{k}": spec.default for s, keys in SCHEMA.items() for k, spec in keys.items()}
        for key, value in (values or {}).items():
            self.set(key, value)
        self.validate()

    @staticmethod
    def spec(key: str) -> Key:
        section, _, name = key.partition(".")
        try:
            return SCHEMA[section][name]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}", key=key) from None

    def set(self, key: str, value) -> None:
        spec = self.spec(key)
        if isinstance(value, str) and spec.kind != "str":
            value = _parse_value(key, spec, value)
        elif spec.check is not None and not spec.check(value):
            raise ConfigError(f"{key}: value {value!r} out of range ({spec.hint})", key=key)
        self.values[key] = value

    def __getitem__(self, key: str):
        self.spec(key)
        return self.values[key]

    def validate(self) -> None:
        # cross-field checks reuse the domain constructors
        self.scene_spec()
        self.trainer_config()
        if self["train.scale_min"] > self["train.scale_max"]:
            raise ConfigError("train.scale_min must not exceed train.scale_max", key="train.scale_min")
        if self["model.q"] < self["data.max_instances"]:
            raise ConfigError("model.q must be at least data.max_instances", key="model.q")

    # -- domain objects ----------------------------------------------------
    def scene_spec(self) -> SceneSpec:
        return SceneSpec(self["data.height"], self["data.width"], self["data.shapes"], self["data.min_instances"],
                         self["data.max_instances"], self["data.min_size"], self["data.max_size"],
                         self["data.color_jitter"], self["data.allow_overlap"])

    def aug_config(self) -> AugConfig:
        return AugConfig(scale_range=(self["train.scale_min"], self["train.scale_max"]),
                         flip_prob=self["train.flip_prob"], jitter_prob=self["train.jitter_prob"],
                         grayscale_prob=self["train.grayscale_prob"], blur_prob=self["train.blur_prob"],
                         erase_prob=self["train.erase_prob"])

    def trainer_config(self) -> TrainerConfig:
        loss = LossWeights(self["train.ce_weight"], self["train.bce_weight"], self["train.dice_weight"],
                           self["train.match_ce_weight"], self["train.match_dice_weight"])
        return TrainerConfig(
            supervised_epochs=self["train.supervised_epochs"], semi_epochs=self["train.semi_epochs"],
            batch_size=self["train.batch_size"], ratio=self["train.ratio"],
            score_threshold=self["train.score_threshold"], keep_rate=self["train.keep_rate"],
            learning_rate=self["train.learning_rate"], weight_decay=self["train.weight_decay"],
            unlabeled_weight=self["train.unlabeled_weight"], seed=self["train.seed"], workers=self["train.workers"],
            eval_interval=self["eval.interval"], score_floor=self["eval.score_floor"], loss=loss,
            aug=self.aug_config())

    def model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(n_classes, queries=self["model.q"], dim=self["model.d"], hidden=self["model.h"],
                           semantic=self["ablation.semantic_branch"], pos_encoding=self["model.pos_encoding"],
                           freeze_embeddings=self["model.freeze_embeddings"])

    def with_overrides(self, values: dict) -> "ExperimentConfig":
        merged = dict(self.values)
        merged.update(values)
        return ExperimentConfig(merged)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'", key=None)
        spec = ExperimentConfig.spec(key)
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", key=key)
        values[key] = _parse_value(key, spec, value)
    return ExperimentConfig(values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text, str(path))


def render(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"# {section}")
        for name, spec in keys.items():
            lines.append(f"{section}.{name} = {format_value(spec, cfg.values[f'{section}.{name}'])}")
    return "\n".join(lines) + "\n"


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(render(cfg), encoding="utf-8")
