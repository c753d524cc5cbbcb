"""Run orchestration shared by the command line and the acceptance suite."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, parse_ratio, save_config
from .dataio import load_dataset, load_samples, load_validation, save_dataset, VAL_DIR, MANIFEST
from .embeddings import CategoryVocabulary, EmbeddingMatrix, hash_embed, load_embeddings
from .errors import ConfigError
from .evaluator import APReport
from .segmentor import ModelWeights
from .synth import generate_dataset, split_dataset
from .trainer import (TrainResult, evaluate_weights, prepare_aug, semi_stage, start_semi, supervised_stage,
                      two_stage_train)

log = logging.getLogger(__name__)

METRICS_HEADER = ("stage", "epoch", "split", "loss", "AP", "AP50", "AP75", "num_pseudo_labels", "mean_pseudo_score")
SWEEP_HEADER = ("axis", "value", "AP", "AP50", "AP75", "num_pseudo_labels")
ABLATION_HEADER = ("seed", "semantic_branch", "two_stage", "AP", "AP50", "AP75")
EVAL_HEADER = ("source", "AP", "AP50", "AP75")
SWEEP_AXES = ("threshold", "ratio")

_INIT_STREAM = 3


def fmt(value) -> str:
    """CSV cell: empty for missing, fixed six decimals for floats."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "on" if value else "off"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(row.get(h)) for h in header))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").strip("\n").split("\n")
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


# -- data and models -----------------------------------------------------------

def generate_data(cfg: ExperimentConfig, out_dir) -> dict:
    spec = cfg.scene_spec()
    seed = cfg["data.seed"]
    train = generate_dataset(spec, cfg["data.train_count"], seed, prefix="img", stream=0)
    val = generate_dataset(spec, cfg["data.val_count"], seed, prefix="val", stream=1)
    split = split_dataset([s.id for s in train], cfg["data.fraction"], seed)
    out = Path(out_dir)
    save_dataset(train, split, out, val)
    save_config(out / "config.txt", cfg)
    return {"train": len(train), "labeled": len(split.labeled_ids), "unlabeled": len(split.unlabeled_ids),
            "val": len(val), "instances": sum(len(s.instances) for s in train)}


def load_data(data_dir, vocab: CategoryVocabulary):
    samples, split = load_dataset(data_dir)
    val = load_validation(data_dir) if (Path(data_dir) / VAL_DIR / MANIFEST).exists() else []
    for s in samples + val:
        for inst in s.instances:
            if not 1 <= inst.class_id < vocab.N:
                raise ConfigError(f"sample {s.id} has class id {inst.class_id}, outside the {vocab.N}-entry "
                                  f"vocabulary from data.shapes", key="data.shapes")
    return samples, split, val


def eval_samples(data_dir) -> list:
    """Validation split if the directory has one, else the directory's own samples."""
    if (Path(data_dir) / VAL_DIR / MANIFEST).exists():
        return load_validation(data_dir)
    return load_samples(data_dir)[0]


def build_embeddings(cfg: ExperimentConfig, vocab: CategoryVocabulary) -> EmbeddingMatrix:
    path = cfg["paths.embeddings"]
    if path:
        return load_embeddings(path, vocab)
    return hash_embed(vocab, cfg["model.d_w"], cfg["model.embedding_seed"])


def init_weights(cfg: ExperimentConfig, vocab: CategoryVocabulary, seed: int | None = None) -> ModelWeights:
    seed = cfg["train.seed"] if seed is None else seed
    emb = build_embeddings(cfg, vocab) if cfg["ablation.semantic_branch"] else None
    return ModelWeights.init(cfg.model_config(vocab.N), emb, np.random.default_rng([seed, _INIT_STREAM]))


# -- runs ----------------------------------------------------------------------

def run_train(cfg: ExperimentConfig, samples, split, val, out_dir, on_step=None) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.txt", cfg)
    vocab = cfg.scene_spec().vocab
    result = two_stage_train(samples, split, cfg.trainer_config(), init_weights(cfg, vocab), val,
                             two_stage=cfg["ablation.two_stage"], out_dir=out, on_step=on_step)
    write_csv(out / "metrics.csv", METRICS_HEADER, result.metrics)
    return result


def final_val(metrics) -> dict | None:
    rows = [m for m in metrics if m["split"] == "val"]
    return rows[-1] if rows else None


def sweep_override(cfg: ExperimentConfig, axis: str, value: str) -> tuple:
    """Config for one sweep value plus its canonical label."""
    if axis == "threshold":
        try:
            t = float(value)
        except ValueError:
            raise ConfigError(f"threshold value {value!r} is not a number", key="sweep.values") from None
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"threshold {value!r} outside [0, 1]", key="sweep.values")
        return cfg.with_overrides({"train.score_threshold": t}), f"{t:g}"
    if axis == "ratio":
        a, b = parse_ratio(value)
        # the batch grows to hold at least one labeled:unlabeled unit
        batch = max(cfg["train.batch_size"], a + b)
        return cfg.with_overrides({"train.ratio": (a, b), "train.batch_size": batch}), f"{a}:{b}"
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}", key="sweep.axis")


def run_sweep(cfg: ExperimentConfig, samples, split, val, axis: str, values, out_dir) -> list:
    """Stage 2 once per value, all starting from one shared stage-1 checkpoint."""
    overrides = [sweep_override(cfg, axis, v) for v in values]
    if not val:
        raise ConfigError("sweeps need a validation split in the data directory", key="data.val_count")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.txt", cfg)
    vocab = cfg.scene_spec().vocab
    by_id = {s.id: s for s in samples}
    labeled = [by_id[i] for i in split.labeled_ids]
    unlabeled = [by_id[i] for i in split.unlabeled_ids]

    base = cfg.trainer_config()
    prepare_aug(base, labeled)
    stage1_metrics: list = []
    stage1, opt1 = supervised_stage(init_weights(cfg, vocab), labeled, base, val, stage1_metrics)
    checkpoint.save_weights(out / "stage1.ckpt", stage1)
    checkpoint.save_optimizer(out / "stage1_optimizer.ckpt", opt1)
    write_csv(out / "stage1_metrics.csv", METRICS_HEADER, stage1_metrics)

    rows = []
    for vcfg, label in overrides:
        tcfg = vcfg.trainer_config()
        prepare_aug(tcfg, labeled)
        teacher, student = start_semi(stage1)
        metrics: list = []
        semi_stage(teacher, student, labeled, unlabeled, tcfg, copy.deepcopy(opt1), val, metrics)
        run_dir = out / f"{axis}_{label.replace(':', '-')}"
        run_dir.mkdir(exist_ok=True)
        save_config(run_dir / "config.txt", vcfg)
        write_csv(run_dir / "metrics.csv", METRICS_HEADER, metrics)
        checkpoint.save_weights(run_dir / "teacher.ckpt", teacher)
        last = final_val(metrics)
        if last is None:  # zero semi epochs: the teacher is the stage-1 model
            report = evaluate_weights(teacher, val, tcfg.score_floor)
            last = {"AP": report.AP, "AP50": report.AP50, "AP75": report.AP75}
        pseudo = sum(int(m["num_pseudo_labels"]) for m in metrics if m.get("num_pseudo_labels") is not None)
        rows.append({"axis": axis, "value": label, "AP": last["AP"], "AP50": last["AP50"], "AP75": last["AP75"],
                     "num_pseudo_labels": pseudo})
        log.info("sweep %s=%s AP %.2f", axis, label, last["AP"])
    write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    return rows


@dataclass
class AblationRow:
    seed: int
    semantic_branch: bool
    two_stage: bool
    report: APReport

    def as_dict(self) -> dict:
        return {"seed": self.seed, "semantic_branch": self.semantic_branch, "two_stage": self.two_stage,
                "AP": self.report.AP, "AP50": self.report.AP50, "AP75": self.report.AP75}


def run_ablation(cfg: ExperimentConfig, samples, split, val, seeds, out_dir=None) -> list:
    """Four-way module ablation per seed; the single-stage variants reuse the stage-1 weights of the two-stage ones."""
    if not val:
        raise ConfigError("ablations need a validation split in the data directory", key="data.val_count")
    vocab = cfg.scene_spec().vocab
    by_id = {s.id: s for s in samples}
    labeled = [by_id[i] for i in split.labeled_ids]
    unlabeled = [by_id[i] for i in split.unlabeled_ids]
    rows = []
    for seed in seeds:
        for semantic in (False, True):
            vcfg = cfg.with_overrides({"train.seed": int(seed), "ablation.semantic_branch": semantic})
            tcfg = vcfg.trainer_config()
            prepare_aug(tcfg, labeled)
            stage1, opt = supervised_stage(init_weights(vcfg, vocab), labeled, tcfg)
            rows.append(AblationRow(int(seed), semantic, False, evaluate_weights(stage1, val, tcfg.score_floor)))
            teacher, student = start_semi(stage1)
            semi_stage(teacher, student, labeled, unlabeled, tcfg, opt)
            rows.append(AblationRow(int(seed), semantic, True, evaluate_weights(teacher, val, tcfg.score_floor)))
            log.info("seed %d semantic %s: AP %.2f -> %.2f", seed, semantic, rows[-2].report.AP, rows[-1].report.AP)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_config(out / "config.txt", cfg)
        write_csv(out / "ablation.csv", ABLATION_HEADER, [r.as_dict() for r in rows])
    return rows


def ablation_means(rows) -> dict:
    """Mean AP per ``(semantic_branch, two_stage)`` variant."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.semantic_branch, r.two_stage), []).append(r.report.AP)
    return {k: float(np.mean(v)) for k, v in groups.items()}
