"""Two-stage training: supervised warm-up, then teacher/student pseudo-labeling with an EMA teacher."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .augment import AugConfig, dataset_mean, weak_strong_pair
from .autodiff import Tape
from .errors import ConfigError, DimensionError, NumericalError
from .evaluator import APReport, evaluate
from .optim import AdamWState, adamw_step
from .segmentor import LossWeights, ModelWeights, batch_loss, decode, forward, infer
from .synth import ImageSample, InstanceAnnotation

log = logging.getLogger(__name__)

STAGE_SUPERVISED = "supervised"
STAGE_SEMI = "semi"

# rng stream tags
_LABELED_STREAM = 0
_UNLABELED_STREAM = 1
_ORDER_STREAM = 2


@dataclass
class TrainerConfig:
    supervised_epochs: int = 200
    semi_epochs: int = 10
    batch_size: int = 4
    ratio: tuple = (1, 1)  # labeled : unlabeled per semi batch
    score_threshold: float = 0.7
    keep_rate: float = 0.999
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    unlabeled_weight: float = 1.0
    seed: int = 0
    workers: int = 0  # 0 = strict single-threaded
    eval_interval: int = 0  # 0 = evaluate only after each stage's final epoch
    score_floor: float = 0.05
    loss: LossWeights = field(default_factory=LossWeights)
    aug: AugConfig = field(default_factory=AugConfig)

    def __post_init__(self):
        self.ratio = tuple(int(x) for x in self.ratio)
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError("score threshold must be in [0, 1]", key="train.score_threshold")
        if not 0.0 <= self.keep_rate <= 1.0:
            raise ConfigError("keep rate must be in [0, 1]", key="train.keep_rate")
        if len(self.ratio) != 2 or min(self.ratio) <= 0:
            raise ConfigError("ratio parts must be positive integers", key="train.ratio")
        if self.batch_size < sum(self.ratio):
            raise ConfigError(f"batch size {self.batch_size} cannot hold ratio {self.ratio[0]}:{self.ratio[1]}",
                              key="train.batch_size")
        if self.supervised_epochs < 0 or self.semi_epochs < 0:
            raise ConfigError("epoch counts must be non-negative", key="train.supervised_epochs")

    @property
    def semi_batch(self) -> tuple:
        """(labeled, unlabeled) images per semi-supervised step."""
        unit = self.batch_size // sum(self.ratio)
        return self.ratio[0] * unit, self.ratio[1] * unit


@dataclass
class PseudoLabel:
    class_id: int
    score: float
    mask: np.ndarray


@dataclass
class StepResult:
    loss: float
    pseudo: list  # per unlabeled image: list of PseudoLabel
    supervised_loss: float = 0.0
    unlabeled_loss: float = 0.0

    @property
    def num_pseudo(self) -> int:
        return sum(len(p) for p in self.pseudo)

    @property
    def pseudo_scores(self) -> list:
        return [pl.score for p in self.pseudo for pl in p]


@dataclass
class TrainResult:
    teacher: ModelWeights
    student: ModelWeights
    metrics: list
    stage1: ModelWeights | None = None
    optimizer: AdamWState | None = None


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def new_optimizer(cfg: TrainerConfig) -> AdamWState:
    return AdamWState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)


def _check_finite(value: float, stage: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss in {stage} epoch {epoch}")


@contextmanager
def _epoch_context(stage: str, epoch: int):
    """Attach the stage and epoch to numerical failures raised deeper down."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            yield
    except NumericalError as exc:
        if f"{stage} epoch" in str(exc):
            raise
        raise NumericalError(f"{stage} epoch {epoch}: {exc}") from exc


def _stack(samples) -> np.ndarray:
    return np.stack([s.image for s in samples])


def augment_batch(samples, rng: np.random.Generator, aug: AugConfig) -> list:
    """Weak and strong copies of every sample, in order ``[weak_0, strong_0, weak_1, ...]``."""
    out = []
    for s in samples:
        weak, strong, _, _ = weak_strong_pair(s, rng, aug)
        out += [weak, strong]
    return out


def _optimize(student: ModelWeights, loss, opt: AdamWState) -> None:
    student.zero_grad()
    loss.backward()
    params = {k: t.data for k, t in student.trainable().items()}
    adamw_step(params, student.grads(), opt)


def supervised_loss(student: ModelWeights, copies, loss_weights: LossWeights):
    """Mean loss of the student over already-augmented labeled copies (records onto the active tape)."""
    pred = forward(_stack(copies), student)
    return batch_loss(pred, [c.instances for c in copies], loss_weights)


def supervised_step(student: ModelWeights, batch, opt: AdamWState, cfg: TrainerConfig, rng) -> float:
    copies = augment_batch(batch, rng, cfg.aug)
    with Tape():
        loss = supervised_loss(student, copies, cfg.loss)
    _optimize(student, loss, opt)
    return loss.item()


def ema_update(tea: ModelWeights, stu: ModelWeights, r: float) -> ModelWeights:
    """``tea <- r * tea + (1 - r) * stu`` for every tensor, in place."""
    if not 0.0 <= r <= 1.0:
        raise ConfigError(f"keep rate {r} outside [0, 1]", key="train.keep_rate")
    for name, t in tea.params.items():
        s = stu.params.get(name)
        if s is None:
            raise DimensionError(f"student lacks tensor {name!r}")
        if s.shape != t.shape:
            raise DimensionError(f"tensor {name!r}: teacher shape {t.shape} != student shape {s.shape}")
        mixed = r * t.data.astype(np.float64) + (1.0 - r) * s.data.astype(np.float64)
        t.data = mixed.astype(t.data.dtype)
    return tea


def generate_pseudo_labels(teacher: ModelWeights, weak_unlabeled, threshold: float, batch: int = 16) -> list:
    """Teacher detections on weakly augmented images with score strictly above ``threshold``."""
    if not weak_unlabeled:
        return []
    outputs = infer(_stack(weak_unlabeled), teacher, batch)
    return [[PseudoLabel(d.class_id, d.score, d.mask) for d in decode(p, m, threshold)] for p, m in outputs]


def semi_supervised_step(teacher: ModelWeights, student: ModelWeights, labeled, unlabeled, cfg: TrainerConfig,
                         opt: AdamWState, rng_labeled, rng_unlabeled) -> StepResult:
    """One teacher/student iteration; updates ``student`` and ``teacher`` in place.

    Unlabeled images for which no pseudo label survives the threshold add
    nothing to the loss, so with no pseudo labels this reduces to a plain
    supervised step on the labeled batch.
    """
    lab_copies = augment_batch(labeled, rng_labeled, cfg.aug)
    un_pairs = [weak_strong_pair(s, rng_unlabeled, cfg.aug)[:2] for s in unlabeled]
    pseudo = generate_pseudo_labels(teacher, [w for w, _ in un_pairs], cfg.score_threshold)
    un_copies = []
    for (weak, strong), labels in zip(un_pairs, pseudo):
        if not labels:
            continue
        ann = [InstanceAnnotation(pl.class_id, pl.mask) for pl in labels]
        un_copies += [ImageSample(weak.id, weak.image, ann), ImageSample(strong.id, strong.image, ann)]

    copies = lab_copies + un_copies
    n_lab = len(lab_copies)
    with Tape():
        pred = forward(_stack(copies), student)
        gts = [c.instances for c in copies]
        loss_l = batch_loss(pred, gts[:n_lab], cfg.loss, range(n_lab))
        loss = loss_l
        loss_u_value = 0.0
        if un_copies:
            loss_u = batch_loss(pred, gts[n_lab:], cfg.loss, range(n_lab, len(copies)))
            loss_u_value = loss_u.item()
            loss = loss_l + loss_u * cfg.unlabeled_weight
    _optimize(student, loss, opt)
    ema_update(teacher, student, cfg.keep_rate)
    return StepResult(loss.item(), pseudo, loss_l.item(), loss_u_value)


# -- stages -------------------------------------------------------------------

def _prefetching(jobs, fn: Callable, workers: int):
    """Yield ``fn(job)`` in order; with workers, the next job is prepared while the caller works."""
    if workers <= 0:
        for job in jobs:
            yield job, fn(job)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        jobs = list(jobs)
        pending = [pool.submit(fn, j) for j in jobs[:1]]
        for i, job in enumerate(jobs):
            if i + 1 < len(jobs):
                pending.append(pool.submit(fn, jobs[i + 1]))
            yield job, pending[i].result()


def _eval_due(epoch: int, last: int, interval: int) -> bool:
    return epoch == last or (interval > 0 and epoch % interval == 0)


def evaluate_weights(weights: ModelWeights, samples, score_floor: float = 0.05, batch: int = 16) -> APReport:
    dets = []
    for s, (p, m) in zip(samples, infer(_stack(samples), weights, batch)):
        dets.extend(decode(p, m, score_floor, s.id))
    return evaluate(dets, samples)


def _metric_row(stage, epoch, split, loss=None, report=None, pseudo=None, pseudo_score=None) -> dict:
    return {"stage": stage, "epoch": epoch, "split": split, "loss": loss,
            "AP": report.AP if report else None, "AP50": report.AP50 if report else None,
            "AP75": report.AP75 if report else None,
            "num_pseudo_labels": pseudo, "mean_pseudo_score": pseudo_score}


def supervised_stage(weights: ModelWeights, labeled, cfg: TrainerConfig, val=None, metrics=None,
                     opt: AdamWState | None = None) -> tuple:
    """Train ``weights`` in place on ``labeled`` for ``cfg.supervised_epochs``; returns ``(weights, opt)``."""
    if not labeled:
        raise ConfigError("supervised stage needs at least one labeled image", key="data.fraction")
    opt = opt or new_optimizer(cfg)
    metrics = metrics if metrics is not None else []
    n = len(labeled)
    for epoch in range(1, cfg.supervised_epochs + 1):
        order = _rng(cfg.seed, _ORDER_STREAM, 1, epoch).permutation(n)
        batches = [[labeled[i] for i in order[s:s + cfg.batch_size]] for s in range(0, n, cfg.batch_size)]
        jobs = list(enumerate(batches))

        def prep(job, epoch=epoch):
            step, batch = job
            return augment_batch(batch, _rng(cfg.seed, _LABELED_STREAM, 1, epoch, step), cfg.aug)

        losses = []
        with _epoch_context(STAGE_SUPERVISED, epoch):
            for _, copies in _prefetching(jobs, prep, cfg.workers):
                with Tape():
                    loss = supervised_loss(weights, copies, cfg.loss)
                value = loss.item()
                _check_finite(value, STAGE_SUPERVISED, epoch)
                _optimize(weights, loss, opt)
                losses.append(value)
        mean_loss = float(np.mean(losses))
        metrics.append(_metric_row(STAGE_SUPERVISED, epoch, "train", loss=mean_loss))
        log.info("supervised epoch %d loss %.4f", epoch, mean_loss)
        if val and _eval_due(epoch, cfg.supervised_epochs, cfg.eval_interval):
            metrics.append(_metric_row(STAGE_SUPERVISED, epoch, "val",
                                       report=evaluate_weights(weights, val, cfg.score_floor)))
    return weights, opt


def semi_stage(teacher: ModelWeights, student: ModelWeights, labeled, unlabeled, cfg: TrainerConfig,
               opt: AdamWState, val=None, metrics=None, on_step: Callable | None = None) -> tuple:
    """Run ``cfg.semi_epochs`` of teacher/student training. One epoch is one pass over the labeled set."""
    metrics = metrics if metrics is not None else []
    n_l, n_u = cfg.semi_batch
    steps_per_epoch = math.ceil(len(labeled) / n_l)
    un_order = _rng(cfg.seed, _ORDER_STREAM, 2, 0).permutation(len(unlabeled)) if unlabeled else np.zeros(0, int)
    un_cursor = 0
    for epoch in range(1, cfg.semi_epochs + 1):
        lab_order = _rng(cfg.seed, _ORDER_STREAM, 2, epoch).permutation(len(labeled))
        losses, n_pseudo, scores = [], 0, []
        for step in range(steps_per_epoch):
            idx = [lab_order[(step * n_l + k) % len(labeled)] for k in range(n_l)]
            lab_batch = [labeled[i] for i in idx]
            un_batch = []
            for _ in range(min(n_u, len(unlabeled))):
                un_batch.append(unlabeled[un_order[un_cursor % len(unlabeled)]])
                un_cursor += 1
            tea_before = teacher.copy() if on_step else None
            with _epoch_context(STAGE_SEMI, epoch):
                result = semi_supervised_step(teacher, student, lab_batch, un_batch, cfg, opt,
                                              _rng(cfg.seed, _LABELED_STREAM, 2, epoch, step),
                                              _rng(cfg.seed, _UNLABELED_STREAM, 2, epoch, step))
                _check_finite(result.loss, STAGE_SEMI, epoch)
            if on_step:
                on_step(epoch, step, tea_before, teacher, student, result)
            losses.append(result.loss)
            n_pseudo += result.num_pseudo
            scores += result.pseudo_scores
        mean_loss = float(np.mean(losses)) if losses else 0.0
        mean_score = float(np.mean(scores)) if scores else 0.0
        metrics.append(_metric_row(STAGE_SEMI, epoch, "train", loss=mean_loss, pseudo=n_pseudo,
                                   pseudo_score=mean_score))
        log.info("semi epoch %d loss %.4f pseudo %d", epoch, mean_loss, n_pseudo)
        if val and _eval_due(epoch, cfg.semi_epochs, cfg.eval_interval):
            metrics.append(_metric_row(STAGE_SEMI, epoch, "val", report=evaluate_weights(teacher, val, cfg.score_floor)))
    return teacher, student


def prepare_aug(cfg: TrainerConfig, labeled) -> None:
    """Erase fill defaults to the labeled set's per-channel mean."""
    cfg.aug.fill = dataset_mean(labeled)


def start_semi(stage1: ModelWeights) -> tuple:
    """Teacher and student both start as bitwise copies of the stage-1 weights."""
    teacher = stage1.copy(requires_grad=False)
    student = stage1.copy(requires_grad=True)
    return teacher, student


def two_stage_train(samples, split, cfg: TrainerConfig, weights: ModelWeights, val=None,
                    two_stage: bool = True, out_dir=None, on_step=None) -> TrainResult:
    """Stage 1 trains ``weights`` on the labeled split; stage 2 refines teacher and student.

    With ``out_dir``, checkpoints ``stage1.ckpt``, ``stage1_optimizer.ckpt``,
    ``teacher.ckpt``, ``student.ckpt`` and ``optimizer.ckpt`` are written.
    """
    by_id = {s.id: s for s in samples}
    labeled = [by_id[i] for i in split.labeled_ids]
    unlabeled = [by_id[i] for i in split.unlabeled_ids]
    prepare_aug(cfg, labeled)
    metrics: list = []
    stage1, opt = supervised_stage(weights, labeled, cfg, val, metrics)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        checkpoint.save_weights(out / "stage1.ckpt", stage1)
        checkpoint.save_optimizer(out / "stage1_optimizer.ckpt", opt)
    stage1_copy = stage1.copy()
    teacher, student = start_semi(stage1)
    if two_stage and cfg.semi_epochs > 0:
        semi_stage(teacher, student, labeled, unlabeled, cfg, opt, val, metrics, on_step)
    if out is not None:
        checkpoint.save_weights(out / "teacher.ckpt", teacher)
        checkpoint.save_weights(out / "student.ckpt", student)
        checkpoint.save_optimizer(out / "optimizer.ckpt", opt)
    return TrainResult(teacher, student, metrics, stage1_copy, opt)
