"""SGD with momentum, the CV-monitored epoch loop, metrics and the gradient diagnostic."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import AlignmentError, ShapeError
from .layers import ce_hard, ce_soft, check_distribution, logit_match, softmax_t
from .models import restore, snapshot
from .numerics import Pcg32

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


@dataclass
class SgdConfig:
    """Optimizer and schedule settings.

    ``min_improvement`` is in accuracy fraction (0.002 = 0.2 percentage
    points). ``clip_norm=None`` means 5.0 for recurrent models and no
    clipping otherwise.
    """

    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 256
    max_epochs: int = 20
    min_improvement: float = 0.002
    halving_factor: float = 0.5
    min_lr_ratio: float = 1.0 / 64
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be positive and max_epochs non-negative")


class EpochRecord(NamedTuple):
    epoch: int
    learning_rate: float
    train_loss: float
    tr_fa: float
    cv_fa: float


@dataclass
class History:
    """Per-epoch records; ``initial`` holds the evaluation before epoch 1."""

    records: list = field(default_factory=list)
    initial: EpochRecord | None = None
    best_epoch: int = 0

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def loss_trace(self):
        rows = ([self.initial] if self.initial else []) + self.records
        return [r.train_loss for r in rows]

    def extend(self, other: "History"):
        offset = self.records[-1].epoch if self.records else 0
        if other.initial and self.initial is None:
            self.initial = other.initial
        elif other.initial:
            self.records.append(other.initial._replace(epoch=offset))
        self.records.extend(r._replace(epoch=r.epoch + offset) for r in other.records)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EpochRecord._fields)
            for r in ([self.initial] if self.initial else []) + self.records:
                w.writerow([r.epoch, repr(r.learning_rate), repr(r.train_loss), repr(r.tr_fa), repr(r.cv_fa)])


@dataclass
class TrainingState:
    velocity: list
    learning_rate: float
    rng: Pcg32
    epoch: int = 0
    best_cv_fa: float = -1.0
    halving: bool = False


@dataclass
class Metrics:
    train_frame_accuracy: float
    cv_frame_accuracy: float
    test_error_rate: float
    test_segment_error_rate: float | None = None


class HardLoss:
    name = "hard"

    def check(self, split):
        pass

    def __call__(self, logits, split, idx):
        return ce_hard(split.all_labels[idx], logits)


class SoftLoss:
    """Cross-entropy against cached teacher posteriors.

    The student softmax runs at ``temperature`` (default: the temperature
    the targets were generated at).
    """

    name = "soft"

    def __init__(self, targets, temperature=None):
        self.posteriors = np.asarray(targets.posteriors, dtype=np.float64)
        check_distribution(self.posteriors)
        self.temperature = float(targets.temperature if temperature is None else temperature)

    def check(self, split):
        if self.posteriors.shape[0] != split.num_frames:
            raise AlignmentError(f"{self.posteriors.shape[0]} soft-target rows for "
                                 f"{split.num_frames} training frames")
        if self.posteriors.shape[1] != split.num_classes:
            raise ShapeError(f"soft targets have {self.posteriors.shape[1]} classes, "
                             f"data has {split.num_classes}")

    def __call__(self, logits, split, idx):
        return ce_soft(self.posteriors[idx], logits, self.temperature, validate=False)


class LogitMatchLoss:
    name = "logit-match"

    def __init__(self, teacher_logits):
        self.teacher_logits = np.asarray(teacher_logits, dtype=np.float64)

    def check(self, split):
        if self.teacher_logits.shape[0] != split.num_frames:
            raise AlignmentError(f"{self.teacher_logits.shape[0]} teacher logit rows for "
                                 f"{split.num_frames} training frames")

    def __call__(self, logits, split, idx):
        return logit_match(self.teacher_logits[idx], logits)


def sgd_momentum_step(params, grads, velocity, learning_rate, momentum):
    """Classical momentum in place: ``v = mu*v - lr*g; theta += v``."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError("params, grads and velocity lists differ in length")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v -= learning_rate * g
        p += v


def clip_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def dataset_logits(model, split):
    """Logits for every frame of ``split`` in flattened order, without caching."""
    if not model.sequential:
        return model.forward_logits(split.all_frames, cache=False)
    out = []
    for start in range(0, split.num_sequences, EVAL_CHUNK):
        out.append(model.forward_logits(split.frames[start:start + EVAL_CHUNK], cache=False))
    return np.concatenate(out, axis=0)


def frame_accuracy_from_logits(logits, labels):
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def frame_accuracy(model, split) -> float:
    """Fraction of frames whose arg-max prediction equals the label."""
    return frame_accuracy_from_logits(dataset_logits(model, split), split.all_labels)


def _collapse(labels):
    labels = np.asarray(labels)
    keep = np.ones(labels.size, dtype=bool)
    keep[1:] = labels[1:] != labels[:-1]
    return labels[keep]


def _edit_distance(a, b):
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def segment_error_rate(model, split) -> float:
    """Edit distance between run-length-collapsed predicted and true label
    strings, over total reference segments; a word-error-rate analogue that
    can exceed 1."""
    logits = dataset_logits(model, split)
    pred = np.argmax(logits, axis=1)
    errors = total = 0
    for s in range(split.num_sequences):
        lo, hi = split.offsets[s], split.offsets[s + 1]
        ref = _collapse(split.labels[s])
        errors += _edit_distance(_collapse(pred[lo:hi]).tolist(), ref.tolist())
        total += ref.size
    return errors / total


def evaluate_metrics(model, splits, *, segments=False) -> Metrics:
    return Metrics(
        train_frame_accuracy=frame_accuracy(model, splits.train),
        cv_frame_accuracy=frame_accuracy(model, splits.cv),
        test_error_rate=1.0 - frame_accuracy(model, splits.test),
        test_segment_error_rate=segment_error_rate(model, splits.test) if segments else None,
    )


def _minibatches(model, split, batch_size, rng: Pcg32):
    if model.sequential:
        order = rng.permutation(split.num_sequences)
        off = split.offsets
        for start in range(0, order.size, batch_size):
            chunk = order[start:start + batch_size]
            idx = np.concatenate([np.arange(off[s], off[s + 1]) for s in chunk])
            yield [split.frames[s] for s in chunk], idx
    else:
        order = rng.permutation(split.num_frames)
        frames = split.all_frames
        for start in range(0, order.size, batch_size):
            idx = order[start:start + batch_size]
            yield frames[idx], idx


def _evaluate(model, loss_fn, splits, epoch, lr):
    train = splits.train
    logits = dataset_logits(model, train)
    loss, _ = loss_fn(logits, train, np.arange(train.num_frames))
    tr_fa = frame_accuracy_from_logits(logits, train.all_labels)
    cv_fa = frame_accuracy(model, splits.cv)
    return EpochRecord(epoch, lr, loss, tr_fa, cv_fa)


def run_training(model, loss_fn, splits, config: SgdConfig, rng: Pcg32):
    """Train in place; returns ``(model, history)``.

    Schedule: hold the learning rate while CV frame accuracy improves on
    the best so far by at least ``min_improvement``; after the first epoch
    that does not, multiply it by ``halving_factor`` every epoch and stop
    once it drops below ``learning_rate * min_lr_ratio``. The parameters of
    the best-CV epoch (possibly the starting point) are restored at the end.
    """
    train, cv = splits[0], splits[1]
    if train is None or cv is None or train.num_frames == 0 or cv.num_frames == 0:
        raise ValueError("training needs non-empty train and cv splits")
    loss_fn.check(train)
    history = History()
    if config.max_epochs == 0:
        return model, history
    clip = config.clip_norm if config.clip_norm is not None else (5.0 if model.sequential else None)
    params = model.parameters()
    grads = model.gradients()
    state = TrainingState([np.zeros_like(p) for p in params], config.learning_rate, rng)
    history.initial = _evaluate(model, loss_fn, splits, 0, state.learning_rate)
    state.best_cv_fa = history.initial.cv_fa
    best = snapshot(model)
    floor = config.learning_rate * config.min_lr_ratio
    for epoch in range(1, config.max_epochs + 1):
        lr = state.learning_rate
        for xb, idx in _minibatches(model, train, config.batch_size, rng):
            model.zero_grad()
            logits = model.forward_logits(xb)
            _, g = loss_fn(logits, train, idx)
            model.backward(g)
            if clip is not None:
                clip_global_norm(grads, clip)
            sgd_momentum_step(params, grads, state.velocity, lr, config.momentum)
        rec = _evaluate(model, loss_fn, splits, epoch, lr)
        history.records.append(rec)
        state.epoch = epoch
        log.debug("epoch %d lr=%.3g loss=%.4f tr_fa=%.4f cv_fa=%.4f", *rec)
        gain = rec.cv_fa - state.best_cv_fa
        if rec.cv_fa > state.best_cv_fa:
            state.best_cv_fa = rec.cv_fa
            history.best_epoch = epoch
            best = snapshot(model)
        if gain < config.min_improvement:
            state.halving = True
        if state.halving:
            state.learning_rate *= config.halving_factor
            if state.learning_rate < floor:
                break
    restore(model, best)
    return model, history


def run_phases(model, phases, splits, rng: Pcg32):
    """Consecutive training phases ``[(loss_fn, config), ...]`` as one run.

    Each phase restarts the optimizer state and schedule; epochs are
    numbered continuously and the shuffling stream is shared.
    """
    history = History()
    for loss_fn, config in phases:
        _, h = run_training(model, loss_fn, splits, config, rng)
        history.extend(h)
    return model, history


@dataclass
class DiagnosticRow:
    temperature: float
    variance: float
    mean_norm: float
    frames: int


def gradient_variance_diagnostic(model, sample, temperatures, targets):
    """Spread of per-frame output gradients ``(q - p)/T`` at each temperature.

    ``sample`` is a frame matrix (or a list of sequences for recurrent
    models); ``targets`` maps each temperature to an aligned posterior
    matrix. ``variance`` is the mean squared distance of a frame's gradient
    row from the across-frame mean row; ``mean_norm`` the mean L2 norm.
    """
    logits = model.forward_logits(sample, cache=False)
    rows = []
    for t in temperatures:
        p = np.asarray(targets[t], dtype=np.float64)
        if p.shape != logits.shape:
            raise AlignmentError(f"targets at T={t} have shape {p.shape}, logits {logits.shape}")
        g = (softmax_t(logits, t) - p) / t
        centred = g - g.mean(axis=0, keepdims=True)
        rows.append(DiagnosticRow(
            temperature=float(t),
            variance=float(np.mean(np.sum(centred * centred, axis=1))),
            mean_norm=float(np.mean(np.sqrt(np.sum(g * g, axis=1)))),
            frames=int(g.shape[0]),
        ))
    return rows
