"""Pre-training procedures: knowledge transfer from a teacher's soft targets,
RBM stacking, layer-wise discriminative growth, and the RBM-then-transfer
combination, plus hard-target fine-tuning."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError, UnsupportedVersionError
from .layers import AffineLayer, check_distribution, check_temperature, softmax_t
from .models import Mlp, Rbm, clone, rbm_cd1_step, reinit_output_layer, stack_rbms_into_mlp
from .numerics import Pcg32
from .train import HardLoss, LogitMatchLoss, SgdConfig, SoftLoss, dataset_logits, run_training

log = logging.getLogger(__name__)

TARGETS_MAGIC = b"KTST"
TARGETS_VERSION = 1
STRATEGIES = ("raw", "kt", "rbm", "discriminative", "rbm_then_kt")


@dataclass(eq=False)
class SoftTargetSet:
    """Teacher posteriors, one row per frame in the dataset's flattened order."""

    posteriors: np.ndarray
    temperature: float
    teacher_id: str = "teacher"

    def __post_init__(self):
        self.posteriors = np.ascontiguousarray(self.posteriors, dtype=np.float64)
        if self.posteriors.ndim != 2:
            raise ShapeError(f"posteriors must be 2-D, got {self.posteriors.shape}")
        self.temperature = check_temperature(self.temperature)
        check_distribution(self.posteriors)

    @property
    def num_frames(self):
        return self.posteriors.shape[0]

    @property
    def num_classes(self):
        return self.posteriors.shape[1]


def save_soft_targets(targets: SoftTargetSet, path):
    tid = targets.teacher_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TARGETS_MAGIC)
        fh.write(struct.pack("<IQId", TARGETS_VERSION, targets.num_frames, targets.num_classes,
                             targets.temperature))
        fh.write(struct.pack("<I", len(tid)) + tid)
        fh.write(targets.posteriors.astype("<f8").tobytes())


def load_soft_targets(path) -> SoftTargetSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != TARGETS_MAGIC:
        raise FormatError(f"{path}: not a soft-target file", offset=0)
    head = struct.calcsize("<IQId")
    if len(data) < 4 + head + 4:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    version, n, k, t = struct.unpack_from("<IQId", data, 4)
    if version != TARGETS_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported soft-target version {version}", offset=4)
    pos = 4 + head
    (tlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if pos + tlen > len(data):
        raise FormatError(f"{path}: truncated teacher id", offset=pos)
    try:
        tid = data[pos:pos + tlen].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: teacher id is not UTF-8", offset=pos) from None
    pos += tlen
    need = 8 * n * k
    if len(data) - pos != need:
        raise FormatError(f"{path}: expected {need} bytes of posteriors, found {len(data) - pos}",
                          offset=pos)
    post = np.frombuffer(data, dtype="<f8", offset=pos).astype(np.float64).reshape(n, k)
    return SoftTargetSet(post, t, tid)


def generate_soft_targets(teacher, split, t, teacher_id="teacher") -> SoftTargetSet:
    """Teacher posteriors at temperature ``t`` for every frame of ``split``."""
    if teacher.input_dim != split.feature_dim:
        raise ShapeError(f"teacher expects {teacher.input_dim} features, data has {split.feature_dim}")
    return SoftTargetSet(softmax_t(dataset_logits(teacher, split), t), t, teacher_id)


def kt_pretrain(student, targets: SoftTargetSet, splits, config: SgdConfig, rng: Pcg32, *,
                student_temperature=None, teacher_logits=None):
    """Train ``student`` on soft targets (or on teacher logits when given).

    The student softmax uses the targets' temperature unless
    ``student_temperature`` overrides it.
    """
    if teacher_logits is not None:
        loss = LogitMatchLoss(teacher_logits)
    else:
        loss = SoftLoss(targets, student_temperature)
    return run_training(student, loss, splits, config, rng)


def fine_tune(student, splits, config: SgdConfig, reinit_output: bool, rng: Pcg32):
    """Hard-label training at T=1, optionally redrawing the output layer first."""
    if reinit_output:
        reinit_output_layer(student, rng)
    return run_training(student, HardLoss(), splits, config, rng)


@dataclass
class CdConfig:
    learning_rate: float = 0.05
    epochs: int = 5
    batch_size: int = 64


def train_rbm(rbm: Rbm, data, config: CdConfig, rng: Pcg32):
    """CD-1 over shuffled minibatches; per-epoch mean reconstruction error
    is appended to ``rbm.history``."""
    n = data.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            total += rbm_cd1_step(rbm, data[idx], config.learning_rate, rng) * idx.size
        rbm.history.append(total / n)
    return rbm


def rbm_pretrain(layer_sizes, train_split, config: CdConfig, rng: Pcg32):
    """Greedy bottom-up RBM stack: Gaussian visible units on the (standardized)
    features, Bernoulli above, each trained on the probabilities of the one below."""
    data = train_split.all_frames
    rbms = []
    prev = train_split.feature_dim
    for i, size in enumerate(layer_sizes):
        rbm = Rbm.init(prev, size, rng, "gaussian" if i == 0 else "bernoulli")
        train_rbm(rbm, data, config, rng)
        log.debug("rbm %d reconstruction errors %s", i, rbm.history)
        rbms.append(rbm)
        data = rbm.hidden_probs(data)
        prev = size
    return rbms


def discriminative_pretrain(hidden_sizes, splits, config: SgdConfig, rng: Pcg32, *,
                            on_grow=None):
    """Grow an MLP one sigmoid layer at a time.

    Each step adds a fresh hidden layer and a fresh output layer (in that
    draw order) and trains the whole stack on hard labels. ``on_grow``, if
    given, sees each new model before it is trained.
    """
    train = splits[0]
    d, k = train.feature_dim, train.num_classes
    hidden = []
    model = None
    for size in hidden_sizes:
        prev = hidden[-1].out_dim if hidden else d
        hidden.append(AffineLayer.init(prev, size, rng))
        model = Mlp(hidden, AffineLayer.init(size, k, rng))
        if on_grow is not None:
            on_grow(model)
        run_training(model, HardLoss(), splits, config, rng)
        hidden = list(model.hidden_layers)
    return model


def combined_pretrain(layer_sizes, splits, targets: SoftTargetSet, cd_config: CdConfig,
                      kt_config: SgdConfig, rng: Pcg32):
    """RBM stack, copied into an MLP, then soft-target training of the whole net."""
    train = splits[0]
    rbms = rbm_pretrain(layer_sizes, train, cd_config, rng)
    model = stack_rbms_into_mlp(rbms, train.num_classes, rng)
    kt_pretrain(model, targets, splits, kt_config, rng)
    return model


@dataclass
class PretrainPlan:
    strategy: str = "raw"
    temperature: float | None = None
    reinit_output: bool = True
    teacher_model_path: str | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        needs_t = self.strategy in ("kt", "rbm_then_kt")
        if needs_t and self.temperature is None:
            raise ValueError(f"strategy {self.strategy!r} needs a temperature")
        if not needs_t and self.temperature is not None:
            raise ValueError(f"strategy {self.strategy!r} takes no temperature")
        if self.temperature is not None:
            check_temperature(self.temperature)


@dataclass
class PhaseConfigs:
    pretrain: SgdConfig
    finetune: SgdConfig
    cd: CdConfig
    discriminative: SgdConfig | None = None


def pretrain_only(plan: PretrainPlan, student, splits, configs: PhaseConfigs, rng: Pcg32, *,
                  targets: SoftTargetSet | None = None, hidden_sizes=None):
    """The pre-training half of :func:`run_plan`; returns the model to fine-tune.

    ``student`` is a freshly initialised model for ``raw``/``kt``; the
    layer-wise strategies build their own MLP from ``hidden_sizes`` and
    ignore it.
    """
    s = plan.strategy
    if s in ("kt", "rbm_then_kt") and targets is None:
        raise ValueError(f"strategy {s!r} needs soft targets")
    if s in ("rbm", "discriminative", "rbm_then_kt") and not hidden_sizes:
        raise ValueError(f"strategy {s!r} needs hidden_sizes")
    if s == "raw":
        return student
    if s == "kt":
        kt_pretrain(student, targets, splits, configs.pretrain, rng)
        return student
    if s == "rbm":
        rbms = rbm_pretrain(hidden_sizes, splits[0], configs.cd, rng)
        return stack_rbms_into_mlp(rbms, splits[0].num_classes, rng)
    if s == "discriminative":
        return discriminative_pretrain(hidden_sizes, splits, configs.discriminative or configs.pretrain, rng)
    return combined_pretrain(hidden_sizes, splits, targets, configs.cd, configs.pretrain, rng)


def run_plan(plan: PretrainPlan, student, splits, configs: PhaseConfigs, rng: Pcg32, *,
             targets: SoftTargetSet | None = None, hidden_sizes=None):
    """Uniform entry point: pre-train per ``plan`` then fine-tune.

    Returns ``(pretrained_copy_or_None, final_model)``.
    """
    model = pretrain_only(plan, student, splits, configs, rng, targets=targets, hidden_sizes=hidden_sizes)
    pretrained = None if plan.strategy == "raw" else clone(model)
    # only transfer strategies leave an output layer fitted to soft targets
    reinit = plan.reinit_output and plan.strategy in ("kt", "rbm_then_kt")
    fine_tune(model, splits, configs.finetune, reinit, rng)
    return pretrained, model
