"""The three training stages and the plain (no teacher) baseline.

* :func:`pretrain_ap` -- multi-head pretraining, one binary head per disease.
* :func:`finetune_rf` -- weight surgery from the pretrained net, then
  3-class softmax training.
* :func:`distill_ms` -- compact student trained on the distillation
  objective against the frozen fine-tuned teacher.
* :func:`train_plain` -- the student alone.

All of them go through :func:`fit`, a minibatch loop whose every random
draw (shuffle order, dropout masks) comes from ``default_rng([seed,
epoch])``. That makes runs reproducible and lets a run resume from a saved
:class:`TrainState` bit for bit.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses, nets
from .datakit import Dataset
from .losses import DistillConfig
from .nets import NetworkSpec, WeightBundle

#: Default mapping of fine-tuned classes to pretrained heads.
DEFAULT_HEAD_MAPPING = {"pneumonia": "pneumonia", "covid": nets.RANDOM, "normal": nets.RANDOM}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    momentum: float = 0.9
    #: feature-layer dropout; the trajectory classifier sets its own 0.5
    dropout_rate: float = 0.0
    seed: int = 0
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float | None
    wall_time: float


@dataclass
class TrainState:
    """Everything needed to continue a run: weights, optimiser moments, history."""

    bundle: WeightBundle
    moment1: dict
    moment2: dict
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)
    best_bundle: WeightBundle | None = None
    best_accuracy: float = -1.0
    best_epoch: int = 0

    @classmethod
    def start(cls, bundle: WeightBundle):
        zeros = {k: np.zeros_like(v) for k, v in bundle.entries.items()}
        return cls(bundle.copy(), zeros, {k: v.copy() for k, v in zeros.items()})

    @property
    def selected(self) -> WeightBundle:
        """Best-validation bundle when validation ran, else the latest one."""
        return self.best_bundle if self.best_bundle is not None else self.bundle


@dataclass
class TrainResult:
    bundle: WeightBundle
    state: TrainState

    @property
    def history(self):
        return self.state.history


def save_state(state: TrainState, path):
    entries = {}
    for prefix, d in (("w", state.bundle.entries), ("m", state.moment1), ("v", state.moment2)):
        entries.update({f"{prefix}/{k}": v for k, v in d.items()})
    if state.best_bundle is not None:
        entries.update({f"best/{k}": v for k, v in state.best_bundle.entries.items()})
    extra = {
        "step": state.step, "epoch": state.epoch,
        "best_accuracy": state.best_accuracy, "best_epoch": state.best_epoch,
        "has_best": state.best_bundle is not None,
        "history": [[r.epoch, r.train_loss, r.val_accuracy, r.wall_time] for r in state.history],
    }
    nets.save_checkpoint(WeightBundle(entries, state.bundle.spec_fingerprint, state.bundle.seed), path, extra)


def load_state(path, spec: NetworkSpec | None = None) -> TrainState:
    raw, extra = nets.load_checkpoint(path, with_extra=True)

    def part(prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in raw.entries.items() if k.startswith(prefix + "/")}

    bundle = WeightBundle(part("w"), raw.spec_fingerprint, raw.seed)
    if spec is not None:
        nets.check_bundle(spec, bundle)
    best = WeightBundle(part("best"), raw.spec_fingerprint, raw.seed) if extra["has_best"] else None
    return TrainState(bundle, part("m"), part("v"), extra["step"], extra["epoch"],
                      [EpochRecord(*r) for r in extra["history"]], best,
                      extra["best_accuracy"], extra["best_epoch"])


def write_log(history, path):
    lines = ["epoch\ttrain_loss\tval_accuracy\twall_time_s"]
    for r in history:
        acc = "" if r.val_accuracy is None else f"{r.val_accuracy:.6f}"
        lines.append(f"{r.epoch}\t{r.train_loss:.8f}\t{acc}\t{r.wall_time:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _update(state: TrainState, grads, config: TrainConfig, trainable):
    state.step += 1
    lr = config.learning_rate
    e = state.bundle.entries
    if config.optimizer == "adam":
        b1, b2 = config.beta1, config.beta2
        c1 = 1.0 - b1 ** state.step
        c2 = 1.0 - b2 ** state.step
        for k in trainable:
            g = grads[k]
            m = state.moment1[k]
            v = state.moment2[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            e[k] = e[k] - lr * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    else:
        for k in trainable:
            buf = state.moment1[k]
            buf *= config.momentum
            buf += grads[k]
            e[k] = e[k] - lr * buf


def predict_logits(spec: NetworkSpec, bundle: WeightBundle, images, batch_size=256):
    """Evaluation-mode logits for a stack of inputs, computed in chunks."""
    x = np.asarray(images, dtype=np.float64)
    if len(x) == 0:
        return np.zeros((0, len(spec.class_heads)))
    return np.concatenate([nets.forward_trace(spec, bundle, x[i:i + batch_size])[0].logits
                           for i in range(0, len(x), batch_size)])


def predict_features(spec: NetworkSpec, bundle: WeightBundle, images, batch_size=256):
    x = np.asarray(images, dtype=np.float64)
    return np.concatenate([nets.forward_trace(spec, bundle, x[i:i + batch_size])[0].features
                           for i in range(0, len(x), batch_size)])


def evaluate_accuracy(spec, bundle, images, labels):
    logits = predict_logits(spec, bundle, images)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


Objective = Callable[[np.ndarray, np.ndarray], tuple]


def fit(spec: NetworkSpec, bundle: WeightBundle, inputs, objective: Objective, config: TrainConfig,
        val=None, state: TrainState | None = None, until_epoch: int | None = None) -> TrainState:
    """Minibatch training loop.

    ``objective(logits, batch_indices)`` returns the batch loss and its
    gradient w.r.t. the logits. ``val`` is an optional ``(inputs, labels)``
    pair scored after each epoch; the best epoch (ties -> earliest) is kept
    in ``state.best_bundle``. Pass a previous ``state`` to resume, and
    ``until_epoch`` to stop early (for checkpointing).
    """
    nets.check_bundle(spec, bundle)
    x = np.asarray(inputs, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    state = state or TrainState.start(bundle)
    stop = config.epochs if until_epoch is None else min(until_epoch, config.epochs)
    trainable = sorted(state.bundle.entries)
    if config.freeze_backbone:
        trainable = [k for k in trainable if k.startswith("head.")]
    while state.epoch < stop:
        epoch = state.epoch + 1
        t0 = time.perf_counter()
        rng = np.random.default_rng([int(config.seed) & 0xFFFFFFFF, epoch])
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            out, trace = nets.forward_trace(spec, state.bundle, x[idx], training=True, rng=rng,
                                            feature_dropout=config.dropout_rate)
            loss, dlogits = objective(out.logits, idx)
            # objectives return batch means; scale to keep the epoch mean exact
            total += loss * len(idx)
            grads = nets.backward(spec, state.bundle, trace, dlogits)
            _update(state, grads, config, trainable)
        val_acc = None
        if val is not None:
            val_acc = evaluate_accuracy(spec, state.bundle, *val)
            if val_acc > state.best_accuracy:
                state.best_accuracy, state.best_epoch = val_acc, epoch
                state.best_bundle = state.bundle.copy()
        state.epoch = epoch
        state.history.append(EpochRecord(epoch, total / n, val_acc, time.perf_counter() - t0))
    return state


def _val_arrays(val: Dataset | None, class_names):
    if val is None or len(val) == 0:
        return None
    if tuple(val.class_names) != tuple(class_names):
        raise ValueError("validation classes differ from training classes")
    return val.arrays()


def pretrain_ap(spec: NetworkSpec, dataset: Dataset, config: TrainConfig, val: Dataset | None = None,
                state: TrainState | None = None, until_epoch=None) -> TrainResult:
    """Multi-head pretraining: independent binary cross-entropy per class head."""
    if tuple(dataset.class_names) != tuple(spec.class_heads):
        raise ValueError(f"dataset classes {dataset.class_names} do not match heads {spec.class_heads}")
    x, y = dataset.arrays()
    targets = np.eye(len(spec.class_heads))[y]

    def objective(logits, idx):
        return losses.bce_with_logits_grad(logits, targets[idx])

    start = nets.init_weights(spec, config.seed)
    state = fit(spec, start, x, objective, config, _val_arrays(val, dataset.class_names), state, until_epoch)
    return TrainResult(state.selected, state)


def _check_classes(spec, dataset):
    if tuple(dataset.class_names) != tuple(spec.class_heads):
        raise ValueError(f"dataset classes {dataset.class_names} do not match heads {spec.class_heads}")


def rf_initial_weights(ap_bundle, ap_spec, rf_spec, head_mapping=None, seed=0, transfer=True):
    if not transfer:
        return nets.init_weights(rf_spec, seed)
    mapping = dict(DEFAULT_HEAD_MAPPING if head_mapping is None else head_mapping)
    return nets.transfer_weights(ap_bundle, ap_spec, rf_spec, mapping, seed, copy_backbone=transfer)


def finetune_rf(ap_bundle: WeightBundle, ap_spec: NetworkSpec, rf_spec: NetworkSpec, dataset: Dataset,
                config: TrainConfig, head_mapping=None, val: Dataset | None = None, transfer=True,
                state: TrainState | None = None, until_epoch=None) -> TrainResult:
    """Transfer pretrained weights into the 3-class net, then train it with softmax loss.

    ``transfer=False`` skips the surgery (every entry freshly initialised
    from ``config.seed``), i.e. training from scratch.
    """
    _check_classes(rf_spec, dataset)
    start = rf_initial_weights(ap_bundle, ap_spec, rf_spec, head_mapping, config.seed, transfer)
    x, y = dataset.arrays()

    def objective(logits, idx):
        return losses.softmax_ce_grad(logits, y[idx])

    state = fit(rf_spec, start, x, objective, config, _val_arrays(val, dataset.class_names), state, until_epoch)
    return TrainResult(state.selected, state)


def student_spec_check(ms_spec: NetworkSpec, dconfig: DistillConfig):
    if dconfig.student_loss == "arcface":
        if ms_spec.head_kind != "cosine":
            raise ValueError("the arcface student loss needs a cosine-head network")
        if ms_spec.head_scale != dconfig.arcface.scale_s:
            raise ValueError("cosine head scale must equal the arcface scale")


def distill_ms(rf_bundle: WeightBundle, rf_spec: NetworkSpec, ms_spec: NetworkSpec, dataset: Dataset,
               dconfig: DistillConfig, tconfig: TrainConfig, val: Dataset | None = None,
               state: TrainState | None = None, until_epoch=None) -> TrainResult:
    """Train the student against the distillation objective.

    Teacher logits are computed once, in evaluation mode, before training;
    the teacher bundle is only read.
    """
    if len(rf_spec.class_heads) != len(ms_spec.class_heads):
        raise ValueError("teacher and student class counts differ")
    _check_classes(ms_spec, dataset)
    student_spec_check(ms_spec, dconfig)
    x, y = dataset.arrays()
    teacher = predict_logits(rf_spec, rf_bundle, x) if dconfig.alpha > 0 else np.zeros((len(y), len(ms_spec.class_heads)))

    def objective(logits, idx):
        return losses.kd_loss_grad(logits, teacher[idx], y[idx], dconfig)

    start = nets.init_weights(ms_spec, tconfig.seed)
    state = fit(ms_spec, start, x, objective, tconfig, _val_arrays(val, dataset.class_names), state, until_epoch)
    return TrainResult(state.selected, state)


def train_plain(ms_spec: NetworkSpec, dataset: Dataset, loss_kind: str, tconfig: TrainConfig,
                val: Dataset | None = None, dconfig: DistillConfig | None = None,
                state: TrainState | None = None, until_epoch=None) -> TrainResult:
    """The student alone: its classification loss, no teacher."""
    base = dconfig or DistillConfig()
    dc = replace(base, alpha=0.0, student_loss=loss_kind)
    _check_classes(ms_spec, dataset)
    student_spec_check(ms_spec, dc)
    x, y = dataset.arrays()

    def objective(logits, idx):
        return losses.classification_loss_grad(logits, y[idx], dc)

    start = nets.init_weights(ms_spec, tconfig.seed)
    state = fit(ms_spec, start, x, objective, tconfig, _val_arrays(val, dataset.class_names), state, until_epoch)
    return TrainResult(state.selected, state)


def epochs_to_reach(history, threshold):
    """First epoch whose validation accuracy is >= ``threshold`` (None if never)."""
    for r in history:
        if r.val_accuracy is not None and r.val_accuracy >= threshold:
            return r.epoch
    return None


# ---------------------------------------------------------------- default nets

def ap_spec(image_size=32, heads=None, feature_width=64):
    from .datakit import AP_DISEASES
    return nets.conv_backbone((1, image_size, image_size), (8, 16, 16), feature_width,
                              heads=AP_DISEASES if heads is None else heads)


def rf_spec(image_size=32, heads=("covid", "pneumonia", "normal"), feature_width=64):
    return nets.conv_backbone((1, image_size, image_size), (8, 16, 16), feature_width, heads=heads)


def ms_spec(image_size=32, heads=("covid", "pneumonia", "normal"), loss_kind="softmax",
            feature_width=32, arcface_scale=30.0):
    """Compact student: narrower convs and a smaller feature layer."""
    kind = "cosine" if loss_kind == "arcface" else "linear"
    return nets.conv_backbone((1, image_size, image_size), (4, 8, 8), feature_width, heads=heads,
                              head_kind=kind, head_scale=arcface_scale)
