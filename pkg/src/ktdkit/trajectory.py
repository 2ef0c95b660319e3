"""Follow-up: trajectory labels, sequence windows, feature aggregation, classifiers.

Every image in a sequence goes through the frozen student network to get
its feature vector; the per-image features are then either differenced
(last minus second-last) or concatenated into four chronological slots,
with missing leading slots left at zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from scipy.optimize import minimize

from . import losses, nets
from .datakit import TRAJECTORY_LABELS, ScoredImage
from .nets import NetworkSpec, StateError, WeightBundle
from .pipeline import TrainConfig, fit, predict_features

#: Score change above which a follow-up counts as worse (below minus it: improved).
SCORE_THRESHOLD = 0.3
MAX_LENGTH = 4
SCHEMES = ("difference", "concatenation")


def label_from_scores(s_prev, s_last):
    """Trajectory label from two consecutive opacity scores.

    A rise of more than 0.3 is ``"Worse"``, a fall of more than 0.3
    ``"Improved"``; anything in between, boundaries included, ``"Stable"``.
    """
    if not (math.isfinite(s_prev) and math.isfinite(s_last)):
        raise ValueError("scores must be finite")
    d = s_last - s_prev
    if d > SCORE_THRESHOLD:
        return "Worse"
    if d < -SCORE_THRESHOLD:
        return "Improved"
    return "Stable"


@dataclass
class TrajectorySequence:
    patient_id: str
    images: list
    label: str

    def __post_init__(self):
        if not 1 <= len(self.images) <= MAX_LENGTH:
            raise ValueError(f"sequence length must be 1..{MAX_LENGTH}, got {len(self.images)}")
        if self.label not in TRAJECTORY_LABELS:
            raise ValueError(f"unknown trajectory label {self.label!r}")
        if len(self.images) >= 2:
            expect = label_from_scores(self.images[-2].opacity_score, self.images[-1].opacity_score)
            if expect != self.label:
                raise ValueError(f"label {self.label!r} contradicts last two scores ({expect!r})")

    @property
    def class_label(self):
        return self.label


def build_sequences(patient_images: Sequence[ScoredImage]) -> list:
    """One labelled window per timepoint after the first.

    The window ending at timepoint ``t`` keeps the (up to) four most recent
    images and is labelled from its last two scores.
    """
    if not patient_images:
        raise ValueError("need at least one image")
    tps = [im.timepoint for im in patient_images]
    if len(set(tps)) != len(tps):
        raise ValueError("duplicate timepoints")
    if any(b <= a for a, b in zip(tps, tps[1:])):
        raise ValueError("timepoints must be strictly increasing")
    pid = patient_images[0].image.patient_id
    out = []
    for end in range(1, len(patient_images)):
        window = list(patient_images[max(0, end - MAX_LENGTH + 1):end + 1])
        label = label_from_scores(window[-2].opacity_score, window[-1].opacity_score)
        out.append(TrajectorySequence(pid, window, label))
    return out


def aggregate_features(features, scheme: str):
    """Reduce up to four chronological feature vectors to one vector.

    >>> aggregate_features([[1, 2], [3, 1]], "difference")
    array([ 2., -1.])
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("features must be a (count, width) array")
    count, width = f.shape
    if scheme == "difference":
        if not 2 <= count <= MAX_LENGTH:
            raise ValueError(f"difference needs 2..{MAX_LENGTH} features, got {count}")
        return f[-1] - f[-2]
    if scheme == "concatenation":
        if not 1 <= count <= MAX_LENGTH:
            raise ValueError(f"concatenation needs 1..{MAX_LENGTH} features, got {count}")
        out = np.zeros((MAX_LENGTH, width))
        out[MAX_LENGTH - count:] = f
        return out.reshape(-1)
    raise ValueError(f"unknown aggregation scheme {scheme!r}")


def aggregated_width(width, scheme):
    return width if scheme == "difference" else MAX_LENGTH * width


def sequence_features(ms_spec: NetworkSpec, ms_bundle: WeightBundle, sequences, scheme):
    """Aggregated feature matrix of many sequences (one frozen forward per image)."""
    images = [si.image.pixels for seq in sequences for si in seq.images]
    if not images:
        return np.zeros((0, aggregated_width(ms_spec.feature_width, scheme)))
    feats = predict_features(ms_spec, ms_bundle, np.stack(images)[:, None])
    rows, pos = [], 0
    for seq in sequences:
        n = len(seq.images)
        rows.append(aggregate_features(feats[pos:pos + n], scheme))
        pos += n
    return np.stack(rows)


def sequence_labels(sequences):
    index = {lab: i for i, lab in enumerate(TRAJECTORY_LABELS)}
    return np.array([index[s.label] for s in sequences], dtype=np.int64)


@dataclass(frozen=True)
class TrajClassifierConfig:
    kind: str = "fc2"
    hidden: int = 32
    dropout_rate: float = 0.5
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=50, batch_size=10))
    l2: float = 1e-3
    plugin: Any = None

    def __post_init__(self):
        if self.kind not in ("fc2", "logistic", "plugin"):
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        if self.kind == "fc2" and self.hidden < 1:
            raise ValueError("fc2 hidden width must be >= 1")
        if self.kind == "plugin" and self.plugin is None:
            raise ValueError("plugin classifiers need a model with fit/predict_proba")


@dataclass
class TrajClassifier:
    kind: str
    scheme: str
    ms_spec: NetworkSpec
    input_width: int
    scale: float
    spec: NetworkSpec | None = None
    bundle: WeightBundle | None = None
    coef: np.ndarray | None = None
    model: Any = None
    history: list = field(default_factory=list)

    def predict_proba(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise StateError(f"feature width {x.shape[-1]} does not match classifier input {self.input_width}")
        x = x / self.scale
        if self.kind == "fc2":
            from .pipeline import predict_logits
            return losses.softmax(predict_logits(self.spec, self.bundle, x))
        if self.kind == "logistic":
            return losses.softmax(np.hstack([x, np.ones((len(x), 1))]) @ self.coef)
        p = np.asarray(self.model.predict_proba(x), dtype=np.float64)
        return p / p.sum(axis=1, keepdims=True)


def fc2_spec(input_width, hidden=32):
    """Two fully connected layers: hidden ReLU layer, then one head per label."""
    return NetworkSpec(input_shape=(input_width,), backbone=(),
                       shared_head=nets.fullyconnected("hidden", input_width, hidden),
                       class_heads=TRAJECTORY_LABELS)


def _fit_logistic(x, y, l2, k):
    xb = np.hstack([x, np.ones((len(x), 1))])
    d = xb.shape[1]

    def f(w):
        w = w.reshape(d, k)
        loss, g = losses.softmax_ce_grad(xb @ w, y)
        reg = 0.5 * l2 * (w[:-1] ** 2).sum()
        gw = xb.T @ g
        gw[:-1] += l2 * w[:-1]
        return loss + reg, gw.ravel()

    res = minimize(f, np.zeros(d * k), jac=True, method="L-BFGS-B", options={"maxiter": 500})
    return res.x.reshape(d, k)


def train_traj_classifier(ms_spec: NetworkSpec, ms_bundle: WeightBundle, sequences, scheme: str,
                          config: TrajClassifierConfig = TrajClassifierConfig()) -> TrajClassifier:
    """Fit a trajectory classifier on frozen student features.

    The student bundle is only read. ``fc2`` trains two fully connected
    layers with softmax loss and dropout on the hidden layer; ``logistic``
    fits L2-regularised multinomial logistic regression; ``plugin`` hands
    the aggregated features to ``config.plugin.fit``.
    """
    if not sequences:
        raise ValueError("cannot train a trajectory classifier on no sequences")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown aggregation scheme {scheme!r}")
    x = sequence_features(ms_spec, ms_bundle, sequences, scheme)
    y = sequence_labels(sequences)
    # one global scale keeps zero-padded slots exactly zero
    scale = float(np.sqrt(np.mean(x * x))) or 1.0
    xs = x / scale
    clf = TrajClassifier(config.kind, scheme, ms_spec, x.shape[1], scale)
    if config.kind == "fc2":
        spec = fc2_spec(x.shape[1], config.hidden)
        tc = replace(config.train, dropout_rate=config.dropout_rate)
        start = nets.init_weights(spec, tc.seed)
        state = fit(spec, start, xs, lambda logits, idx: losses.softmax_ce_grad(logits, y[idx]), tc)
        clf.spec, clf.bundle, clf.history = spec, state.bundle, state.history
    elif config.kind == "logistic":
        clf.coef = _fit_logistic(xs, y, config.l2, len(TRAJECTORY_LABELS))
    else:
        config.plugin.fit(xs, y)
        clf.model = config.plugin
    return clf


def predict_trajectory(classifier: TrajClassifier, ms_bundle: WeightBundle, sequence: TrajectorySequence):
    """``(label, probabilities over Worse/Stable/Improved)`` for one sequence."""
    x = sequence_features(classifier.ms_spec, ms_bundle, [sequence], classifier.scheme)
    p = classifier.predict_proba(x)[0]
    return TRAJECTORY_LABELS[int(np.argmax(p))], p


def predict_many(classifier: TrajClassifier, ms_bundle: WeightBundle, sequences):
    x = sequence_features(classifier.ms_spec, ms_bundle, sequences, classifier.scheme)
    return classifier.predict_proba(x)


def all_sequences(patients):
    return [s for p in patients for s in build_sequences(p)]
