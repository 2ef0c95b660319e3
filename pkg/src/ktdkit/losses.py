"""Loss and activation functions for teacher/student training.

Everything here is a pure numpy function. Batched inputs are ``(N, K)``
arrays; a single 1-D vector is treated as a batch of one where that makes
sense. Functions ending in ``_grad`` return ``(loss, dloss/dlogits)`` and
are what the training loops call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

#: Floor applied to probabilities before taking logs (CE and KL).
LOG_FLOOR = 1e-12

STUDENT_LOSSES = ("softmax", "pc", "arcface")


@dataclass(frozen=True)
class PCConfig:
    xi: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.xi <= 1.0:
            raise ValueError(f"PC margin xi must lie in (0, 1], got {self.xi}")


@dataclass(frozen=True)
class ArcFaceConfig:
    scale_s: float = 30.0
    margin_m: float = 0.5

    def __post_init__(self):
        if not self.scale_s > 0:
            raise ValueError(f"ArcFace scale must be positive, got {self.scale_s}")
        if not 0.0 <= self.margin_m < math.pi / 2:
            raise ValueError(f"ArcFace margin must lie in [0, pi/2), got {self.margin_m}")


@dataclass(frozen=True)
class DistillConfig:
    """Knobs of the distillation objective.

    ``alpha`` weighs the softened teacher/student KL term against the
    student's own classification loss, ``temperature`` softens both
    distributions inside the KL term only.
    """

    alpha: float = 0.8
    temperature: float = 5.0
    student_loss: str = "pc"
    pc: PCConfig = field(default_factory=PCConfig)
    arcface: ArcFaceConfig = field(default_factory=ArcFaceConfig)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature >= 1.0:
            raise ValueError(f"temperature must be >= 1, got {self.temperature}")
        if self.student_loss not in STUDENT_LOSSES:
            raise ValueError(
                f"student_loss must be one of {STUDENT_LOSSES}, got {self.student_loss!r}")


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"expected a vector or an (N, K) array, got shape {x.shape}")
    return x, False


def _check_labels(labels, n, k):
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValueError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return labels


def softmax(logits, temperature=1.0):
    """Temperature-scaled softmax along the last axis.

    >>> softmax([1.0, 0.0]).round(5)
    array([0.73106, 0.26894])
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of empty logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature=1.0):
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(probs, label):
    """``-log p[label]`` with the argument floored at ``LOG_FLOOR``.

    A batch of probability rows returns the mean over rows.
    """
    p, single = _as_batch(probs)
    labels = _check_labels(label, p.shape[0], p.shape[1])
    picked = p[np.arange(p.shape[0]), labels]
    losses = -np.log(np.maximum(picked, LOG_FLOOR))
    return float(losses[0]) if single else float(losses.mean())


def softmax_ce_grad(logits, labels):
    """Mean cross-entropy of ``softmax(logits)`` and its gradient."""
    z, _ = _as_batch(logits)
    labels = _check_labels(labels, z.shape[0], z.shape[1])
    n = z.shape[0]
    p = softmax(z)
    rows = np.arange(n)
    loss = -np.log(np.maximum(p[rows, labels], LOG_FLOOR)).mean()
    g = p.copy()
    g[rows, labels] -= 1.0
    return float(loss), g / n


def _pc_hinges(p, labels, xi):
    rows = np.arange(p.shape[0])
    target = p[rows, labels]
    h = p + xi - target[:, None]
    h[rows, labels] = 0.0
    return h


def pc_loss(batch_probs, labels, config=PCConfig()):
    """Probability-margin hinge loss averaged over the batch.

    Every non-target probability is pushed at least ``xi`` below the
    target probability; each violation contributes linearly.
    """
    p, _ = _as_batch(batch_probs)
    if p.shape[0] == 0:
        raise ValueError("pc_loss of an empty batch")
    labels = _check_labels(labels, p.shape[0], p.shape[1])
    h = _pc_hinges(p, labels, config.xi)
    return float(np.maximum(h, 0.0).sum() / p.shape[0])


def pc_loss_grad_probs(batch_probs, labels, config=PCConfig()):
    """PC loss and its (sub)gradient with respect to the probabilities.

    Kinks (a hinge exactly at zero) get subgradient 0.
    """
    p, _ = _as_batch(batch_probs)
    labels = _check_labels(labels, p.shape[0], p.shape[1])
    n = p.shape[0]
    h = _pc_hinges(p, labels, config.xi)
    active = (h > 0).astype(np.float64)
    g = active.copy()
    g[np.arange(n), labels] = -active.sum(axis=1)
    return float(np.maximum(h, 0.0).sum() / n), g / n


def softmax_backward(probs, dprobs):
    """Vector-Jacobian product of softmax (at temperature 1)."""
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def pc_loss_grad(logits, labels, config=PCConfig()):
    """PC loss on ``softmax(logits)`` and its gradient w.r.t. the logits."""
    z, _ = _as_batch(logits)
    p = softmax(z)
    loss, gp = pc_loss_grad_probs(p, labels, config)
    return loss, softmax_backward(p, gp)


def _check_unit_rows(x, what):
    norms = np.linalg.norm(x, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= 1e-6):
        raise ValueError(f"{what} must be L2-normalised (within 1e-6)")


def _margin_cos(c, margin):
    theta = np.arccos(np.clip(c, -1.0, 1.0))
    return np.cos(theta + margin)


def arcface_logits(feature, class_weights, label, config=ArcFaceConfig()):
    """Additive-angular-margin logits ``s * cos(theta_k + m [k == label])``.

    ``feature`` (or an ``(N, d)`` batch) and every row of ``class_weights``
    must already be unit length.
    """
    f, single = _as_batch(feature)
    w = np.asarray(class_weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != f.shape[1]:
        raise ValueError(f"class weights {w.shape} do not match feature width {f.shape[1]}")
    _check_unit_rows(f, "feature")
    _check_unit_rows(w, "class weight rows")
    labels = _check_labels(label, f.shape[0], w.shape[0])
    cos = f @ w.T
    rows = np.arange(f.shape[0])
    out = np.clip(cos, -1.0, 1.0)
    out[rows, labels] = _margin_cos(cos[rows, labels], config.margin_m)
    out = config.scale_s * out
    return out[0] if single else out


def arcface_margin_logits(cos_logits, labels, config=ArcFaceConfig()):
    """Apply the angular margin to logits that are already ``s * cos(theta)``.

    Returns the margined logits and ``d(margined target)/d(input target)``,
    which the gradient needs.
    """
    z, _ = _as_batch(cos_logits)
    labels = _check_labels(labels, z.shape[0], z.shape[1])
    s, m = config.scale_s, config.margin_m
    rows = np.arange(z.shape[0])
    c = np.clip(z[rows, labels] / s, -1.0, 1.0)
    out = z.copy()
    out[rows, labels] = s * _margin_cos(c, m)
    # d cos(acos(c) + m) / dc = cos m + sin m * c / sqrt(1 - c^2)
    sin_t = np.maximum(np.sqrt(np.maximum(1.0 - c * c, 0.0)), 1e-12)
    dtarget = math.cos(m) + math.sin(m) * c / sin_t
    return out, dtarget


def arcface_ce_grad(cos_logits, labels, config=ArcFaceConfig()):
    """ArcFace cross-entropy from cosine logits, with gradient."""
    z, _ = _as_batch(cos_logits)
    labels = _check_labels(labels, z.shape[0], z.shape[1])
    margined, dtarget = arcface_margin_logits(z, labels, config)
    loss, g = softmax_ce_grad(margined, labels)
    rows = np.arange(z.shape[0])
    g[rows, labels] *= dtarget
    return loss, g


def classification_loss_grad(logits, labels, config: DistillConfig):
    """The student's own hard-label loss (temperature 1) and gradient."""
    kind = config.student_loss
    if kind == "softmax":
        return softmax_ce_grad(logits, labels)
    if kind == "pc":
        return pc_loss_grad(logits, labels, config.pc)
    if kind == "arcface":
        return arcface_ce_grad(logits, labels, config.arcface)
    raise ValueError(f"unknown student loss {kind!r}")


def kl_divergence(p, q):
    """Row-wise ``KL(p || q)`` in nats, both arguments floored at ``LOG_FLOOR``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return (p * (np.log(np.maximum(p, LOG_FLOOR)) - np.log(np.maximum(q, LOG_FLOOR)))).sum(axis=-1)


def kd_loss_grad(student_logits, teacher_logits, labels, config: DistillConfig):
    """Distillation objective and its gradient w.r.t. the student logits.

    ``alpha * T^2 * KL(softmax(teacher/T) || softmax(student/T))`` plus
    ``(1 - alpha)`` times the student classification loss, averaged over
    the batch.
    """
    zs, _ = _as_batch(student_logits)
    zt, _ = _as_batch(teacher_logits)
    if zs.shape != zt.shape:
        raise ValueError(f"student logits {zs.shape} and teacher logits {zt.shape} differ")
    a, t = config.alpha, config.temperature
    n = zs.shape[0]
    cls, g = classification_loss_grad(zs, labels, config)
    if a == 0.0:
        return cls, g
    ps = softmax(zs, t)
    pt = softmax(zt, t)
    kl = kl_divergence(pt, ps).mean()
    loss = a * t * t * kl + (1.0 - a) * cls
    grad = (1.0 - a) * g + (a * t / n) * (ps - pt)
    return float(loss), grad


def kd_loss(student_logits, teacher_logits, label, config: DistillConfig):
    """Value of the distillation objective (see :func:`kd_loss_grad`)."""
    return kd_loss_grad(student_logits, teacher_logits, label, config)[0]


def bce_with_logits_grad(logits, targets):
    """Mean binary cross-entropy over every (sample, head) pair."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and targets {y.shape} differ")
    # log(1 + exp(-|z|)) form is stable for large |z|
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(loss.mean()), (sig - y) / z.size
