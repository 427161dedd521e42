"""Classification and distillation losses.

Cross-entropy is the multi-class mean form; the two-class case is just
M=2. The distillation loss is a batch-mean KL divergence between
temperature-softened distributions where the teacher side is treated as a
constant: teachers improve on their own student turns, never through a
student's backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, ParameterError
from .numerics import Tensor, log_softmax

Array = np.ndarray


@dataclass
class LossBundle:
    """Per-step loss record used for logging and failure diagnostics."""

    ce: dict[str, float] = field(default_factory=dict)
    kd: dict[tuple[str, str], float] = field(default_factory=dict)
    alpha: dict[str, float] = field(default_factory=dict)
    beta: dict[str, float] = field(default_factory=dict)
    total: dict[str, float] = field(default_factory=dict)
    tau: float = 1.0


def _check_labels(labels: Array, n_classes: int) -> Array:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DataError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(
            f"label out of range [0, {n_classes}): saw {int(labels.min())}..{int(labels.max())}"
        )
    return labels.astype(np.int64)


def one_hot(labels: Array, n_classes: int) -> Array:
    labels = _check_labels(labels, n_classes)
    out = np.zeros((labels.size, n_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels: Array) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch, M] logits, got {logits.shape}")
    batch, n_classes = logits.shape
    if batch < 1:
        raise DataError("cross_entropy requires batch >= 1")
    onehot = one_hot(labels, n_classes)
    if onehot.shape[0] != batch:
        raise DimensionError(
            f"labels batch {onehot.shape[0]} does not match logits batch {batch}"
        )
    logp = log_softmax(logits)
    return (logp * onehot).sum() * (-1.0 / batch)


def kd_loss(student_logits: Tensor, teacher_logits: Tensor, tau: float) -> Tensor:
    """Batch-mean KL(teacher || student) on tau-softened distributions.

    The teacher distribution is treated as a constant; gradients flow only
    into the student logits.
    """
    if tau <= 0:
        raise ParameterError(f"distillation temperature must be > 0, got {tau}")
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(
            f"kd_loss shapes disagree: student {student_logits.shape} "
            f"vs teacher {teacher_logits.shape}"
        )
    batch = student_logits.shape[0]
    z = teacher_logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    q = e / e.sum(axis=-1, keepdims=True)
    logq = np.log(q)
    entropy_term = float((q * logq).sum()) / batch
    logp = log_softmax(student_logits, temperature=tau)
    cross_term = (logp * q).sum() * (-1.0 / batch)
    return cross_term + entropy_term


def total_loss(ce_s, kd_a, kd_b, alpha: float, beta: float, tau: float):
    """Student objective: ce + alpha*tau^2*kd_a + beta*tau^2*kd_b.

    Works on tape tensors during training and on plain floats in tests.
    """
    if tau <= 0:
        raise ParameterError(f"distillation temperature must be > 0, got {tau}")
    t2 = tau * tau
    return ce_s + kd_a * (alpha * t2) + kd_b * (beta * t2)


def ce_logit_gradient_oracle(logits: Array, labels: Array) -> Array:
    """Closed-form gradient of mean cross-entropy w.r.t. logits.

    (softmax(logits) - one_hot(labels)) / batch; used as an independent
    comparator for the tape gradient, never on the training path.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise DimensionError(f"expected [batch, M] logits, got {logits.shape}")
    batch, n_classes = logits.shape
    onehot = one_hot(labels, n_classes)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    return (probs - onehot) / batch
