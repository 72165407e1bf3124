"""Probability and loss computations.

Temperature-scaled softmax, cross-entropy against integer labels, KL
imitation against a frozen reference distribution, and the joint two-term
objective that weights the imitation term by the squared temperature so its
contribution stays comparable to the label term as the temperature changes.

Class labels are 1-based throughout the package: valid labels are 1..C.

Per-batch losses are means over samples, so learning-rate semantics do not
depend on batch size. Logs are epsilon-clamped at 1e-12 because reference
vectors extracted from confident models can underflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import ContractViolation

EPS = 1e-12


@dataclass(frozen=True)
class ProbabilityVector:
    """A class-posterior vector together with the temperature that made it."""

    values: np.ndarray
    temperature: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 1:
            raise ContractViolation(f"probability vector must be 1-D, got shape {v.shape}")
        if (v < 0).any() or abs(float(v.sum()) - 1.0) > 1e-9:
            raise ContractViolation("probabilities must be nonnegative and sum to 1")

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class LossReport:
    """One evaluation of the joint objective: total = ce + T^2 * kl."""

    ce: float
    kl: float
    total: float
    temperature: float


def softmax_rows(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Numerically stable row-wise softmax of logits / T."""
    if temperature <= 0:
        raise ContractViolation(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softened_softmax(logits, temperature: float) -> ProbabilityVector:
    """Class posterior exp(z_c/T) / sum_j exp(z_j/T) for a single logit vector.

    T=1 is the plain softmax; larger T flattens the distribution.
    """
    z = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    if z.ndim != 1:
        raise ContractViolation(f"expected a single logit vector, got shape {z.shape}")
    if not np.isfinite(z).all():
        raise ContractViolation("logits must be finite")
    return ProbabilityVector(softmax_rows(z, temperature), temperature)


def cross_entropy(probs: ProbabilityVector, label: int) -> float:
    """Negative log-likelihood -log p(y) of the 1-based true class ``label``."""
    if not 1 <= label <= probs.num_classes:
        raise ContractViolation(
            f"label {label} out of range 1..{probs.num_classes}"
        )
    return float(-np.log(max(float(probs.values[label - 1]), EPS)))


def kl_imitation(reference: ProbabilityVector, current: ProbabilityVector) -> float:
    """KL(reference || current); the reference is a frozen constant.

    Both vectors must share the class count and the temperature they were
    produced at.
    """
    if reference.num_classes != current.num_classes:
        raise ContractViolation(
            f"class counts differ: {reference.num_classes} vs {current.num_classes}"
        )
    if reference.temperature != current.temperature:
        raise ContractViolation(
            f"temperatures differ: {reference.temperature} vs {current.temperature}"
        )
    r = np.clip(reference.values, EPS, None)
    q = np.clip(current.values, EPS, None)
    return float(np.sum(reference.values * (np.log(r) - np.log(q))))


def srdl_total(ce: float, kl: float, temperature: float) -> LossReport:
    """Joint objective ce + T^2 * kl with the squared temperature as weight."""
    if temperature <= 0:
        raise ContractViolation(f"temperature must be positive, got {temperature}")
    if not (np.isfinite(ce) and np.isfinite(kl)):
        raise ContractViolation("loss terms must be finite")
    return LossReport(ce=ce, kl=kl, total=ce + temperature**2 * kl, temperature=temperature)


def _check_labels(labels: np.ndarray, num_classes: int):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ContractViolation(f"labels must be 1-D, got shape {labels.shape}")
    if ((labels < 1) | (labels > num_classes)).any():
        bad = labels[(labels < 1) | (labels > num_classes)][0]
        raise ContractViolation(f"label {bad} out of range 1..{num_classes}")
    return labels.astype(np.int64)


def cross_entropy_mean(logits: tz.Tensor, labels) -> tz.Tensor:
    """Mean softmax cross-entropy over a batch, as a differentiable scalar.

    Fused softmax + NLL: the gradient on the logits is (p - onehot(y)) / n.
    """
    n, c = logits.shape
    idx = _check_labels(labels, c) - 1
    p = softmax_rows(logits.data)
    picked = np.clip(p[np.arange(n), idx], EPS, None)
    value = np.asarray(-np.log(picked).mean(), dtype=logits.dtype)
    out = tz.Tensor(value, (logits,), "cross_entropy")

    def _backward(g):
        d = p.copy()
        d[np.arange(n), idx] -= 1.0
        return ((g * d / n).astype(logits.dtype, copy=False),)

    out._backward = _backward
    return out


def imitation_mean(logits: tz.Tensor, reference: np.ndarray, temperature: float) -> tz.Tensor:
    """Mean KL(reference || softened softmax of logits) over a batch.

    ``reference`` is (n, C) of frozen probabilities; no gradient flows into
    it. The gradient on the logits is (q - reference) / (T * n) where q is
    the current softened posterior.
    """
    if temperature <= 0:
        raise ContractViolation(f"temperature must be positive, got {temperature}")
    n, c = logits.shape
    ref = np.asarray(reference, dtype=np.float64)
    if ref.shape != (n, c):
        raise ContractViolation(f"reference shape {ref.shape} != logits shape {(n, c)}")
    q = softmax_rows(logits.data, temperature)
    rc = np.clip(ref, EPS, None)
    qc = np.clip(q, EPS, None)
    value = np.asarray((ref * (np.log(rc) - np.log(qc))).sum(axis=1).mean(), dtype=logits.dtype)
    out = tz.Tensor(value, (logits,), "kl_imitation")

    def _backward(g):
        row_mass = ref.sum(axis=1, keepdims=True)
        d = (q * row_mass - ref) / (temperature * n)
        return ((g * d).astype(logits.dtype, copy=False),)

    out._backward = _backward
    return out


def joint_objective(
    logits: tz.Tensor, labels, reference: np.ndarray, temperature: float
) -> tuple[tz.Tensor, LossReport]:
    """Differentiable ce + T^2 * kl over a batch, plus its scalar report."""
    ce = cross_entropy_mean(logits, labels)
    kl = imitation_mean(logits, reference, temperature)
    total = tz.add(ce, tz.scale(kl, temperature**2))
    report = srdl_total(float(ce.data), float(kl.data), temperature)
    return total, report
