"""Losses over stacked binary classifiers, with closed-form gradients.

The joint objective adds a distribution term to the usual per-classifier
cross-entropy: both the classifier outputs and the indicator targets are
softmax-normalized, and the squared difference of their cumulative sums
(a squared 1-D earth mover's distance) penalizes out-of-order outputs
that plain cross-entropy cannot see. Baseline regression losses and a
binary gender loss round out the ablation surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .tensor import ensure_finite, softmax, softmax_backward

CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class LossReport:
    """Scalar terms of one loss evaluation.

    ``total`` excludes the distribution term when ``lam`` is zero and the
    gender term when no gender prediction is present.
    """

    total: float
    ce_term: float
    emd_term: float
    lam: float
    aux_gender: float | None = None
    gender_weight: float | None = None


def _check_same_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DomainError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def cross_entropy(outputs: np.ndarray, targets: np.ndarray
                  ) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over all classifiers in the batch.

    Outputs are clamped to [1e-7, 1 - 1e-7] before the logs so the value
    and gradient stay finite at saturated predictions. The gradient of
    each entry depends only on that entry and its own target.
    """
    outputs = np.asarray(outputs)
    targets = np.asarray(targets)
    _check_same_shape("cross_entropy", outputs, targets)
    n = outputs.shape[0]
    o = np.clip(outputs, CLAMP_EPS, 1.0 - CLAMP_EPS)
    t = targets
    value = float(-(t * np.log(o) + (1.0 - t) * np.log1p(-o)).sum() / n)
    grad = -(t / o - (1.0 - t) / (1.0 - o)) / n
    ensure_finite("cross_entropy grad", grad)
    return value, grad


def _validate_distributions(name: str, dist: np.ndarray) -> None:
    if (dist < 0).any():
        raise DomainError(f"{name}: negative probability entry")
    sums = dist.sum(axis=1)
    bad = np.abs(sums - 1.0) > 1e-6
    if bad.any():
        i = int(np.argmax(bad))
        raise DomainError(f"{name}: row {i} sums to {sums[i]:.9f}, expected 1")


def emd2_value(pred_dist: np.ndarray, target_dist: np.ndarray) -> float:
    """Value-only squared-EMD, without simplex validation.

    Useful for numeric differentiation, where perturbed inputs step
    slightly off the simplex by construction.
    """
    gaps = np.cumsum(np.asarray(pred_dist) - np.asarray(target_dist), axis=1)
    return float((gaps ** 2).sum() / pred_dist.shape[0])


def emd2(pred_dist: np.ndarray, target_dist: np.ndarray
         ) -> tuple[float, np.ndarray]:
    """Mean squared earth mover's distance between discrete distributions.

    For each row the value is the sum over k of the squared difference of
    the k-th partial sums. The gradient w.r.t. the k-th predicted entry is
    twice the sum, over positions j >= k, of the j-th partial-sum gap,
    averaged over the batch like the value.
    """
    p_hat = np.asarray(pred_dist)
    p = np.asarray(target_dist)
    _check_same_shape("emd2", p_hat, p)
    _validate_distributions("emd2 pred_dist", p_hat)
    _validate_distributions("emd2 target_dist", p)
    n = p_hat.shape[0]
    gaps = np.cumsum(p_hat - p, axis=1)
    value = float((gaps ** 2).sum() / n)
    grad = (2.0 / n) * np.cumsum(gaps[:, ::-1], axis=1)[:, ::-1]
    ensure_finite("emd2 grad", grad)
    return value, grad


def odl(outputs: np.ndarray, targets: np.ndarray, lam: float,
        ) -> tuple[LossReport, np.ndarray]:
    """Cross-entropy plus ``lam`` times the distribution penalty.

    Both the classifier outputs and the 0/1 targets pass through a row
    softmax before the distribution term; the returned gradient w.r.t.
    the raw outputs therefore includes the softmax Jacobian product.
    With ``lam == 0`` the value and gradient are exactly those of
    :func:`cross_entropy`, bit for bit.
    """
    outputs = np.asarray(outputs)
    targets = np.asarray(targets)
    ce_value, grad = cross_entropy(outputs, targets)
    p_hat, _ = softmax(outputs)
    p_target, _ = softmax(targets.astype(outputs.dtype))
    emd_value, emd_grad = emd2(p_hat, p_target)
    if lam != 0.0:
        total = ce_value + lam * emd_value
        grad = grad + lam * softmax_backward(p_hat, emd_grad).input_grad
    else:
        total = ce_value
    report = LossReport(total=total, ce_term=ce_value, emd_term=emd_value,
                        lam=float(lam))
    return report, grad


def gender_bce(pred: np.ndarray, truth: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy for the gender head, averaged over the batch."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    _check_same_shape("gender_bce", pred, truth)
    n = pred.shape[0]
    p = np.clip(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    value = float(-(truth * np.log(p) + (1.0 - truth) * np.log1p(-p)).sum() / n)
    grad = -(truth / p - (1.0 - truth) / (1.0 - p)) / n
    ensure_finite("gender_bce grad", grad)
    return value, grad


def baseline_regression_loss(kind: str, pred_age: np.ndarray,
                             truth_age: np.ndarray) -> tuple[float, np.ndarray]:
    """Plain scalar-regression losses used by the ablation runs.

    ``euclidean`` is the mean squared error, ``mae`` the mean absolute
    error with the sign subgradient (zero exactly at ties).
    """
    pred = np.asarray(pred_age)
    truth = np.asarray(truth_age)
    _check_same_shape("baseline_regression_loss", pred, truth)
    n = pred.shape[0]
    diff = pred - truth
    if kind == "euclidean":
        value = float((diff ** 2).sum() / n)
        grad = 2.0 * diff / n
    elif kind == "mae":
        value = float(np.abs(diff).sum() / n)
        grad = np.sign(diff) / n
    else:
        raise DomainError(f"unknown regression loss kind {kind!r}")
    ensure_finite("baseline_regression_loss grad", grad)
    return value, grad
