"""Exact and relaxed mean IoU over per-label indicator vectors, the
super-point-to-point lifting, and analytic gradients for training.

Degenerate labels follow one convention everywhere: a label whose ground
truth and prediction are both all-zero contributes IoU 1 (vacuous
agreement); if exactly one side is all-zero it contributes 0.
"""

from __future__ import annotations

import warnings

import numpy as np

from .geom import SuperPointPartition
from .vote import Labeling

UNION_EPS = 1e-12


class GroundTruth:
    """Per-label binary indicator vectors; points in no label are null."""

    def __init__(self, labels, num_labels: int):
        lab = np.asarray(labels, dtype=np.int64)
        if lab.ndim != 1:
            raise ValueError("labels must be a 1-D per-point vector")
        if lab.min(initial=0) < -1 or lab.max(initial=-1) >= num_labels:
            raise ValueError("label id out of range")
        lab.setflags(write=False)
        self.labels = lab
        self.num_labels = int(num_labels)
        ind = np.zeros((num_labels, lab.size))
        valid = lab >= 0
        ind[lab[valid], np.nonzero(valid)[0]] = 1.0
        ind.setflags(write=False)
        self.indicators = ind

    @property
    def n(self) -> int:
        return self.labels.size


def _pred_matrix(pred, num_labels: int, n: int) -> np.ndarray:
    """Accept a soft (L, N) matrix, a Labeling, or a per-point label vector."""
    if isinstance(pred, Labeling):
        pred = pred.point_labels
    pred = np.asarray(pred)
    if pred.ndim == 1:
        if pred.shape != (n,):
            raise ValueError("hard prediction length does not match ground truth")
        mat = np.zeros((num_labels, n))
        valid = (pred >= 0) & (pred < num_labels)
        mat[pred[valid].astype(np.int64), np.nonzero(valid)[0]] = 1.0
        return mat
    pred = pred.astype(np.float64)
    if pred.shape != (num_labels, n):
        raise ValueError(
            f"soft prediction must be ({num_labels}, {n}), got {pred.shape}"
        )
    if pred.min(initial=0.0) < -1e-12 or pred.max(initial=0.0) > 1 + 1e-12:
        raise ValueError("soft prediction entries must lie in [0, 1]")
    return pred


def lift_scores(partition: SuperPointPartition, label_scores) -> np.ndarray:
    """Spread per-super-point, per-label scores onto points: (S, L) -> (L, N)."""
    ls = np.asarray(label_scores, dtype=np.float64)
    if ls.ndim != 2 or ls.shape[0] != partition.num_super_points:
        raise ValueError(
            f"expected (S={partition.num_super_points}, L) scores, got {ls.shape}"
        )
    return ls[partition.assignment].T


def lift_backward(partition: SuperPointPartition, point_grad: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`lift_scores`: (L, N) point gradients -> (S, L)."""
    pg = np.asarray(point_grad, dtype=np.float64)
    s = partition.num_super_points
    out = np.zeros((s, pg.shape[0]))
    for j in range(pg.shape[0]):
        out[:, j] = np.bincount(partition.assignment, weights=pg[j], minlength=s)
    return out


def iou_terms(gt: GroundTruth, pred) -> tuple[np.ndarray, np.ndarray]:
    """Per-label (intersection, union) of ground truth and prediction."""
    mat = _pred_matrix(pred, gt.num_labels, gt.n)
    inter = (gt.indicators * mat).sum(axis=1)
    union = gt.indicators.sum(axis=1) + mat.sum(axis=1) - inter
    return inter, union


def miou(gt: GroundTruth, pred) -> float:
    """Mean over labels of intersection / union; both-empty labels count 1."""
    inter, union = iou_terms(gt, pred)
    per_label = np.where(union > 0, inter / np.maximum(union, UNION_EPS), 1.0)
    return float(per_label.mean())


def mriou_loss(gt: GroundTruth, pred) -> float:
    """Relaxed mean-IoU loss: 1 - miou with soft predictions allowed."""
    return 1.0 - miou(gt, pred)


def mriou_grad(gt: GroundTruth, pred) -> np.ndarray:
    """d(mriou_loss)/d(prediction), shape (L, N).

    Per label j and point p, with I = intersection and U = union:
    -(1/M) * (l[p] * U - I * (1 - l[p])) / U^2, zero where both sides are
    all-zero (the epsilon guard keeps the degenerate case finite).
    """
    mat = _pred_matrix(pred, gt.num_labels, gt.n)
    l = gt.indicators
    inter = (l * mat).sum(axis=1, keepdims=True)
    union = l.sum(axis=1, keepdims=True) + mat.sum(axis=1, keepdims=True) - inter
    denom = np.maximum(union * union, UNION_EPS)
    grad = -(l * union - inter * (1.0 - l)) / denom / gt.num_labels
    grad[np.broadcast_to(union == 0, grad.shape)] = 0.0
    return grad


def cross_entropy_loss(gt: GroundTruth, point_probs: np.ndarray) -> float:
    """Mean negative log-likelihood of the true class per point.

    ``point_probs`` holds one normalized distribution over L+1 classes per
    point; ground-truth-null points use the null class L.  Zero probability
    at the true class is clamped at 1e-12 with a warning.
    """
    probs = np.asarray(point_probs, dtype=np.float64)
    if probs.shape != (gt.n, gt.num_labels + 1):
        raise ValueError(
            f"expected ({gt.n}, {gt.num_labels + 1}) distributions, "
            f"got {probs.shape}"
        )
    classes = np.where(gt.labels >= 0, gt.labels, gt.num_labels)
    p_true = probs[np.arange(gt.n), classes]
    clamped = p_true < 1e-12
    if np.any(clamped):
        warnings.warn(
            f"cross-entropy clamped {int(clamped.sum())} zero probabilities",
            RuntimeWarning,
            stacklevel=2,
        )
        p_true = np.maximum(p_true, 1e-12)
    return float(-np.log(p_true).mean())


def cross_entropy_grad(gt: GroundTruth, point_probs: np.ndarray) -> np.ndarray:
    """d(cross_entropy)/d(point_probs), shape (N, L+1)."""
    probs = np.asarray(point_probs, dtype=np.float64)
    classes = np.where(gt.labels >= 0, gt.labels, gt.num_labels)
    grad = np.zeros_like(probs)
    p_true = np.maximum(probs[np.arange(gt.n), classes], 1e-12)
    grad[np.arange(gt.n), classes] = -1.0 / (gt.n * p_true)
    return grad
