"""Super-point voting: unweighted and weighted scores, softmax normalization
with a null logit, and hard label assignment.

Score matrices are S x (L+1); the last column is the null label.  For
unweighted matrices the null column stores the null threshold so a single
argmax serves both assignment paths; for normalized matrices it holds the
null probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detect import DetectionSet, MembershipTensor
from .geom import SuperPointPartition, VisibilityMap

RAW_UNWEIGHTED = "raw_unweighted"
RAW_WEIGHTED = "raw_weighted"
NORMALIZED = "normalized"

DEFAULT_NULL_THRESHOLD = 0.5


@dataclass
class ScoreMatrix:
    values: np.ndarray  # (S, L+1), last column = null
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] < 2:
            raise ValueError("score matrix must be S x (L+1)")
        if self.kind not in (RAW_UNWEIGHTED, RAW_WEIGHTED, NORMALIZED):
            raise ValueError(f"unknown score kind {self.kind!r}")

    @property
    def num_super_points(self) -> int:
        return self.values.shape[0]

    @property
    def num_labels(self) -> int:
        return self.values.shape[1] - 1

    @property
    def label_scores(self) -> np.ndarray:
        return self.values[:, :-1]

    @property
    def null_scores(self) -> np.ndarray:
        return self.values[:, -1]


@dataclass
class Labeling:
    """Per-super-point labels (-1 = null), lifted to points via the partition."""

    super_point_labels: np.ndarray
    partition: SuperPointPartition

    def __post_init__(self):
        self.super_point_labels = np.asarray(self.super_point_labels, dtype=np.int64)
        if self.super_point_labels.shape != (self.partition.num_super_points,):
            raise ValueError("one label per super point required")

    @property
    def point_labels(self) -> np.ndarray:
        return self.super_point_labels[self.partition.assignment]

    def __eq__(self, other) -> bool:
        return isinstance(other, Labeling) and np.array_equal(
            self.super_point_labels, other.super_point_labels
        )


@dataclass
class VoteCache:
    """Intermediates of weighted scoring needed for its backward pass."""

    argmax_det: np.ndarray  # (K, L, N) detection index or -1
    visibility: np.ndarray  # (K, N) bool
    assignment: np.ndarray  # (N,)
    denominators: np.ndarray  # (S,) visible point-view mass
    num_detections: int


def _check_dims(
    partition: SuperPointPartition,
    visibility: VisibilityMap,
    membership: MembershipTensor,
    detections: DetectionSet,
) -> None:
    if visibility.n != partition.n or membership.n_points != partition.n:
        raise ValueError("partition, visibility and membership disagree on N")
    if membership.num_detections != len(detections):
        raise ValueError("membership tensor does not match the detection set")
    if visibility.num_views != detections.num_views:
        raise ValueError("visibility views do not match the detection set")


def _score_engine(
    partition: SuperPointPartition,
    visibility: VisibilityMap,
    membership: MembershipTensor,
    detections: DetectionSet,
    weights: np.ndarray,
) -> tuple[np.ndarray, VoteCache]:
    """Shared voting core: per (view, label, point) the best weighted
    membership, averaged over each super point's visible mass."""
    _check_dims(partition, visibility, membership, detections)
    n = partition.n
    s = partition.num_super_points
    k = visibility.num_views
    l = detections.num_labels
    assign = partition.assignment

    cover = np.zeros((k, l, n))
    argmax_det = np.full((k, l, n), -1, dtype=np.int32)
    for idx, det in enumerate(detections.detections):
        pts = membership.points_of(idx)
        if pts.size == 0:
            continue
        w = weights[idx]
        row_cover = cover[det.k, det.j]
        row_arg = argmax_det[det.k, det.j]
        better = w > row_cover[pts]
        sel = pts[better]
        row_cover[sel] = w
        row_arg[sel] = idx

    vis = visibility.mask.astype(np.float64)
    per_label = (cover * vis[:, None, :]).sum(axis=0)  # (L, N)
    numer = np.zeros((s, l))
    for j in range(l):
        numer[:, j] = np.bincount(assign, weights=per_label[j], minlength=s)
    denom = np.bincount(assign, weights=vis.sum(axis=0), minlength=s)
    scores = np.zeros((s, l))
    nz = denom > 0
    scores[nz] = numer[nz] / denom[nz, None]
    cache = VoteCache(
        argmax_det=argmax_det,
        visibility=visibility.mask,
        assignment=assign,
        denominators=denom,
        num_detections=len(detections),
    )
    return scores, cache


def score_unweighted(
    partition: SuperPointPartition,
    visibility: VisibilityMap,
    membership: MembershipTensor,
    detections: DetectionSet,
    null_threshold: float = DEFAULT_NULL_THRESHOLD,
) -> ScoreMatrix:
    """Fraction of each super point's visible point-view mass covered by any
    detection of each label; the null box covers nothing.  Super points with
    zero visible mass score 0 everywhere.
    """
    ones = np.ones(len(detections))
    scores, _ = _score_engine(partition, visibility, membership, detections, ones)
    values = np.concatenate(
        [scores, np.full((scores.shape[0], 1), null_threshold)], axis=1
    )
    return ScoreMatrix(values=values, kind=RAW_UNWEIGHTED)


def score_weighted(
    partition: SuperPointPartition,
    visibility: VisibilityMap,
    membership: MembershipTensor,
    detections: DetectionSet,
    weights,
) -> ScoreMatrix:
    """Like :func:`score_unweighted` but each membership carries its
    detection's weight; per point the maximum weighted membership wins."""
    matrix, _ = score_weighted_cached(
        partition, visibility, membership, detections, weights
    )
    return matrix


def score_weighted_cached(
    partition: SuperPointPartition,
    visibility: VisibilityMap,
    membership: MembershipTensor,
    detections: DetectionSet,
    weights,
) -> tuple[ScoreMatrix, VoteCache]:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(detections),):
        raise ValueError("one weight per detection required")
    if np.any(w < 0):
        raise ValueError("detection weights must be nonnegative")
    scores, cache = _score_engine(partition, visibility, membership, detections, w)
    values = np.concatenate([scores, np.zeros((scores.shape[0], 1))], axis=1)
    return ScoreMatrix(values=values, kind=RAW_WEIGHTED), cache


def score_backward(cache: VoteCache, upstream: np.ndarray) -> np.ndarray:
    """Gradient of the weighted scores w.r.t. the detection weights.

    ``upstream`` is dLoss/dScore with shape (S, L); at points where several
    detections tie for the maximum, the first detection index carries the
    subgradient (matching the forward tie-break).
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    s = cache.denominators.shape[0]
    if upstream.shape[0] != s:
        raise ValueError("upstream gradient does not match the cache")
    denom = cache.denominators
    safe = np.where(denom > 0, denom, 1.0)
    per_sp = np.where(denom[:, None] > 0, upstream / safe[:, None], 0.0)  # (S, L)
    per_point = per_sp[cache.assignment]  # (N, L)

    grad = np.zeros(cache.num_detections)
    arg = cache.argmax_det  # (K, L, N)
    vis = cache.visibility  # (K, N)
    contrib = np.transpose(per_point)  # (L, N)
    mask = (arg >= 0) & vis[:, None, :]
    if np.any(mask):
        vals = np.broadcast_to(contrib[None, :, :], arg.shape)[mask]
        np.add.at(grad, arg[mask], vals)
    return grad


def normalize_scores(raw: ScoreMatrix, null_score: float) -> ScoreMatrix:
    """Row-wise softmax over the label scores plus the shared null logit."""
    if raw.kind != RAW_WEIGHTED:
        raise ValueError("normalize_scores expects a raw_weighted matrix")
    logits = np.concatenate(
        [raw.label_scores, np.full((raw.num_super_points, 1), float(null_score))],
        axis=1,
    )
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite scores cannot be normalized")
    return ScoreMatrix(values=softmax_rows(logits), kind=NORMALIZED)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """dLoss/dLogits for a row-wise softmax, given dLoss/dProbs."""
    inner = (upstream * probs).sum(axis=1, keepdims=True)
    return probs * (upstream - inner)


def assign_labels(
    scores: ScoreMatrix,
    partition: SuperPointPartition,
    null_threshold: float = DEFAULT_NULL_THRESHOLD,
) -> Labeling:
    """Hard per-super-point labels.

    Unweighted path: argmax over labels, null when the best score falls
    below ``null_threshold``.  Normalized path: argmax over the L+1 columns
    including null.  Ties resolve to the lowest column index, so a label
    exactly at the threshold beats null.
    """
    if scores.num_super_points != partition.num_super_points:
        raise ValueError("score matrix does not match the partition")
    if scores.kind == RAW_UNWEIGHTED:
        cols = np.concatenate(
            [
                scores.label_scores,
                np.full((scores.num_super_points, 1), float(null_threshold)),
            ],
            axis=1,
        )
    elif scores.kind == NORMALIZED:
        cols = scores.values
    else:
        raise ValueError("raw_weighted scores must be normalized before assignment")
    best = np.argmax(cols, axis=1)
    labels = np.where(best == scores.num_labels, -1, best)
    return Labeling(super_point_labels=labels, partition=partition)


def save_labeling(labeling: Labeling, path: str) -> None:
    """One line per point: ``point_idx label_id`` with -1 for null."""
    pl = labeling.point_labels
    with open(path, "w") as f:
        for i, lab in enumerate(pl):
            f.write(f"{i} {lab}\n")


def load_point_labels(path: str) -> np.ndarray:
    labels = {}
    with open(path) as f:
        for lineno, ln in enumerate(f, start=1):
            if not ln.strip():
                continue
            fields = ln.split()
            if len(fields) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'point_idx label_id'")
            labels[int(fields[0])] = int(fields[1])
    n = len(labels)
    if sorted(labels) != list(range(n)):
        raise ValueError(f"{path}: point indices are not 0..{n - 1}")
    return np.array([labels[i] for i in range(n)], dtype=np.int64)


def save_scores(scores: ScoreMatrix, label_names: list[str], path: str) -> None:
    """TSV with a header of label names plus ``null``; one row per super point."""
    if len(label_names) != scores.num_labels:
        raise ValueError("label name count does not match the score matrix")
    with open(path, "w") as f:
        f.write("\t".join(list(label_names) + ["null"]) + "\n")
        for row in scores.values:
            f.write("\t".join(repr(float(v)) for v in row) + "\n")
