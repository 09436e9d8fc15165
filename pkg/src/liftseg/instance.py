"""Instance segmentation by merging adjacent super points, plus part-aware
and part-agnostic average precision at IoU 0.5.

Two adjacent super points merge into one instance iff they carry the same
non-null semantic label and the same detection-inclusion pattern: for every
detection, either both are included or both are excluded.  Inclusion of a
super point in a detection is the fraction of its points visible in that
detection's view that fall inside the detection, thresholded at 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .detect import MembershipTensor
from .geom import PointCloud, SuperPointPartition, VisibilityMap
from .vote import Labeling, ScoreMatrix

AP_IOU_THRESHOLD = 0.5
DEFAULT_INCLUSION_THRESHOLD = 0.5


def mean_nn_distance(cloud: PointCloud) -> float:
    """Mean distance from each point to its nearest neighbor."""
    if cloud.n < 2:
        return 0.0
    tree = cKDTree(cloud.points)
    dist, _ = tree.query(cloud.points, k=2)
    return float(dist[:, 1].mean())


def default_adjacency_radius(cloud: PointCloud) -> float:
    return 2.0 * mean_nn_distance(cloud)


def superpoint_adjacency(
    cloud: PointCloud, partition: SuperPointPartition, radius: float
) -> set[tuple[int, int]]:
    """Pairs (a, b) with a < b whose minimum point-pair distance is < radius."""
    if radius <= 0:
        raise ValueError("adjacency radius must be positive")
    tree = cKDTree(cloud.points)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    adjacency: set[tuple[int, int]] = set()
    assign = partition.assignment
    pts = cloud.points
    for p, q in pairs:
        a, b = int(assign[p]), int(assign[q])
        if a == b:
            continue
        if np.linalg.norm(pts[p] - pts[q]) < radius:  # query_pairs is <=
            adjacency.add((min(a, b), max(a, b)))
    return adjacency


def inclusion_matrix(
    partition: SuperPointPartition,
    membership: MembershipTensor,
    visibility: VisibilityMap,
    threshold: float = DEFAULT_INCLUSION_THRESHOLD,
) -> np.ndarray:
    """(S, B) booleans: super point i counts as included in detection b when
    at least ``threshold`` of its points visible in b's view are members.
    Super points with no visible point in that view are excluded."""
    s = partition.num_super_points
    assign = partition.assignment
    out = np.zeros((s, membership.num_detections), dtype=bool)
    for b in range(membership.num_detections):
        vis = visibility.mask[membership.views[b]].astype(np.float64)
        inside = np.zeros(partition.n)
        inside[membership.points_of(b)] = 1.0
        vis_count = np.bincount(assign, weights=vis, minlength=s)
        in_count = np.bincount(assign, weights=vis * inside, minlength=s)
        nz = vis_count > 0
        out[nz, b] = in_count[nz] / vis_count[nz] >= threshold
    return out


@dataclass
class InstanceSegmentation:
    """Instance id per super point (-1 for null) and one label per instance."""

    instance_of_super_point: np.ndarray
    instance_labels: np.ndarray
    partition: SuperPointPartition

    def __post_init__(self):
        self.instance_of_super_point = np.asarray(
            self.instance_of_super_point, dtype=np.int64
        )
        self.instance_labels = np.asarray(self.instance_labels, dtype=np.int64)

    @property
    def num_instances(self) -> int:
        return self.instance_labels.size

    def point_instances(self) -> np.ndarray:
        return self.instance_of_super_point[self.partition.assignment]

    def instance_points(self, i: int) -> np.ndarray:
        return np.nonzero(self.point_instances() == i)[0]


def merge_instances(
    labeling: Labeling,
    adjacency: set[tuple[int, int]],
    membership: MembershipTensor,
    visibility: VisibilityMap,
    inclusion_threshold: float = DEFAULT_INCLUSION_THRESHOLD,
) -> InstanceSegmentation:
    """Connected components of the merge graph over non-null super points.

    Component ids are numbered by each component's smallest super-point
    index, so the result is independent of edge order.
    """
    partition = labeling.partition
    labels = labeling.super_point_labels
    s = partition.num_super_points
    incl = inclusion_matrix(partition, membership, visibility, inclusion_threshold)

    parent = np.arange(s)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in sorted(adjacency):
        if labels[a] < 0 or labels[a] != labels[b]:
            continue
        if not np.array_equal(incl[a], incl[b]):
            continue
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    roots = np.array([find(a) if labels[a] >= 0 else -1 for a in range(s)])
    instance_of_sp = np.full(s, -1, dtype=np.int64)
    instance_labels = []
    for a in range(s):
        if roots[a] < 0 or instance_of_sp[a] >= 0:
            continue
        members = np.nonzero(roots == roots[a])[0]
        instance_of_sp[members] = len(instance_labels)
        instance_labels.append(labels[a])
    return InstanceSegmentation(
        instance_of_super_point=instance_of_sp,
        instance_labels=np.asarray(instance_labels, dtype=np.int64),
        partition=partition,
    )


def instance_scores(seg: InstanceSegmentation, scores: ScoreMatrix) -> np.ndarray:
    """Confidence per instance: mean winning score of its super points."""
    out = np.zeros(seg.num_instances)
    for i in range(seg.num_instances):
        sps = np.nonzero(seg.instance_of_super_point == i)[0]
        out[i] = scores.values[sps, seg.instance_labels[i]].mean()
    return out


@dataclass(frozen=True)
class InstanceRecord:
    """One instance for AP evaluation; ``score`` is ignored for ground truth."""

    object_id: str
    category: str
    label: int
    points: tuple[int, ...]
    score: float = 0.0


def records_from_segmentation(
    seg: InstanceSegmentation,
    scores: np.ndarray,
    object_id: str,
    category: str = "default",
) -> list[InstanceRecord]:
    point_inst = seg.point_instances()
    return [
        InstanceRecord(
            object_id=object_id,
            category=category,
            label=int(seg.instance_labels[i]),
            points=tuple(np.nonzero(point_inst == i)[0].tolist()),
            score=float(scores[i]),
        )
        for i in range(seg.num_instances)
    ]


def records_from_gt_instances(
    instance_ids: np.ndarray,
    labels: np.ndarray,
    object_id: str,
    category: str = "default",
) -> list[InstanceRecord]:
    """Build ground-truth records from per-point instance ids (-1 = none)."""
    instance_ids = np.asarray(instance_ids)
    out = []
    for i in sorted(set(instance_ids[instance_ids >= 0].tolist())):
        pts = np.nonzero(instance_ids == i)[0]
        lab = int(labels[pts[0]])
        out.append(
            InstanceRecord(
                object_id=object_id,
                category=category,
                label=lab,
                points=tuple(pts.tolist()),
            )
        )
    return out


def _point_set_iou(a: tuple[int, ...], b: tuple[int, ...]) -> float:
    sa, sb = set(a), set(b)
    union = len(sa | sb)
    return len(sa & sb) / union if union else 1.0


def _average_precision(
    preds: list[InstanceRecord],
    gts: list[InstanceRecord],
    match_label: bool,
) -> float | None:
    """Greedy score-ordered matching with all-point PR interpolation.

    Returns None when the group has no ground truth.
    """
    if not gts:
        return None
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    matched = [False] * len(gts)
    tp = np.zeros(len(preds))
    for rank, pi in enumerate(order):
        pred = preds[pi]
        best_iou, best_gt = 0.0, -1
        for gi, gt in enumerate(gts):
            if matched[gi] or gt.object_id != pred.object_id:
                continue
            if match_label and gt.label != pred.label:
                continue
            iou = _point_set_iou(pred.points, gt.points)
            if iou >= AP_IOU_THRESHOLD and iou > best_iou:
                best_iou, best_gt = iou, gi
        if best_gt >= 0:
            matched[best_gt] = True
            tp[rank] = 1.0
    if not preds:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / len(gts)
    precision = cum_tp / np.arange(1, len(preds) + 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


@dataclass
class APResult:
    """AP at IoU 0.5; keys are "category/part" (part-aware) or "category"."""

    mode: str
    per_group: dict[str, float] = field(default_factory=dict)
    per_category: dict[str, float] = field(default_factory=dict)
    mean_ap: float = 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "per_group": self.per_group,
            "per_category": self.per_category,
            "mean_ap": self.mean_ap,
        }


def map50(
    preds: list[InstanceRecord],
    gts: list[InstanceRecord],
    mode: str = "part_aware",
) -> APResult:
    """Mean AP at IoU 0.5.

    part_aware: AP per (category, part) with label matching, averaged over
    parts then categories.  part_agnostic: AP per category ignoring labels.
    Groups with no ground-truth instances are skipped.
    """
    if mode not in ("part_aware", "part_agnostic"):
        raise ValueError(f"unknown mAP mode {mode!r}")
    result = APResult(mode=mode)
    categories = sorted({g.category for g in gts} | {p.category for p in preds})
    for cat in categories:
        cat_preds = [p for p in preds if p.category == cat]
        cat_gts = [g for g in gts if g.category == cat]
        if mode == "part_agnostic":
            ap = _average_precision(cat_preds, cat_gts, match_label=False)
            if ap is None:
                continue
            result.per_group[cat] = ap
            result.per_category[cat] = ap
        else:
            labels = sorted({g.label for g in cat_gts} | {p.label for p in cat_preds})
            aps = []
            for lab in labels:
                ap = _average_precision(
                    [p for p in cat_preds if p.label == lab],
                    [g for g in cat_gts if g.label == lab],
                    match_label=True,
                )
                if ap is None:
                    continue
                result.per_group[f"{cat}/{lab}"] = ap
                aps.append(ap)
            if not aps:
                continue
            result.per_category[cat] = float(np.mean(aps))
    if result.per_category:
        result.mean_ap = float(np.mean(list(result.per_category.values())))
    return result


def save_instances(
    seg: InstanceSegmentation, labels: Labeling, path: str
) -> None:
    """One line per point: ``point_idx instance_id label_id`` (-1 for null)."""
    point_inst = seg.point_instances()
    point_labels = labels.point_labels
    with open(path, "w") as f:
        for i in range(point_inst.size):
            f.write(f"{i} {point_inst[i]} {point_labels[i]}\n")


def load_instances(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Read per-point (instance_ids, label_ids) from the instance format."""
    rows = {}
    with open(path) as f:
        for lineno, ln in enumerate(f, start=1):
            if not ln.strip():
                continue
            fields = ln.split()
            if len(fields) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 'point_idx instance_id label_id'"
                )
            rows[int(fields[0])] = (int(fields[1]), int(fields[2]))
    n = len(rows)
    if sorted(rows) != list(range(n)):
        raise ValueError(f"{path}: point indices are not 0..{n - 1}")
    inst = np.array([rows[i][0] for i in range(n)], dtype=np.int64)
    lab = np.array([rows[i][1] for i in range(n)], dtype=np.int64)
    return inst, lab
