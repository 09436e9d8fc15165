"""Independent reference implementations the fast paths are checked against.

Everything here is deliberately naive: triple loops for voting, pairwise
occlusion tests for visibility, exhaustive assignment enumeration for AP.
"""

import numpy as np

from liftseg.geom import project, splat_offsets


def naive_scores(partition, visibility, membership, detections, weights=None):
    """Triple-loop evaluation of the voting ratio (views x points x boxes)."""
    s = partition.num_super_points
    l = detections.num_labels
    k_views = visibility.num_views
    member_sets = [
        set(membership.points_of(b).tolist())
        for b in range(membership.num_detections)
    ]
    out = np.zeros((s, l))
    for i in range(s):
        pts = np.nonzero(partition.assignment == i)[0]
        den = 0
        num = np.zeros(l)
        for k in range(k_views):
            for p in pts:
                if not visibility.mask[k, p]:
                    continue
                den += 1
                for j in range(l):
                    best = 0.0
                    for b, det in enumerate(detections.detections):
                        if det.k == k and det.j == j and int(p) in member_sets[b]:
                            w = 1.0 if weights is None else float(weights[b])
                            best = max(best, w)
                    num[j] += best
        if den:
            out[i] = num / den
    return out


def pairwise_visibility(camera, points, splat_radius, depth_eps):
    """Occlusion by explicit point pairs instead of a z-buffer."""
    pixels, depth, in_front = project(camera, points)
    offsets = {(int(dx), int(dy)) for dx, dy in splat_offsets(splat_radius)}
    n = points.shape[0]
    cell = np.full((n, 2), -(10 ** 9), dtype=np.int64)
    cell[in_front] = np.floor(pixels[in_front]).astype(np.int64)
    inside = (
        in_front
        & (pixels[:, 0] >= 0)
        & (pixels[:, 0] < camera.width)
        & (pixels[:, 1] >= 0)
        & (pixels[:, 1] < camera.height)
    )
    visible = np.zeros(n, dtype=bool)
    for p in range(n):
        if not inside[p]:
            continue
        occluded = False
        for q in range(n):
            if not in_front[q]:
                continue
            delta = (cell[p, 0] - cell[q, 0], cell[p, 1] - cell[q, 1])
            if delta in offsets and depth[q] < depth[p] - depth_eps:
                occluded = True
                break
        visible[p] = not occluded
    return visible


def point_set_iou(a, b):
    sa, sb = set(a), set(b)
    union = len(sa | sb)
    return len(sa & sb) / union if union else 1.0


def _best_tp(preds, gts, match_label):
    """Maximum TP count over all injective pred-to-gt assignments."""
    valid = [
        [
            pred.object_id == gt.object_id
            and (not match_label or pred.label == gt.label)
            and point_set_iou(pred.points, gt.points) >= 0.5
            for gt in gts
        ]
        for pred in preds
    ]

    def best_from(i, used):
        if i == len(preds):
            return 0
        best = best_from(i + 1, used)
        for j in range(len(gts)):
            if j not in used and valid[i][j]:
                best = max(best, 1 + best_from(i + 1, used | {j}))
        return best

    return best_from(0, frozenset())


def brute_force_ap(preds, gts, match_label):
    """AP via per-threshold exhaustive matching and explicit envelope
    integration.  Only usable on tiny instances."""
    if not gts:
        return None
    if not preds:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    ranked = [preds[i] for i in order]
    points = []
    for m in range(1, len(ranked) + 1):
        tp = _best_tp(ranked[:m], gts, match_label)
        points.append((tp / len(gts), tp / m))
    ap = 0.0
    prev_recall = 0.0
    for recall, _ in sorted(set(points)):
        if recall <= prev_recall:
            continue
        best_prec = max(p for r, p in points if r >= recall)
        ap += (recall - prev_recall) * best_prec
        prev_recall = recall
    return ap
