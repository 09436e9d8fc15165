"""Dataset-level semantic segmentation metrics.

IoU is pooled per (category, part) across the objects of a category
(intersections and unions summed over objects), averaged over parts to a
category mIoU, then over categories to the overall score.  The degenerate
convention matches the loss module: a part with no ground truth and no
prediction anywhere in its category counts as IoU 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SemanticItem:
    category: str
    gt_labels: np.ndarray  # (N,), -1 null
    pred_labels: np.ndarray  # (N,), -1 null
    label_names: tuple[str, ...]


def semantic_report(items: list[SemanticItem]) -> dict:
    """Per-part, per-category and overall mIoU for hard labelings."""
    if not items:
        raise ValueError("nothing to evaluate")
    by_cat: dict[str, list[SemanticItem]] = {}
    for item in items:
        gt = np.asarray(item.gt_labels)
        pred = np.asarray(item.pred_labels)
        if gt.shape != pred.shape:
            raise ValueError("prediction and ground truth disagree on N")
        by_cat.setdefault(item.category, []).append(item)

    per_part: dict[str, dict[str, float]] = {}
    per_category: dict[str, float] = {}
    for cat, cat_items in sorted(by_cat.items()):
        names = cat_items[0].label_names
        if any(i.label_names != names for i in cat_items):
            raise ValueError(f"category {cat!r} mixes label sets")
        inter = np.zeros(len(names))
        union = np.zeros(len(names))
        for item in cat_items:
            gt = np.asarray(item.gt_labels)
            pred = np.asarray(item.pred_labels)
            for j in range(len(names)):
                g = gt == j
                p = pred == j
                inter[j] += np.count_nonzero(g & p)
                union[j] += np.count_nonzero(g | p)
        ious = np.where(union > 0, inter / np.maximum(union, 1.0), 1.0)
        per_part[cat] = {names[j]: float(ious[j]) for j in range(len(names))}
        per_category[cat] = float(ious.mean())
    overall = float(np.mean(list(per_category.values())))
    return {"per_part": per_part, "per_category": per_category, "overall": overall}
