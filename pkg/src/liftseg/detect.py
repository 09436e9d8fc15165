"""Per-view 2D detections (boxes and masks) and point-to-detection membership.

A detection's box lives in continuous image coordinates; containment uses
half-open intervals ``[x0, x1) x [y0, y1)`` so shared edges are never counted
twice.  Masks are binary bitmaps on the image pixel grid, cropped to the
pixel rectangle touched by the box and stored as row-major run-length
encoding with value-alternating runs starting at 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Camera, PointCloud, project


def crop_rect(box: tuple[float, float, float, float]) -> tuple[int, int, int, int]:
    """Pixel rectangle (ox, oy, w, h) of all cells touched by a box."""
    x0, y0, x1, y1 = box
    ox, oy = int(math.floor(x0)), int(math.floor(y0))
    return ox, oy, int(math.ceil(x1)) - ox, int(math.ceil(y1)) - oy


@dataclass(frozen=True)
class MaskRLE:
    """Run-length-encoded binary bitmap; runs alternate 0/1 starting with 0."""

    w: int
    h: int
    runs: tuple[int, ...]

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("mask dimensions must be positive")
        runs = tuple(int(r) for r in self.runs)
        if any(r < 0 for r in runs):
            raise ValueError("RLE runs must be nonnegative")
        if any(r == 0 for r in runs[1:]):
            raise ValueError("RLE runs after the first must be positive")
        if sum(runs) != self.w * self.h:
            raise ValueError(
                f"RLE runs sum to {sum(runs)}, expected {self.w * self.h}"
            )
        object.__setattr__(self, "runs", runs)

    @classmethod
    def encode(cls, bitmap: np.ndarray) -> "MaskRLE":
        """Encode an (h, w) boolean bitmap."""
        bm = np.asarray(bitmap, dtype=bool)
        if bm.ndim != 2:
            raise ValueError("bitmap must be 2-D")
        flat = bm.reshape(-1).astype(np.int8)
        if flat.size == 0:
            raise ValueError("bitmap must be nonempty")
        change = np.nonzero(np.diff(flat))[0] + 1
        bounds = np.concatenate(([0], change, [flat.size]))
        runs = np.diff(bounds).tolist()
        if flat[0] == 1:
            runs = [0] + runs
        return cls(w=bm.shape[1], h=bm.shape[0], runs=tuple(runs))

    def decode(self) -> np.ndarray:
        """Decode to an (h, w) boolean bitmap."""
        flat = np.zeros(self.w * self.h, dtype=bool)
        pos = 0
        val = False
        for run in self.runs:
            if val:
                flat[pos:pos + run] = True
            pos += run
            val = not val
        return flat.reshape(self.h, self.w)


@dataclass(frozen=True)
class Detection:
    """One 2D detection: view, label, box, optional mask, feature, confidence."""

    k: int
    j: int
    box: tuple[float, float, float, float]
    feature: np.ndarray
    conf: float
    mask: MaskRLE | None = None

    def __post_init__(self):
        x0, y0, x1, y1 = (float(v) for v in self.box)
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if x0 < 0 or y0 < 0:
            raise ValueError(f"box {self.box} extends outside the image")
        if not 0.0 <= self.conf <= 1.0:
            raise ValueError(f"confidence {self.conf} outside [0, 1]")
        feat = np.asarray(self.feature, dtype=np.float64)
        if feat.ndim != 1 or not np.all(np.isfinite(feat)):
            raise ValueError("feature must be a finite 1-D vector")
        feat.setflags(write=False)
        object.__setattr__(self, "box", (x0, y0, x1, y1))
        object.__setattr__(self, "feature", feat)
        if self.mask is not None:
            _, _, w, h = crop_rect(self.box)
            if (self.mask.w, self.mask.h) != (w, h):
                raise ValueError(
                    f"mask is {self.mask.w}x{self.mask.h} but the box crop "
                    f"is {w}x{h}"
                )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Detection)
            and self.k == other.k
            and self.j == other.j
            and self.box == other.box
            and np.array_equal(self.feature, other.feature)
            and self.conf == other.conf
            and self.mask == other.mask
        )


class DetectionSet:
    """All detections of one object across K views with L labels."""

    def __init__(
        self,
        detections: list[Detection],
        num_views: int,
        label_names: list[str],
        feature_dim: int,
    ):
        if num_views < 1 or feature_dim < 0 or not label_names:
            raise ValueError("invalid DetectionSet dimensions")
        for idx, det in enumerate(detections):
            if not 0 <= det.k < num_views:
                raise ValueError(f"detection {idx}: view {det.k} out of range")
            if not 0 <= det.j < len(label_names):
                raise ValueError(f"detection {idx}: label {det.j} out of range")
            if det.feature.shape != (feature_dim,):
                raise ValueError(
                    f"detection {idx}: feature dim {det.feature.shape[0]} != "
                    f"{feature_dim}"
                )
        self.detections = list(detections)
        self.num_views = num_views
        self.label_names = list(label_names)
        self.feature_dim = feature_dim

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    def __len__(self) -> int:
        return len(self.detections)

    def features(self) -> np.ndarray:
        if not self.detections:
            return np.zeros((0, self.feature_dim))
        return np.stack([d.feature for d in self.detections])

    def confidences(self) -> np.ndarray:
        return np.array([d.conf for d in self.detections])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, DetectionSet)
            and self.num_views == other.num_views
            and self.label_names == other.label_names
            and self.feature_dim == other.feature_dim
            and self.detections == other.detections
        )


class MembershipTensor:
    """Sparse per-detection point membership I_b(p).

    ``points_of(b)`` returns the sorted indices of points contained in
    detection b; ``views`` records each detection's view index so downstream
    consumers can pair membership with the right visibility row.
    """

    def __init__(self, point_sets: list[np.ndarray], views, n_points: int, mode: str):
        self._sets = [np.asarray(s, dtype=np.int64) for s in point_sets]
        self.views = np.asarray(views, dtype=np.int64)
        if self.views.shape != (len(self._sets),):
            raise ValueError("one view index per detection required")
        self.n_points = int(n_points)
        self.mode = mode

    @property
    def num_detections(self) -> int:
        return len(self._sets)

    def points_of(self, b: int) -> np.ndarray:
        return self._sets[b]

    def indicator(self, b: int) -> np.ndarray:
        out = np.zeros(self.n_points, dtype=bool)
        out[self._sets[b]] = True
        return out


def compute_membership(
    cloud: PointCloud,
    cameras: list[Camera],
    detections: DetectionSet,
    mode: str = "box",
) -> MembershipTensor:
    """Project the cloud into each view and test detection containment.

    ``mode="box"`` tests the half-open box; ``mode="mask"`` additionally
    requires the mask bit of the pixel cell containing the projection, so
    mask membership is always a subset of box membership.
    """
    if mode not in ("box", "mask"):
        raise ValueError(f"unknown membership mode {mode!r}")
    if detections.num_views != len(cameras):
        raise ValueError(
            f"detection set has K={detections.num_views} views but "
            f"{len(cameras)} cameras were given"
        )
    if mode == "mask":
        for idx, det in enumerate(detections.detections):
            if det.mask is None:
                raise ValueError(f"detection {idx} has no mask (mode=mask)")

    proj = {}
    for k, cam in enumerate(cameras):
        pixels, _, in_front = project(cam, cloud.points)
        proj[k] = (pixels, in_front)

    point_sets = []
    for idx, det in enumerate(detections.detections):
        cam = cameras[det.k]
        x0, y0, x1, y1 = det.box
        if x1 > cam.width or y1 > cam.height:
            raise ValueError(
                f"detection {idx}: box {det.box} exceeds the "
                f"{cam.width}x{cam.height} image"
            )
        pixels, in_front = proj[det.k]
        px, py = pixels[:, 0], pixels[:, 1]
        with np.errstate(invalid="ignore"):
            inside = in_front & (px >= x0) & (px < x1) & (py >= y0) & (py < y1)
        if mode == "mask":
            bitmap = det.mask.decode()
            ox, oy, _, _ = crop_rect(det.box)
            sel = np.nonzero(inside)[0]
            cx = np.floor(px[sel]).astype(np.int64) - ox
            cy = np.floor(py[sel]).astype(np.int64) - oy
            ok = (cx >= 0) & (cx < det.mask.w) & (cy >= 0) & (cy < det.mask.h)
            hit = np.zeros(sel.size, dtype=bool)
            hit[ok] = bitmap[cy[ok], cx[ok]]
            inside = np.zeros_like(inside)
            inside[sel[hit]] = True
        point_sets.append(np.nonzero(inside)[0])

    views = [d.k for d in detections.detections]
    return MembershipTensor(point_sets, views, cloud.n, mode)


def _round9(x: float) -> float:
    return float(f"{x:.9g}")


def quantize_features(values: np.ndarray) -> np.ndarray:
    """Round to the 9 significant decimal digits the file format stores."""
    return np.vectorize(_round9, otypes=[np.float64])(np.asarray(values, dtype=np.float64))


def save_detections(dset: DetectionSet, path: str) -> None:
    """Serialize to the versioned JSON schema (features at 9 significant digits)."""
    records = []
    for det in dset.detections:
        rec = {
            "k": det.k,
            "j": det.j,
            "box": [float(v) for v in det.box],
            "conf": float(det.conf),
            "feature": [_round9(v) for v in det.feature],
            "mask_rle": None
            if det.mask is None
            else {"w": det.mask.w, "h": det.mask.h, "runs": list(det.mask.runs)},
        }
        records.append(rec)
    doc = {
        "version": 1,
        "K": dset.num_views,
        "L": dset.num_labels,
        "D": dset.feature_dim,
        "labels": dset.label_names,
        "detections": records,
    }
    with open(path, "w") as f:
        json.dump(doc, f, separators=(",", ":"))
        f.write("\n")


def load_detections(path: str) -> DetectionSet:
    """Parse a detection JSON file; schema violations raise ValueError."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON ({e})") from None
    if doc.get("version") != 1:
        raise ValueError(f"{path}: unsupported version {doc.get('version')!r}")
    for key in ("K", "L", "D", "labels", "detections"):
        if key not in doc:
            raise ValueError(f"{path}: missing top-level field {key!r}")
    if len(doc["labels"]) != doc["L"]:
        raise ValueError(f"{path}: L={doc['L']} but {len(doc['labels'])} label names")
    detections = []
    for i, rec in enumerate(doc["detections"]):
        try:
            mask = None
            if rec.get("mask_rle") is not None:
                m = rec["mask_rle"]
                mask = MaskRLE(w=int(m["w"]), h=int(m["h"]), runs=tuple(m["runs"]))
            det = Detection(
                k=int(rec["k"]),
                j=int(rec["j"]),
                box=tuple(float(v) for v in rec["box"]),
                feature=np.asarray(rec["feature"], dtype=np.float64),
                conf=float(rec["conf"]),
                mask=mask,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}: detection {i}: {e}") from None
        detections.append(det)
    return DetectionSet(
        detections,
        num_views=int(doc["K"]),
        label_names=list(doc["labels"]),
        feature_dim=int(doc["D"]),
    )
