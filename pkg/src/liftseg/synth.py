"""Synthetic scenes and detection oracle.

Generates labeled primitive-surface point clouds with super points, projects
each part's visible points into per-view tight boxes and exact rasterized
masks, and injects controlled noise: dropped detections, wrong-label
(spurious) copies, and box jitter.  Detection features carry a learnable
truthfulness signal in component 0 (+1 truthful, -1 spurious, plus Gaussian
noise at the configured signal-to-noise ratio); the remaining components are
pure noise.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .detect import (
    Detection,
    DetectionSet,
    MaskRLE,
    crop_rect,
    load_detections,
    quantize_features,
    save_detections,
)
from .geom import (
    Camera,
    DEFAULT_DISTANCE,
    DEFAULT_RESOLUTION,
    PointCloud,
    Scene,
    SuperPointPartition,
    VisibilityMap,
    compute_visibility,
    fixed_viewpoints,
    load_cloud,
    normalize_cloud,
    project,
    save_cloud,
)
from .instance import load_instances

BOX_PAD_PX = 0.5


@dataclass(frozen=True)
class PartSpec:
    label: str
    shape: str  # box | sphere | cylinder
    center: tuple[float, float, float]
    size: tuple[float, ...]  # box: (sx, sy, sz); sphere: (r,); cylinder: (r, h)
    points: int

    def __post_init__(self):
        if self.shape not in ("box", "sphere", "cylinder"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.points < 1:
            raise ValueError("each part needs at least one point")


@dataclass(frozen=True)
class NoiseSpec:
    drop_rate: float = 0.0
    spurious_rate: float = 0.0
    jitter_px: float = 0.0
    feature_dim: int = 8
    feature_snr: float = 4.0

    def __post_init__(self):
        for r in (self.drop_rate, self.spurious_rate):
            if not 0.0 <= r <= 1.0:
                raise ValueError("noise rates must lie in [0, 1]")
        if self.feature_dim < 2:
            raise ValueError("feature dimension must be >= 2")
        if self.jitter_px < 0 or self.feature_snr <= 0:
            raise ValueError("invalid jitter or SNR")


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    parts: tuple[PartSpec, ...]
    noise: NoiseSpec = NoiseSpec()
    views: int = 10
    resolution: int = DEFAULT_RESOLUTION
    distance: float = DEFAULT_DISTANCE
    points_per_super_point: int = 40
    respect_boundaries: bool = True

    def __post_init__(self):
        if not self.parts:
            raise ValueError("spec needs at least one part")
        if self.views < 1:
            raise ValueError("need at least one view")


@dataclass
class SynthBundle:
    scene: Scene
    cameras: list[Camera]
    visibility: VisibilityMap
    detections: DetectionSet
    truthful: np.ndarray  # one flag per detection
    gt_instance_ids: np.ndarray  # (N,) part index per point
    spec: SynthSpec | None = None

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SynthBundle)
            and self.scene == other.scene
            and self.cameras == other.cameras
            and self.visibility == other.visibility
            and self.detections == other.detections
            and np.array_equal(self.truthful, other.truthful)
            and np.array_equal(self.gt_instance_ids, other.gt_instance_ids)
        )


def _sample_sphere(rng, center, radius, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v


def _sample_box(rng, center, size, n):
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.zeros((n, 3))
    for f in range(6):
        m = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * 0.5
        pts[m, others[0]] = u[m]
        pts[m, others[1]] = v[m]
    return np.asarray(center) + pts * np.array([sx, sy, sz])


def _sample_cylinder(rng, center, radius, height, n):
    lateral = 2 * math.pi * radius * height
    caps = math.pi * radius * radius
    probs = np.array([lateral, caps, caps])
    part = rng.choice(3, size=n, p=probs / probs.sum())
    theta = rng.uniform(0, 2 * math.pi, size=n)
    pts = np.zeros((n, 3))
    m = part == 0
    pts[m, 0] = radius * np.cos(theta[m])
    pts[m, 1] = radius * np.sin(theta[m])
    pts[m, 2] = rng.uniform(-0.5, 0.5, size=int(m.sum())) * height
    for cap, sign in ((1, 1.0), (2, -1.0)):
        m = part == cap
        r = radius * np.sqrt(rng.uniform(0, 1, size=int(m.sum())))
        pts[m, 0] = r * np.cos(theta[m])
        pts[m, 1] = r * np.sin(theta[m])
        pts[m, 2] = sign * height / 2.0
    return np.asarray(center) + pts


def _sample_part(rng, part: PartSpec) -> np.ndarray:
    if part.shape == "sphere":
        return _sample_sphere(rng, part.center, part.size[0], part.points)
    if part.shape == "box":
        return _sample_box(rng, part.center, part.size[:3], part.points)
    return _sample_cylinder(rng, part.center, part.size[0], part.size[1], part.points)


def _grow_super_points(rng, points, groups, per_super_point):
    """Seeded nearest-seed clustering, optionally constrained to groups."""
    n = points.shape[0]
    assignment = np.full(n, -1, dtype=np.int64)
    next_id = 0
    for idx in groups:
        k = max(1, int(round(idx.size / per_super_point)))
        k = min(k, idx.size)
        seeds = rng.choice(idx, size=k, replace=False)
        tree = cKDTree(points[seeds])
        _, nearest = tree.query(points[idx])
        assignment[idx] = next_id + nearest
        next_id += k
    # Drop ids that captured no point (possible only under exact ties).
    used = np.unique(assignment)
    remap = {old: new for new, old in enumerate(used.tolist())}
    return np.vectorize(remap.__getitem__)(assignment), len(used)


def generate(spec: SynthSpec) -> SynthBundle:
    """Deterministic bundle for a spec: scene, cameras, visibility, oracle
    detections with truthfulness flags, and ground-truth instance ids."""
    rng = np.random.default_rng(spec.seed)

    label_names: list[str] = []
    for part in spec.parts:
        if part.label not in label_names:
            label_names.append(part.label)
    num_labels = len(label_names)

    raw_chunks = [_sample_part(rng, p) for p in spec.parts]
    gt_instance_ids = np.concatenate(
        [np.full(p.points, t, dtype=np.int64) for t, p in enumerate(spec.parts)]
    )
    gt_labels = np.concatenate(
        [
            np.full(p.points, label_names.index(p.label), dtype=np.int64)
            for p in spec.parts
        ]
    )
    cloud, _, _ = normalize_cloud(np.concatenate(raw_chunks))

    if spec.respect_boundaries:
        groups = [np.nonzero(gt_instance_ids == t)[0] for t in range(len(spec.parts))]
    else:
        groups = [np.arange(cloud.n)]
    assignment, num_sp = _grow_super_points(
        rng, cloud.points, groups, spec.points_per_super_point
    )
    scene = Scene(
        cloud=cloud,
        partition=SuperPointPartition(assignment, num_sp),
        gt_labels=gt_labels,
        label_names=label_names,
    )

    cameras = fixed_viewpoints(
        spec.views, spec.distance, spec.resolution, spec.resolution
    )
    visibility = compute_visibility(cloud, cameras)

    noise = spec.noise
    noise_std = 1.0 / noise.feature_snr
    detections: list[Detection] = []
    truthful: list[bool] = []

    def draw_feature(sign: float) -> np.ndarray:
        feat = np.concatenate(
            [
                [sign + rng.normal(0.0, noise_std)],
                rng.standard_normal(noise.feature_dim - 1),
            ]
        )
        return quantize_features(feat)

    w = h = spec.resolution
    for k, cam in enumerate(cameras):
        pixels, _, _ = project(cam, cloud.points)
        for t, part in enumerate(spec.parts):
            vis_pts = np.nonzero((gt_instance_ids == t) & visibility.mask[k])[0]
            if vis_pts.size == 0:
                continue
            px, py = pixels[vis_pts, 0], pixels[vis_pts, 1]
            jit = rng.uniform(0.0, noise.jitter_px, size=4) if noise.jitter_px else np.zeros(4)
            box = (
                max(0.0, float(px.min()) - BOX_PAD_PX - jit[0]),
                max(0.0, float(py.min()) - BOX_PAD_PX - jit[1]),
                min(float(w), float(px.max()) + BOX_PAD_PX + jit[2]),
                min(float(h), float(py.max()) + BOX_PAD_PX + jit[3]),
            )
            ox, oy, cw, ch = crop_rect(box)
            bitmap = np.zeros((ch, cw), dtype=bool)
            bitmap[
                np.floor(py).astype(np.int64) - oy,
                np.floor(px).astype(np.int64) - ox,
            ] = True
            mask = MaskRLE.encode(bitmap)
            true_label = label_names.index(part.label)

            if rng.uniform() >= noise.drop_rate:
                detections.append(
                    Detection(
                        k=k,
                        j=true_label,
                        box=box,
                        feature=draw_feature(1.0),
                        conf=float(rng.uniform(0.3, 0.95)),
                        mask=mask,
                    )
                )
                truthful.append(True)
            if num_labels >= 2 and rng.uniform() < noise.spurious_rate:
                wrong = int(rng.choice([j for j in range(num_labels) if j != true_label]))
                detections.append(
                    Detection(
                        k=k,
                        j=wrong,
                        box=box,
                        feature=draw_feature(-1.0),
                        conf=float(rng.uniform(0.3, 0.95)),
                        mask=mask,
                    )
                )
                truthful.append(False)

    dset = DetectionSet(
        detections,
        num_views=spec.views,
        label_names=label_names,
        feature_dim=noise.feature_dim,
    )
    return SynthBundle(
        scene=scene,
        cameras=cameras,
        visibility=visibility,
        detections=dset,
        truthful=np.asarray(truthful, dtype=bool),
        gt_instance_ids=gt_instance_ids,
        spec=spec,
    )


CLOUD_FILE = "cloud.txt"
DETECTIONS_FILE = "detections.json"
GT_INSTANCES_FILE = "gt_instances.txt"
ORACLE_FILE = "oracle.json"


def emit(bundle: SynthBundle, out_dir: str) -> None:
    """Write the bundle in the cloud/detection file formats plus the oracle
    sidecar (seed, camera profile, truthfulness flags, gt instances)."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except (OSError, FileExistsError) as e:
        raise OSError(f"cannot create bundle directory {out_dir}: {e}") from None
    save_cloud(bundle.scene, os.path.join(out_dir, CLOUD_FILE))
    save_detections(bundle.detections, os.path.join(out_dir, DETECTIONS_FILE))
    with open(os.path.join(out_dir, GT_INSTANCES_FILE), "w") as f:
        for i in range(bundle.scene.cloud.n):
            f.write(
                f"{i} {bundle.gt_instance_ids[i]} {bundle.scene.gt_labels[i]}\n"
            )
    cam = bundle.cameras[0]
    oracle = {
        "version": 1,
        "seed": None if bundle.spec is None else bundle.spec.seed,
        "views": len(bundle.cameras),
        "resolution": cam.width,
        "distance": cam.distance,
        "truthful": [bool(v) for v in bundle.truthful],
    }
    with open(os.path.join(out_dir, ORACLE_FILE), "w") as f:
        json.dump(oracle, f, separators=(",", ":"))
        f.write("\n")


def load_bundle(bundle_dir: str) -> SynthBundle:
    """Reload an emitted bundle; visibility is recomputed from the recorded
    camera profile, which is deterministic."""
    scene = load_cloud(os.path.join(bundle_dir, CLOUD_FILE))
    detections = load_detections(os.path.join(bundle_dir, DETECTIONS_FILE))
    inst_ids, _ = load_instances(os.path.join(bundle_dir, GT_INSTANCES_FILE))
    with open(os.path.join(bundle_dir, ORACLE_FILE)) as f:
        oracle = json.load(f)
    cameras = fixed_viewpoints(
        int(oracle["views"]),
        float(oracle["distance"]),
        int(oracle["resolution"]),
        int(oracle["resolution"]),
    )
    visibility = compute_visibility(scene.cloud, cameras)
    return SynthBundle(
        scene=scene,
        cameras=cameras,
        visibility=visibility,
        detections=detections,
        truthful=np.asarray(oracle["truthful"], dtype=bool),
        gt_instance_ids=inst_ids,
        spec=None,
    )


def load_spec(path: str) -> SynthSpec:
    """Parse a TOML scene spec."""
    import tomli

    with open(path, "rb") as f:
        doc = tomli.load(f)
    try:
        parts = tuple(
            PartSpec(
                label=p["label"],
                shape=p["shape"],
                center=tuple(float(v) for v in p["center"]),
                size=tuple(float(v) for v in p["size"]),
                points=int(p["points"]),
            )
            for p in doc["parts"]
        )
        noise_doc = doc.get("noise", {})
        noise = NoiseSpec(
            drop_rate=float(noise_doc.get("drop_rate", 0.0)),
            spurious_rate=float(noise_doc.get("spurious_rate", 0.0)),
            jitter_px=float(noise_doc.get("jitter_px", 0.0)),
            feature_dim=int(noise_doc.get("feature_dim", 8)),
            feature_snr=float(noise_doc.get("feature_snr", 4.0)),
        )
        return SynthSpec(
            seed=int(doc.get("seed", 0)),
            parts=parts,
            noise=noise,
            views=int(doc.get("views", 10)),
            resolution=int(doc.get("resolution", DEFAULT_RESOLUTION)),
            distance=float(doc.get("distance", DEFAULT_DISTANCE)),
            points_per_super_point=int(doc.get("points_per_super_point", 40)),
            respect_boundaries=bool(doc.get("respect_boundaries", True)),
        )
    except (KeyError, TypeError) as e:
        raise ValueError(f"{path}: bad scene spec ({e})") from None


def three_part_spec(
    seed: int,
    noise: NoiseSpec = NoiseSpec(),
    views: int = 10,
    resolution: int = DEFAULT_RESOLUTION,
    points_per_part: int = 500,
    spacing: float = 1.2,
    points_per_super_point: int = 40,
) -> SynthSpec:
    """Convenience builder: ball / block / tube along the x axis with
    seed-dependent pose perturbations; shared label set across seeds."""
    rng = np.random.default_rng(seed)
    jitter = lambda s: tuple(rng.uniform(-0.1, 0.1, 3) + s)  # noqa: E731
    scale = lambda: float(rng.uniform(0.85, 1.15))  # noqa: E731
    parts = (
        PartSpec(
            label="ball",
            shape="sphere",
            center=jitter((-spacing, 0.0, 0.0)),
            size=(0.45 * scale(),),
            points=points_per_part,
        ),
        PartSpec(
            label="block",
            shape="box",
            center=jitter((0.0, 0.0, 0.0)),
            size=(0.7 * scale(), 0.7 * scale(), 0.7 * scale()),
            points=points_per_part,
        ),
        PartSpec(
            label="tube",
            shape="cylinder",
            center=jitter((spacing, 0.0, 0.0)),
            size=(0.3 * scale(), 0.9 * scale()),
            points=points_per_part,
        ),
    )
    return SynthSpec(
        seed=seed,
        parts=parts,
        noise=noise,
        views=views,
        resolution=resolution,
        points_per_super_point=points_per_super_point,
    )


def with_noise(spec: SynthSpec, noise: NoiseSpec) -> SynthSpec:
    return replace(spec, noise=noise)
