"""Point clouds, super-point partitions, view-sphere cameras and z-buffer visibility.

Conventions used throughout the package:

* Normalized object space: cloud centered at the origin, max point norm 1.
* Continuous image coordinates span ``[0, W] x [0, H]``, x right, y down,
  origin at the top-left corner.  Pixel ``(ix, iy)`` is the unit cell
  ``[ix, ix+1) x [iy, iy+1)``; the cell containing a projection is
  ``floor`` of its continuous coordinates.
* Depth is distance along the camera's forward axis (positive in front).
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DISTANCE = 2.2
DEFAULT_RESOLUTION = 800
DEFAULT_SPLAT_RADIUS = 2.0
DEFAULT_DEPTH_EPS = 0.01

# Fraction of the image height the unit sphere should fill when viewed
# from the camera distance; fixes the vertical field of view.
SPHERE_FILL_FRACTION = 0.9


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


class PointCloud:
    """Immutable set of N >= 1 finite 3D points."""

    def __init__(self, points):
        pts = _as_points(points)
        if pts.shape[0] == 0:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        self._points = pts

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def n(self) -> int:
        return self._points.shape[0]

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        return isinstance(other, PointCloud) and np.array_equal(
            self._points, other._points
        )


def normalize_cloud(points) -> tuple[PointCloud, np.ndarray, float]:
    """Center a raw cloud at its centroid and scale the max norm to 1.

    Returns ``(cloud, translation, scale)`` where
    ``normalized = (raw + translation) / scale``.  A degenerate cloud whose
    points all coincide keeps scale 1 (single point ends up at the origin).
    """
    pts = _as_points(points)
    if pts.shape[0] == 0:
        raise ValueError("cannot normalize an empty cloud")
    if not np.all(np.isfinite(pts)):
        raise ValueError("cannot normalize a cloud with non-finite coordinates")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.linalg.norm(centered, axis=1).max())
    if scale <= 0.0:
        scale = 1.0
    return PointCloud(centered / scale), -centroid, scale


class SuperPointPartition:
    """Per-point assignment to one of S nonempty super points."""

    def __init__(self, assignment, num_super_points: int | None = None):
        assign = np.asarray(assignment, dtype=np.int64)
        if assign.ndim != 1 or assign.size == 0:
            raise ValueError("assignment must be a nonempty 1-D index array")
        s = int(assign.max()) + 1 if num_super_points is None else int(num_super_points)
        if assign.min() < 0 or assign.max() >= s:
            raise ValueError("super-point indices out of range")
        sizes = np.bincount(assign, minlength=s)
        if np.any(sizes == 0):
            empty = int(np.argmin(sizes))
            raise ValueError(f"super point {empty} is empty")
        assign.setflags(write=False)
        self._assignment = assign
        self._s = s
        self._sizes = sizes

    @property
    def assignment(self) -> np.ndarray:
        return self._assignment

    @property
    def num_super_points(self) -> int:
        return self._s

    @property
    def sizes(self) -> np.ndarray:
        return self._sizes

    @property
    def n(self) -> int:
        return self._assignment.size

    def point_indices(self, i: int) -> np.ndarray:
        return np.nonzero(self._assignment == i)[0]

    def lift(self, per_super_point: np.ndarray) -> np.ndarray:
        """Spread per-super-point values onto points (rows indexed by point)."""
        return np.asarray(per_super_point)[..., self._assignment]

    def __eq__(self, other) -> bool:
        return isinstance(other, SuperPointPartition) and np.array_equal(
            self._assignment, other._assignment
        )


def default_fov(distance: float) -> float:
    """Vertical field of view making the unit sphere fill ~90% of the image."""
    if distance <= 1.0:
        raise ValueError("camera distance must exceed the unit-sphere radius")
    silhouette = math.tan(math.asin(1.0 / distance))
    return 2.0 * math.atan(silhouette / SPHERE_FILL_FRACTION)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera on the view sphere, looking at the origin.

    ``direction`` is the unit vector from the origin toward the camera
    center; the camera sits at ``distance * direction``.
    """

    direction: tuple[float, float, float]
    distance: float = DEFAULT_DISTANCE
    width: int = DEFAULT_RESOLUTION
    height: int = DEFAULT_RESOLUTION
    fov: float = field(default=0.0)

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        norm = float(np.linalg.norm(d))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("camera direction must be unit-norm")
        if self.distance <= 0:
            raise ValueError("camera distance must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fov == 0.0:
            object.__setattr__(self, "fov", default_fov(self.distance))
        if not 0 < self.fov < math.pi:
            raise ValueError("field of view must lie in (0, pi)")
        object.__setattr__(self, "direction", (float(d[0]), float(d[1]), float(d[2])))

    @property
    def position(self) -> np.ndarray:
        return self.distance * np.asarray(self.direction)

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (right, down, forward) basis of the camera frame.

        Global up is +z, switching to +x when the view direction is within
        1e-6 of a pole.
        """
        forward = -np.asarray(self.direction, dtype=np.float64)
        up = np.array([0.0, 0.0, 1.0])
        if abs(forward @ up) > 1.0 - 1e-6:
            up = np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return right, down, forward

    @property
    def focal(self) -> float:
        return (self.height / 2.0) / math.tan(self.fov / 2.0)

    def to_dict(self) -> dict:
        return {
            "direction": list(self.direction),
            "distance": self.distance,
            "width": self.width,
            "height": self.height,
            "fov": self.fov,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            direction=tuple(d["direction"]),
            distance=float(d["distance"]),
            width=int(d["width"]),
            height=int(d["height"]),
            fov=float(d["fov"]),
        )


def fixed_viewpoints(
    k: int,
    distance: float = DEFAULT_DISTANCE,
    width: int = DEFAULT_RESOLUTION,
    height: int = DEFAULT_RESOLUTION,
) -> list[Camera]:
    """Deterministic cameras spread on the view sphere via a Fibonacci lattice.

    The latitude uses the midpoint offset (i + 0.5) / k so no camera sits
    exactly at a pole; identical k always yields identical cameras.
    """
    if k < 1:
        raise ValueError("need at least one viewpoint")
    golden_angle = math.pi * (3.0 - math.sqrt(5.0))
    cameras = []
    for i in range(k):
        z = 1.0 - 2.0 * (i + 0.5) / k
        r = math.sqrt(max(0.0, 1.0 - z * z))
        theta = golden_angle * i
        d = np.array([r * math.cos(theta), r * math.sin(theta), z])
        d /= np.linalg.norm(d)
        cameras.append(
            Camera(direction=(d[0], d[1], d[2]), distance=distance,
                   width=width, height=height)
        )
    return cameras


def project(camera: Camera, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project points into continuous pixel coordinates.

    Returns ``(pixels, depth, in_front)`` where ``pixels`` has shape (N, 2)
    (x right, y down), ``depth`` is distance along the forward axis and
    ``in_front`` flags points strictly in front of the camera plane.
    Pixel coordinates of behind/degenerate points are NaN, not an error.
    """
    pts = _as_points(points)
    right, down, forward = camera.axes()
    rel = pts - camera.position
    depth = rel @ forward
    in_front = depth > 1e-12
    f = camera.focal
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.width / 2.0 + f * (rel @ right) / depth
        py = camera.height / 2.0 + f * (rel @ down) / depth
    pixels = np.stack([px, py], axis=1)
    pixels[~in_front] = np.nan
    return pixels, depth, in_front


def unproject(camera: Camera, pixels, depth) -> np.ndarray:
    """Inverse of :func:`project` for points in front of the camera."""
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    dep = np.asarray(depth, dtype=np.float64).reshape(-1)
    right, down, forward = camera.axes()
    f = camera.focal
    dx = (pix[:, 0] - camera.width / 2.0) / f
    dy = (pix[:, 1] - camera.height / 2.0) / f
    rays = forward[None, :] + dx[:, None] * right[None, :] + dy[:, None] * down[None, :]
    return camera.position[None, :] + dep[:, None] * rays


class VisibilityMap:
    """Boolean per-view, per-point visibility indicators (K x N)."""

    def __init__(self, mask):
        m = np.asarray(mask, dtype=bool)
        if m.ndim != 2:
            raise ValueError("visibility mask must be K x N")
        m.setflags(write=False)
        self._mask = m

    @property
    def mask(self) -> np.ndarray:
        return self._mask

    @property
    def num_views(self) -> int:
        return self._mask.shape[0]

    @property
    def n(self) -> int:
        return self._mask.shape[1]

    def view(self, k: int) -> np.ndarray:
        return self._mask[k]

    def __eq__(self, other) -> bool:
        return isinstance(other, VisibilityMap) and np.array_equal(
            self._mask, other._mask
        )


def splat_offsets(radius: float) -> np.ndarray:
    """Integer (dx, dy) offsets of the disk splat of the given pixel radius."""
    if radius < 0:
        raise ValueError("splat radius must be nonnegative")
    r = int(math.floor(radius))
    offs = [
        (dx, dy)
        for dx in range(-r, r + 1)
        for dy in range(-r, r + 1)
        if dx * dx + dy * dy <= radius * radius
    ]
    return np.asarray(offs, dtype=np.int64).reshape(-1, 2)


def _view_visibility(
    camera: Camera, pts: np.ndarray, offsets: np.ndarray, depth_eps: float
) -> np.ndarray:
    pixels, depth, in_front = project(camera, pts)
    w, h = camera.width, camera.height
    ix = np.full(pts.shape[0], -1, dtype=np.int64)
    iy = np.full(pts.shape[0], -1, dtype=np.int64)
    ix[in_front] = np.floor(pixels[in_front, 0]).astype(np.int64)
    iy[in_front] = np.floor(pixels[in_front, 1]).astype(np.int64)
    inside = in_front & (pixels[:, 0] >= 0) & (pixels[:, 0] < w) \
        & (pixels[:, 1] >= 0) & (pixels[:, 1] < h)

    zbuf = np.full((h, w), np.inf)
    for dx, dy in offsets:
        tx = ix[in_front] + dx
        ty = iy[in_front] + dy
        ok = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        np.minimum.at(zbuf, (ty[ok], tx[ok]), depth[in_front][ok])

    visible = inside.copy()
    visible[inside] &= depth[inside] <= zbuf[iy[inside], ix[inside]] + depth_eps
    return visible


def compute_visibility(
    cloud: PointCloud,
    cameras: list[Camera],
    splat_radius: float = DEFAULT_SPLAT_RADIUS,
    depth_eps: float = DEFAULT_DEPTH_EPS,
    threads: int = 1,
) -> VisibilityMap:
    """Z-buffer point-splat visibility for every camera.

    A point is visible in a view iff it projects inside the image, lies in
    front of the camera and its depth is within ``depth_eps`` of the minimum
    depth splatted onto its pixel.  Views are independent, so the result
    does not depend on ``threads``.
    """
    if depth_eps <= 0:
        raise ValueError("depth epsilon must be positive")
    offsets = splat_offsets(splat_radius)
    pts = cloud.points
    if threads > 1 and len(cameras) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(
                pool.map(lambda c: _view_visibility(c, pts, offsets, depth_eps), cameras)
            )
    else:
        rows = [_view_visibility(c, pts, offsets, depth_eps) for c in cameras]
    return VisibilityMap(np.stack(rows, axis=0))


@dataclass
class Scene:
    """Normalized cloud with super points and per-point ground-truth labels."""

    cloud: PointCloud
    partition: SuperPointPartition
    gt_labels: np.ndarray  # (N,), -1 for null
    label_names: list[str]

    def __post_init__(self):
        self.gt_labels = np.asarray(self.gt_labels, dtype=np.int64)
        n = self.cloud.n
        if self.partition.n != n or self.gt_labels.shape != (n,):
            raise ValueError("scene components disagree on point count")
        if self.gt_labels.min(initial=0) < -1 or self.gt_labels.max(
            initial=-1
        ) >= len(self.label_names):
            raise ValueError("ground-truth label out of range")
        self.gt_labels.setflags(write=False)

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Scene)
            and self.cloud == other.cloud
            and self.partition == other.partition
            and np.array_equal(self.gt_labels, other.gt_labels)
            and self.label_names == other.label_names
        )


CLOUD_MAGIC = "#liftseg-cloud v1"
VIS_MAGIC = "#liftseg-vis v1"


def _labels_sidecar(path: str) -> str:
    stem, _ = os.path.splitext(path)
    return stem + ".labels.json"


def save_cloud(scene: Scene, path: str) -> None:
    """Write a scene as whitespace text plus the label-name JSON sidecar."""
    n = scene.cloud.n
    s = scene.partition.num_super_points
    lines = [f"{CLOUD_MAGIC} N={n} S={s} L={scene.num_labels}"]
    pts = scene.cloud.points
    assign = scene.partition.assignment
    gt = scene.gt_labels
    for i in range(n):
        x, y, z = (float(v) for v in pts[i])
        lines.append(f"{x!r} {y!r} {z!r} {assign[i]} {gt[i]}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(_labels_sidecar(path), "w") as f:
        json.dump({"labels": scene.label_names}, f, sort_keys=True)
        f.write("\n")


def load_cloud(path: str) -> Scene:
    """Parse a cloud file; raises ValueError naming the offending line."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith(CLOUD_MAGIC):
        raise ValueError(f"{path}: missing '{CLOUD_MAGIC}' header")
    header = dict(
        kv.split("=", 1) for kv in lines[0][len(CLOUD_MAGIC):].split() if "=" in kv
    )
    try:
        n, s, l = int(header["N"]), int(header["S"]), int(header["L"])
    except KeyError as e:
        raise ValueError(f"{path}: header missing field {e}") from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise ValueError(f"{path}: header says N={n} but found {len(body)} rows")
    pts = np.empty((n, 3))
    assign = np.empty(n, dtype=np.int64)
    gt = np.empty(n, dtype=np.int64)
    for i, ln in enumerate(body):
        fields = ln.split()
        if len(fields) != 5:
            raise ValueError(f"{path}:{i + 2}: expected 5 fields, got {len(fields)}")
        try:
            pts[i] = [float(v) for v in fields[:3]]
            assign[i] = int(fields[3])
            gt[i] = int(fields[4])
        except ValueError:
            raise ValueError(f"{path}:{i + 2}: malformed row") from None
    sidecar = _labels_sidecar(path)
    if os.path.exists(sidecar):
        with open(sidecar) as f:
            label_names = json.load(f)["labels"]
        if len(label_names) != l:
            raise ValueError(f"{sidecar}: {len(label_names)} names but header L={l}")
    else:
        label_names = [f"part{j}" for j in range(l)]
    return Scene(
        cloud=PointCloud(pts),
        partition=SuperPointPartition(assign, s),
        gt_labels=gt,
        label_names=label_names,
    )


def save_visibility(vis: VisibilityMap, path: str) -> None:
    with open(path, "w") as f:
        f.write(f"{VIS_MAGIC} K={vis.num_views} N={vis.n}\n")
        for k in range(vis.num_views):
            f.write("".join("1" if v else "0" for v in vis.mask[k]) + "\n")


def load_visibility(path: str) -> VisibilityMap:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith(VIS_MAGIC):
        raise ValueError(f"{path}: missing '{VIS_MAGIC}' header")
    header = dict(
        kv.split("=", 1) for kv in lines[0][len(VIS_MAGIC):].split() if "=" in kv
    )
    k, n = int(header["K"]), int(header["N"])
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != k:
        raise ValueError(f"{path}: expected {k} view rows, found {len(rows)}")
    mask = np.zeros((k, n), dtype=bool)
    for i, row in enumerate(rows):
        if len(row) != n or set(row) - {"0", "1"}:
            raise ValueError(f"{path}:{i + 2}: bad visibility row")
        mask[i] = np.frombuffer(row.encode(), dtype=np.uint8) == ord("1")
    return VisibilityMap(mask)
