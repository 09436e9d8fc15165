"""Finite-difference verification of every hand-derived gradient.

Three suites: the relaxed-IoU loss alone, the weight network alone (including
the cross-row coupling of context normalization), and the full pipeline from
MLP parameters through weighted voting, softmax and lifting to the loss.
Checks run at generic parameter scales, away from the hinge kinks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import loss as loss_mod
from . import train, vote, weightnet
from .detect import Detection, DetectionSet, compute_membership
from .geom import (
    PointCloud,
    Scene,
    SuperPointPartition,
    compute_visibility,
    fixed_viewpoints,
)

FD_STEP = 1e-5
MODULE_TOL = 1e-4
END_TO_END_TOL = 1e-3
REL_GUARD = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tolerance


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_GUARD)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def central_diff(fn, arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function over every entry."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        up = fn()
        arr[idx] = orig - h
        down = fn()
        arr[idx] = orig
        grad[idx] = (up - down) / (2 * h)
        it.iternext()
    return grad


def check_loss_gradient(seed: int = 0, instances: int = 20) -> CheckResult:
    """mriou_grad against central differences on random soft predictions."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(5, 31))
        l = int(rng.integers(1, 5))
        labels = rng.integers(-1, l, size=n)
        gt = loss_mod.GroundTruth(labels, l)
        pred = rng.uniform(0.05, 0.95, size=(l, n))
        analytic = loss_mod.mriou_grad(gt, pred)
        numeric = central_diff(lambda: loss_mod.mriou_loss(gt, pred), pred)
        worst = max(worst, rel_err(analytic, numeric))
    return CheckResult("loss/mriou_grad", worst, MODULE_TOL)


def _random_net(rng, input_dim: int, hidden: int) -> weightnet.WeightNetParams:
    # Generic O(1) parameter scale keeps finite differences well conditioned.
    return weightnet.WeightNetParams(
        w1=rng.normal(0.0, 0.5, size=(input_dim, hidden)),
        b1=rng.normal(0.0, 0.5, size=hidden),
        w2=rng.normal(0.0, 0.5, size=hidden),
        b2=float(rng.normal(0.0, 0.5)),
        tau=10.0,
        null_score=10.0,
    )


def check_weightnet_gradient(seed: int = 0, instances: int = 5) -> CheckResult:
    """Parameter and cross-row input gradients of the weight network."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 9))
        input_dim = int(rng.integers(4, 12))
        hidden = int(rng.integers(3, 9))
        params = _random_net(rng, input_dim, hidden)
        data = rng.normal(0.0, 1.0, size=(n, input_dim))
        # Near-constant hidden columns make the normalization extremely
        # curved and wreck the finite-difference estimate; resample until
        # every column is well spread (only matters for tiny batches).
        while n > 1 and (data @ params.w1).std(axis=0).min() < 0.2:
            data = rng.normal(0.0, 1.0, size=(n, input_dim))
        upstream = rng.normal(0.0, 1.0, size=n)

        def objective() -> float:
            w, _ = weightnet.forward(params, data)
            return float(upstream @ w)

        w, cache = weightnet.forward(params, data)
        grads, d_input = weightnet.backward(params, cache, upstream)
        pairs = [
            (grads.w1, params.w1),
            (grads.b1, params.b1),
            (grads.w2, params.w2),
            (np.array(grads.b2), None),
            (d_input, data),
        ]
        for analytic, arr in pairs:
            if arr is None:
                orig = params.b2
                params.b2 = orig + FD_STEP
                up = objective()
                params.b2 = orig - FD_STEP
                down = objective()
                params.b2 = orig
                numeric = np.array((up - down) / (2 * FD_STEP))
            else:
                numeric = central_diff(objective, arr)
            worst = max(worst, rel_err(analytic, numeric))
    return CheckResult("weightnet/backward", worst, MODULE_TOL)


def random_pipeline_instance(
    rng: np.random.Generator,
    max_points: int = 30,
    max_super_points: int = 6,
    max_labels: int = 4,
    max_detections: int = 12,
    views: int = 2,
    resolution: int = 64,
):
    """Small random scene + detections for end-to-end checks."""
    n = int(rng.integers(max_points // 2, max_points + 1))
    s = int(rng.integers(2, max_super_points + 1))
    l = int(rng.integers(2, max_labels + 1))
    pts = rng.normal(size=(n, 3))
    pts /= np.maximum(np.linalg.norm(pts, axis=1, keepdims=True), 1e-9)
    pts *= rng.uniform(0.3, 1.0, size=(n, 1))
    assignment = np.concatenate([np.arange(s), rng.integers(0, s, size=n - s)])
    gt_labels = rng.integers(-1, l, size=n)
    scene = Scene(
        cloud=PointCloud(pts),
        partition=SuperPointPartition(assignment, s),
        gt_labels=gt_labels,
        label_names=[f"part{j}" for j in range(l)],
    )
    cameras = fixed_viewpoints(views, width=resolution, height=resolution)
    feature_dim = 2
    dets = []
    num_dets = int(rng.integers(1, max_detections + 1))
    for _ in range(num_dets):
        x0 = rng.uniform(0, resolution - 8)
        y0 = rng.uniform(0, resolution - 8)
        x1 = rng.uniform(x0 + 4, resolution)
        y1 = rng.uniform(y0 + 4, resolution)
        dets.append(
            Detection(
                k=int(rng.integers(0, views)),
                j=int(rng.integers(0, l)),
                box=(x0, y0, x1, y1),
                feature=rng.normal(size=feature_dim),
                conf=float(rng.uniform(0.1, 0.9)),
            )
        )
    detections = DetectionSet(
        dets, num_views=views, label_names=scene.label_names, feature_dim=feature_dim
    )
    obj = train.PipelineObject(
        scene=scene,
        cameras=cameras,
        detections=detections,
        visibility=compute_visibility(scene.cloud, cameras),
        membership=compute_membership(scene.cloud, cameras, detections, "box"),
    )
    return obj


def check_end_to_end_gradient(
    seed: int = 0,
    instances: int = 20,
    loss_kind: str = "mriou",
    octaves: int = 2,
    hidden: int = 8,
) -> CheckResult:
    """Every trainable parameter through vote -> softmax -> lift -> loss."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        obj = random_pipeline_instance(rng)
        batch = weightnet.assemble_inputs(obj.detections, obj.cameras, octaves)
        params = _random_net(rng, batch.data.shape[1], hidden)
        gt = obj.ground_truth()

        def objective() -> float:
            _, _, _, normalized = train.weighted_pipeline(params, obj, batch)
            return train.objective(
                gt, obj.scene.partition, normalized, loss_kind, 0.5
            )

        _, grads = train.pipeline_loss_and_grads(
            params, obj, batch, gt, loss_kind, 0.5
        )
        for analytic, arr in (
            (grads.net.w1, params.w1),
            (grads.net.b1, params.b1),
            (grads.net.w2, params.w2),
        ):
            worst = max(worst, rel_err(analytic, central_diff(objective, arr)))
        for name, analytic in (("b2", grads.net.b2), ("null_score", grads.null_score)):
            orig = getattr(params, name)
            setattr(params, name, orig + FD_STEP)
            up = objective()
            setattr(params, name, orig - FD_STEP)
            down = objective()
            setattr(params, name, orig)
            worst = max(worst, rel_err(np.array(analytic), np.array((up - down) / (2 * FD_STEP))))
    return CheckResult(f"pipeline/{loss_kind}", worst, END_TO_END_TOL)


def run_all(seed: int = 0, instances: int = 20) -> list[CheckResult]:
    return [
        check_loss_gradient(seed, instances),
        check_weightnet_gradient(seed, max(3, instances // 4)),
        check_end_to_end_gradient(seed, instances, "mriou"),
        check_end_to_end_gradient(seed + 1, max(3, instances // 4), "cross_entropy"),
    ]
