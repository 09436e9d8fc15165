"""Few-shot training of the weight-prediction network.

One optimizer step consumes one whole object: all of its detections pass
through the network together (context normalization is per object), the
weighted vote and softmax produce soft per-point predictions, and the
relaxed-IoU loss is backpropagated by hand all the way to the MLP
parameters and the learnable null logit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import loss as loss_mod
from . import vote, weightnet
from .detect import DetectionSet, MembershipTensor, compute_membership
from .geom import (
    Camera,
    DEFAULT_DEPTH_EPS,
    DEFAULT_SPLAT_RADIUS,
    Scene,
    VisibilityMap,
    compute_visibility,
)

LOSS_KINDS = ("mriou", "cross_entropy", "both")


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "mriou"
    mix_weight: float = 0.5
    tau: float = weightnet.DEFAULT_TAU
    pe_octaves: int = weightnet.DEFAULT_PE_OCTAVES
    hidden: int = weightnet.DEFAULT_HIDDEN
    null_score_init: float = weightnet.DEFAULT_NULL_SCORE_INIT
    init_std: float = weightnet.DEFAULT_INIT_STD

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if not 0.0 <= self.mix_weight <= 1.0:
            raise ValueError("mixing weight must lie in [0, 1]")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_train_miou: list[float] = field(default_factory=list)
    final_val_miou: float = 0.0
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "epoch_train_miou": self.epoch_train_miou,
            "final_val_miou": self.final_val_miou,
            "wall_time_s": self.wall_time_s,
        }


@dataclass
class PipelineObject:
    """One object ready for the pipeline: scene, detections and the
    precomputed visibility and membership tensors."""

    scene: Scene
    cameras: list[Camera]
    detections: DetectionSet
    visibility: VisibilityMap
    membership: MembershipTensor

    @classmethod
    def prepare(
        cls,
        scene: Scene,
        cameras: list[Camera],
        detections: DetectionSet,
        mode: str = "box",
        splat_radius: float = DEFAULT_SPLAT_RADIUS,
        depth_eps: float = DEFAULT_DEPTH_EPS,
        threads: int = 1,
    ) -> "PipelineObject":
        vis = compute_visibility(scene.cloud, cameras, splat_radius, depth_eps, threads)
        mem = compute_membership(scene.cloud, cameras, detections, mode)
        return cls(
            scene=scene,
            cameras=cameras,
            detections=detections,
            visibility=vis,
            membership=mem,
        )

    def ground_truth(self) -> loss_mod.GroundTruth:
        return loss_mod.GroundTruth(self.scene.gt_labels, self.scene.num_labels)


def _forward_weights(params, batch):
    if batch.num_detections == 0:
        return np.zeros(0), None
    return weightnet.forward(params, batch)


def weighted_pipeline(
    params: weightnet.WeightNetParams,
    obj: PipelineObject,
    batch: weightnet.EncodedBatch,
):
    """Run weightnet -> weighted vote -> softmax; returns the pieces needed
    for labeling, losses and the backward pass."""
    weights, net_cache = _forward_weights(params, batch)
    smat, vote_cache = vote.score_weighted_cached(
        obj.scene.partition, obj.visibility, obj.membership, obj.detections, weights
    )
    normalized = vote.normalize_scores(smat, params.null_score)
    return weights, net_cache, vote_cache, normalized


def objective(
    gt: loss_mod.GroundTruth,
    partition,
    normalized: vote.ScoreMatrix,
    kind: str,
    mix_weight: float,
) -> float:
    probs = normalized.values
    value = 0.0
    if kind in ("mriou", "both"):
        soft = loss_mod.lift_scores(partition, probs[:, :-1])
        w = 1.0 if kind == "mriou" else 1.0 - mix_weight
        value += w * loss_mod.mriou_loss(gt, soft)
    if kind in ("cross_entropy", "both"):
        point_probs = probs[partition.assignment]
        w = 1.0 if kind == "cross_entropy" else mix_weight
        value += w * loss_mod.cross_entropy_loss(gt, point_probs)
    return value


def objective_grad_probs(
    gt: loss_mod.GroundTruth,
    partition,
    normalized: vote.ScoreMatrix,
    kind: str,
    mix_weight: float,
) -> np.ndarray:
    """dObjective/dNormalizedScores, shape (S, L+1)."""
    probs = normalized.values
    s, cols = probs.shape
    grad = np.zeros((s, cols))
    if kind in ("mriou", "both"):
        soft = loss_mod.lift_scores(partition, probs[:, :-1])
        point_grad = loss_mod.mriou_grad(gt, soft)
        w = 1.0 if kind == "mriou" else 1.0 - mix_weight
        grad[:, :-1] += w * loss_mod.lift_backward(partition, point_grad)
    if kind in ("cross_entropy", "both"):
        point_probs = probs[partition.assignment]
        pg = loss_mod.cross_entropy_grad(gt, point_probs)
        w = 1.0 if kind == "cross_entropy" else mix_weight
        for c in range(cols):
            grad[:, c] += w * np.bincount(
                partition.assignment, weights=pg[:, c], minlength=s
            )
    return grad


@dataclass
class PipelineGrads:
    net: weightnet.WeightNetGrads | None
    null_score: float


def pipeline_loss_and_grads(
    params: weightnet.WeightNetParams,
    obj: PipelineObject,
    batch: weightnet.EncodedBatch,
    gt: loss_mod.GroundTruth,
    kind: str = "mriou",
    mix_weight: float = 0.5,
) -> tuple[float, PipelineGrads]:
    """Objective value plus hand-derived gradients for every trainable
    parameter (MLP weights and the null logit)."""
    partition = obj.scene.partition
    weights, net_cache, vote_cache, normalized = weighted_pipeline(params, obj, batch)
    value = objective(gt, partition, normalized, kind, mix_weight)

    d_probs = objective_grad_probs(gt, partition, normalized, kind, mix_weight)
    d_logits = vote.softmax_backward(normalized.values, d_probs)
    d_null = float(d_logits[:, -1].sum())
    d_weights = vote.score_backward(vote_cache, d_logits[:, :-1])
    if net_cache is None:
        return value, PipelineGrads(net=None, null_score=d_null)
    net_grads, _ = weightnet.backward(params, net_cache, d_weights)
    return value, PipelineGrads(net=net_grads, null_score=d_null)


def hard_labeling(
    params: weightnet.WeightNetParams,
    obj: PipelineObject,
    batch: weightnet.EncodedBatch,
) -> vote.Labeling:
    _, _, _, normalized = weighted_pipeline(params, obj, batch)
    return vote.assign_labels(normalized, obj.scene.partition)


def hard_miou(
    params: weightnet.WeightNetParams,
    obj: PipelineObject,
    batch: weightnet.EncodedBatch,
) -> float:
    return loss_mod.miou(obj.ground_truth(), hard_labeling(params, obj, batch))


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, arrays: dict, grads: dict) -> None:
        for key, g in grads.items():
            arrays[key] -= self.lr * g


class _Adam:
    def __init__(self, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, arrays: dict, grads: dict) -> None:
        self.t += 1
        for key, g in grads.items():
            m = self.m.setdefault(key, np.zeros_like(arrays[key]))
            v = self.v.setdefault(key, np.zeros_like(arrays[key]))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            arrays[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return _Sgd(config.lr)
    return _Adam(config.lr, config.beta1, config.beta2, config.adam_eps)


def _apply_step(optimizer, params: weightnet.WeightNetParams, grads: PipelineGrads):
    arrays = {
        "b2": np.array(params.b2),
        "null_score": np.array(params.null_score),
    }
    grad_arrays = {"null_score": np.array(grads.null_score)}
    if grads.net is not None:
        arrays.update({"w1": params.w1, "b1": params.b1, "w2": params.w2})
        grad_arrays.update(
            {
                "w1": grads.net.w1,
                "b1": grads.net.b1,
                "w2": grads.net.w2,
                "b2": np.array(grads.net.b2),
            }
        )
    optimizer.step(arrays, grad_arrays)
    params.b2 = float(arrays["b2"])
    params.null_score = float(arrays["null_score"])


def train(
    objects: list[PipelineObject],
    config: TrainConfig,
    val_objects: list[PipelineObject] | None = None,
) -> tuple[weightnet.WeightNetParams, TrainReport]:
    """Train the weight network on whole objects.

    Deterministic given the seed: identical reports (up to wall time) and
    bit-identical parameters across runs.  Upstream detection features are
    inputs, never touched.  Raises on a non-finite loss, naming the epoch.
    """
    if not objects:
        raise ValueError("need at least one training object")
    dims = {(o.detections.feature_dim, o.scene.num_labels) for o in objects}
    if len(dims) > 1:
        raise ValueError(f"objects disagree on feature/label dims: {sorted(dims)}")

    feature_dim = objects[0].detections.feature_dim
    params = weightnet.init_params(
        input_dim=weightnet.encoded_dim(feature_dim, config.pe_octaves),
        hidden=config.hidden,
        tau=config.tau,
        null_score=config.null_score_init,
        init_std=config.init_std,
        seed=config.seed,
    )
    batches = [
        weightnet.assemble_inputs(o.detections, o.cameras, config.pe_octaves)
        for o in objects
    ]
    gts = [o.ground_truth() for o in objects]

    optimizer = _make_optimizer(config)
    rng = np.random.default_rng(config.seed)
    report = TrainReport()
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        losses = []
        mious = []
        for i in range(len(objects)):
            partition = objects[i].scene.partition
            _, _, _, normalized = weighted_pipeline(params, objects[i], batches[i])
            losses.append(
                objective(gts[i], partition, normalized, config.loss, config.mix_weight)
            )
            labeling = vote.assign_labels(normalized, partition)
            mious.append(loss_mod.miou(gts[i], labeling))
        epoch_loss = float(np.mean(losses))
        if not np.isfinite(epoch_loss):
            raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch}")
        report.epoch_losses.append(epoch_loss)
        report.epoch_train_miou.append(float(np.mean(mious)))
        for i in rng.permutation(len(objects)):
            _, grads = pipeline_loss_and_grads(
                params, objects[i], batches[i], gts[i], config.loss, config.mix_weight
            )
            _apply_step(optimizer, params, grads)

    val = val_objects if val_objects is not None else objects
    val_batches = [
        weightnet.assemble_inputs(o.detections, o.cameras, config.pe_octaves)
        for o in val
    ]
    report.final_val_miou = float(
        np.mean([hard_miou(params, val[i], val_batches[i]) for i in range(len(val))])
    )
    report.wall_time_s = time.perf_counter() - t0
    return params, report


def predicted_weights(
    params: weightnet.WeightNetParams,
    obj: PipelineObject,
    octaves: int = weightnet.DEFAULT_PE_OCTAVES,
) -> np.ndarray:
    batch = weightnet.assemble_inputs(obj.detections, obj.cameras, octaves)
    weights, _ = _forward_weights(params, batch)
    return weights


def evaluate_confidence_baseline(
    objects: list[PipelineObject],
    mode: str = "raw",
    tau: float = weightnet.DEFAULT_TAU,
    null_score: float = weightnet.DEFAULT_NULL_SCORE_INIT,
) -> float:
    """Mean mIoU when upstream confidences replace the learned weights.

    ``raw`` uses the confidences directly; ``normalized`` rescales them so
    their sum matches a uniform-tau weighting of the same detections.
    """
    if mode not in ("raw", "normalized"):
        raise ValueError(f"unknown baseline mode {mode!r}")
    scores = []
    for obj in objects:
        conf = obj.detections.confidences()
        w = conf.copy()
        if mode == "normalized" and conf.size and conf.sum() > 0:
            w = conf * (conf.size * tau / conf.sum())
        smat = vote.score_weighted(
            obj.scene.partition, obj.visibility, obj.membership, obj.detections, w
        )
        labeling = vote.assign_labels(
            vote.normalize_scores(smat, null_score), obj.scene.partition
        )
        scores.append(loss_mod.miou(obj.ground_truth(), labeling))
    return float(np.mean(scores))
