"""Weight-prediction network: sinusoidal positional encoding, per-object
context normalization between two linear layers, and a shifted hinge output
that pins the untrained weight to the positive constant tau.

All gradients are derived by hand; the context-normalization backward pass
couples the rows of a batch, which is exactly what lets the network see the
whole set of detections of one object at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .detect import DetectionSet
from .geom import Camera

DEFAULT_TAU = 10.0
DEFAULT_NULL_SCORE_INIT = 10.0
DEFAULT_HIDDEN = 256
DEFAULT_PE_OCTAVES = 10
DEFAULT_INIT_STD = 1e-4
CN_EPS = 1e-8


def positional_encoding(x, octaves: int = DEFAULT_PE_OCTAVES) -> np.ndarray:
    """Per coordinate: (x, sin(2^0 pi x), cos(2^0 pi x), ..., cos(2^(O-1) pi x)).

    Output length is n * (2 * octaves + 1).
    """
    vec = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(vec)):
        raise ValueError("positional encoding requires finite input")
    parts = []
    for xi in vec:
        comps = [xi]
        for o in range(octaves):
            arg = (2.0 ** o) * np.pi * xi
            comps.append(np.sin(arg))
            comps.append(np.cos(arg))
        parts.append(comps)
    return np.concatenate(parts) if parts else np.zeros(0)


def encoded_dim(feature_dim: int, octaves: int = DEFAULT_PE_OCTAVES) -> int:
    """Input width after concatenating the feature, a 3-D direction encoding
    and a 2-D box-position encoding."""
    per_coord = 2 * octaves + 1
    return feature_dim + 3 * per_coord + 2 * per_coord


@dataclass
class EncodedBatch:
    """One encoded row per detection of a single object."""

    data: np.ndarray  # (num_detections, encoded_dim)
    feature_dim: int
    octaves: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("encoded batch must be 2-D")
        if self.data.shape[1] != encoded_dim(self.feature_dim, self.octaves):
            raise ValueError("encoded batch width does not match its declared dims")

    @property
    def num_detections(self) -> int:
        return self.data.shape[0]


def assemble_inputs(
    detections: DetectionSet,
    cameras: list[Camera],
    octaves: int = DEFAULT_PE_OCTAVES,
) -> EncodedBatch:
    """Build the network input: feature + encoded view direction + encoded
    box center (normalized to the unit square)."""
    if detections.num_views != len(cameras):
        raise ValueError("camera list does not match the detection set")
    width = encoded_dim(detections.feature_dim, octaves)
    rows = np.zeros((len(detections), width))
    for i, det in enumerate(detections.detections):
        cam = cameras[det.k]
        x0, y0, x1, y1 = det.box
        center = np.array(
            [(x0 + x1) / 2.0 / cam.width, (y0 + y1) / 2.0 / cam.height]
        )
        rows[i] = np.concatenate(
            [
                det.feature,
                positional_encoding(np.asarray(cam.direction), octaves),
                positional_encoding(center, octaves),
            ]
        )
    return EncodedBatch(data=rows, feature_dim=detections.feature_dim, octaves=octaves)


def context_normalize(batch: np.ndarray, eps: float = CN_EPS) -> np.ndarray:
    """Standardize every feature column across the rows of the batch.

    A single-row batch (or a constant column) normalizes to zeros.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("context normalization needs a 2-D batch with >= 1 row")
    mean = x.mean(axis=0, keepdims=True)
    var = x.var(axis=0, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def _context_normalize_cached(x: np.ndarray, eps: float = CN_EPS):
    mean = x.mean(axis=0, keepdims=True)
    var = x.var(axis=0, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat, inv_std


def _context_normalize_backward(
    xhat: np.ndarray, inv_std: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    # Population-variance batch-norm Jacobian (no affine terms).
    g_mean = upstream.mean(axis=0, keepdims=True)
    gx_mean = (upstream * xhat).mean(axis=0, keepdims=True)
    return inv_std * (upstream - g_mean - xhat * gx_mean)


@dataclass
class WeightNetParams:
    """Two-layer MLP with context normalization plus the learnable null logit."""

    w1: np.ndarray  # (input_dim, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float
    tau: float = DEFAULT_TAU
    null_score: float = DEFAULT_NULL_SCORE_INIT

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = float(self.b2)
        if self.w1.ndim != 2 or self.b1.shape != (self.w1.shape[1],):
            raise ValueError("inconsistent first-layer shapes")
        if self.w2.shape != (self.w1.shape[1],):
            raise ValueError("inconsistent second-layer shapes")
        for arr in (self.w1, self.b1, self.w2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite network parameter")
        if not np.isfinite(self.b2) or not np.isfinite(self.null_score):
            raise ValueError("non-finite network parameter")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def copy(self) -> "WeightNetParams":
        return WeightNetParams(
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2,
            tau=self.tau,
            null_score=self.null_score,
        )


def init_params(
    input_dim: int,
    hidden: int = DEFAULT_HIDDEN,
    tau: float = DEFAULT_TAU,
    null_score: float = DEFAULT_NULL_SCORE_INIT,
    init_std: float = DEFAULT_INIT_STD,
    seed: int = 0,
) -> WeightNetParams:
    """Draw every MLP parameter from N(0, init_std^2) so the initial output
    sits at tau; the null logit starts at its configured constant."""
    rng = np.random.default_rng(seed)
    return WeightNetParams(
        w1=rng.normal(0.0, init_std, size=(input_dim, hidden)),
        b1=rng.normal(0.0, init_std, size=hidden),
        w2=rng.normal(0.0, init_std, size=hidden),
        b2=float(rng.normal(0.0, init_std)),
        tau=tau,
        null_score=null_score,
    )


@dataclass
class ForwardCache:
    x: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    hidden_act: np.ndarray
    pre_hinge: np.ndarray


@dataclass
class WeightNetGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float


def forward(
    params: WeightNetParams, batch
) -> tuple[np.ndarray, ForwardCache]:
    """Per-detection weights max(tau + mlp(x), 0) plus cached activations.

    ``batch`` is an :class:`EncodedBatch` or a raw (rows, input_dim) array.
    """
    x = batch.data if isinstance(batch, EncodedBatch) else np.asarray(batch, dtype=np.float64)
    if x.shape[1] != params.input_dim:
        raise ValueError(
            f"batch width {x.shape[1]} does not match network input "
            f"{params.input_dim}"
        )
    z1 = x @ params.w1 + params.b1
    xhat, inv_std = _context_normalize_cached(z1)
    hidden_act = np.maximum(xhat, 0.0)
    pre_hinge = params.tau + hidden_act @ params.w2 + params.b2
    weights = np.maximum(pre_hinge, 0.0)
    if not np.all(np.isfinite(weights)):
        raise ValueError("non-finite activation in weight network forward pass")
    cache = ForwardCache(
        x=x, xhat=xhat, inv_std=inv_std, hidden_act=hidden_act, pre_hinge=pre_hinge
    )
    return weights, cache


def backward(
    params: WeightNetParams, cache: ForwardCache, upstream: np.ndarray
) -> tuple[WeightNetGrads, np.ndarray]:
    """Parameter and input gradients given dLoss/dWeight per detection.

    The hinge subgradient at exactly -tau is 0, as is the hidden ReLU's at 0.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (cache.x.shape[0],):
        raise ValueError("upstream gradient does not match the cached batch")
    d_pre = upstream * (cache.pre_hinge > 0)
    d_w2 = cache.hidden_act.T @ d_pre
    d_b2 = float(d_pre.sum())
    d_hidden = np.outer(d_pre, params.w2)
    d_xhat = d_hidden * (cache.xhat > 0)
    d_z1 = _context_normalize_backward(cache.xhat, cache.inv_std, d_xhat)
    d_w1 = cache.x.T @ d_z1
    d_b1 = d_z1.sum(axis=0)
    d_x = d_z1 @ params.w1.T
    return WeightNetGrads(w1=d_w1, b1=d_b1, w2=d_w2, b2=d_b2), d_x


def save_checkpoint(params: WeightNetParams, path: str, seed: int | None = None) -> None:
    doc = {
        "version": 1,
        "seed": seed,
        "input_dim": params.input_dim,
        "hidden": params.hidden,
        "tau": params.tau,
        "null_score": params.null_score,
        "w1": [[float(v) for v in row] for row in params.w1],
        "b1": [float(v) for v in params.b1],
        "w2": [float(v) for v in params.w2],
        "b2": params.b2,
    }
    with open(path, "w") as f:
        json.dump(doc, f, separators=(",", ":"))
        f.write("\n")


def load_checkpoint(path: str) -> WeightNetParams:
    """Load a checkpoint, rejecting shape mismatches against its own header."""
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version")
    w1 = np.asarray(doc["w1"], dtype=np.float64)
    b1 = np.asarray(doc["b1"], dtype=np.float64)
    w2 = np.asarray(doc["w2"], dtype=np.float64)
    expected = (int(doc["input_dim"]), int(doc["hidden"]))
    if w1.shape != expected:
        raise ValueError(
            f"{path}: w1 has shape {w1.shape}, header declares {expected}"
        )
    if b1.shape != (expected[1],) or w2.shape != (expected[1],):
        raise ValueError(f"{path}: layer shapes disagree with the header")
    return WeightNetParams(
        w1=w1,
        b1=b1,
        w2=w2,
        b2=float(doc["b2"]),
        tau=float(doc["tau"]),
        null_score=float(doc["null_score"]),
    )
