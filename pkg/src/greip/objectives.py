"""Training losses, the auxiliary-loss ramp, and the FIFO feature queues."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .numerics import Tensor, ops

QUEUE_LABEL_INIT = 75.0
PEARSON_EPS = 1e-8


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    k1: float = 1.0
    k2: float = 0.1
    k3: float = 0.001
    k4: float = 0.01
    temperature: float = 1.0
    floor: float = 1.5e-3

    def __post_init__(self):
        for name in ("k1", "k2", "k3", "k4", "temperature", "floor"):
            if not getattr(self, name) > 0:
                raise ObjectiveError(f"{name} must be positive, got {getattr(self, name)}")


class FeatureQueue:
    """Three lock-step FIFO stores: rPPG features, noise features, HR labels.

    ``q_r_norms`` keeps the pre-normalization norm of every queued rPPG
    feature, which the orthogonality penalty needs.
    """

    def __init__(self, capacity: int = 5120, dim: int = 128, seed: int = 0):
        if capacity < 1 or dim < 1:
            raise ObjectiveError("capacity and dim must be positive")
        rng = np.random.default_rng(seed)
        self.capacity = capacity
        self.dim = dim
        self.q_r = _unit_rows(rng.normal(size=(capacity, dim)))
        self.q_n = _unit_rows(rng.normal(size=(capacity, dim)))
        self.q_l = np.full(capacity, QUEUE_LABEL_INIT)
        self.q_r_norms = np.ones(capacity)
        self.ids = np.full(capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.n_pushed = 0

    def __len__(self) -> int:
        return self.capacity

    def push(self, z_phy_vecs, z_n_vecs, labels, z_phy_norms=None, ids=None) -> None:
        queue_update(self, z_phy_vecs, z_n_vecs, labels, z_phy_norms, ids)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _values(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def queue_update(q: FeatureQueue, z_phy_vecs, z_n_vecs, labels, z_phy_norms=None, ids=None) -> FeatureQueue:
    """Overwrite the oldest rows of all three stores with a detached batch."""
    zr = _values(z_phy_vecs)
    zn = _values(z_n_vecs)
    lab = _values(labels).reshape(-1)
    b = lab.size
    if zr.shape != (b, q.dim) or zn.shape != (b, q.dim):
        raise ObjectiveError(f"batch shapes {zr.shape}/{zn.shape} do not match {b} labels of dim {q.dim}")
    if b > q.capacity:
        raise ObjectiveError(f"batch of {b} exceeds queue capacity {q.capacity}")
    norms = np.ones(b) if z_phy_norms is None else _values(z_phy_norms).reshape(-1)
    slots = (q.cursor + np.arange(b)) % q.capacity
    q.q_r[slots] = zr
    q.q_n[slots] = zn
    q.q_l[slots] = lab
    q.q_r_norms[slots] = norms
    q.ids[slots] = np.arange(q.n_pushed, q.n_pushed + b) if ids is None else np.asarray(ids)
    q.cursor = int((q.cursor + b) % q.capacity)
    q.n_pushed += b
    return q


def label_weights(labels: np.ndarray, queue_labels: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise softmax of ``-|L_i - L_j| / temperature`` over the queue."""
    w = -np.abs(np.asarray(labels, dtype=np.float64)[:, None] - queue_labels[None, :]) / temperature
    w = np.exp(w - w.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def continuity_loss(z_phy_vecs: Tensor, labels, q: FeatureQueue, v: float = 1.0) -> Tensor:
    """Cross-entropy from label-distance weights to feature-similarity softmax, summed over the batch."""
    if not v > 0:
        raise ObjectiveError(f"temperature must be positive, got {v}")
    if q.capacity < 1:
        raise ObjectiveError("empty queue")
    labels = _values(labels).reshape(-1)
    if z_phy_vecs.shape != (labels.size, q.dim):
        raise ObjectiveError(f"features {z_phy_vecs.shape} do not match {labels.size} labels of dim {q.dim}")
    omega = label_weights(labels, q.q_l, v)
    sims = ops.matmul(z_phy_vecs, Tensor(q.q_r.T))
    return -ops.sum(ops.log_softmax(sims, axis=-1) * omega)


def orthogonality_loss(z_n: Tensor, q_r: np.ndarray, t: float = 1.5e-3, q_r_norms=None) -> Tensor:
    """Squared cosine between noise features and queued rPPG features, plus unit-norm penalties.

    ``z_n`` holds the pooled noise features before normalization. The result
    is floored at ``t`` and carries no gradient below the floor.
    """
    if not t > 0:
        raise ObjectiveError(f"floor t must be positive, got {t}")
    q_r = _values(q_r)
    norms_q = np.ones(q_r.shape[0]) if q_r_norms is None else _values(q_r_norms)
    norms_n = ops.sqrt(ops.sum(ops.square(z_n), axis=-1) + 1e-12)
    z_unit = z_n / ops.reshape(norms_n, (z_n.shape[0], 1))
    cos = ops.matmul(z_unit, Tensor(q_r.T))
    raw = (ops.mean(ops.square(cos))
           + ops.mean(ops.square(norms_n - 1.0))
           + float(np.mean((norms_q - 1.0) ** 2))) / 3.0
    return ops.maximum(raw, t)


def pearson_bvp_loss(pred: Tensor, gt) -> Tensor:
    """One minus the batch-mean Pearson correlation between predicted and true waveforms."""
    gt = _values(gt)
    if pred.ndim != 2 or pred.shape != gt.shape:
        raise ObjectiveError(f"pred {pred.shape} and gt {gt.shape} must both be (B, L)")
    if pred.shape[1] < 2:
        raise ObjectiveError("need at least 2 samples per waveform")
    gt_c = gt - gt.mean(axis=1, keepdims=True)
    gt_var = (gt_c * gt_c).mean(axis=1)
    pred_c = pred - ops.mean(pred, axis=1, keepdims=True)
    cov = ops.mean(pred_c * gt_c, axis=1)
    pred_var = ops.mean(ops.square(pred_c), axis=1)
    denom = ops.sqrt(ops.maximum(pred_var * gt_var, PEARSON_EPS**2))
    return 1.0 - ops.mean(cov / denom)


def hr_l1_loss(hr_pred: Tensor, hr_gt) -> Tensor:
    hr_gt = _values(hr_gt).reshape(-1)
    if hr_pred.shape != hr_gt.shape:
        raise ObjectiveError(f"hr_pred {hr_pred.shape} and hr_gt {hr_gt.shape} differ")
    return ops.mean(ops.abs(hr_pred - hr_gt))


def lambda_schedule(iter_current: int, iter_total: int, dann_shift: bool = False) -> float:
    if iter_total <= 0 or not 0 <= iter_current <= iter_total:
        raise ObjectiveError(f"invalid iteration {iter_current} of {iter_total}")
    r = iter_current / iter_total
    lam = 2.0 / (1.0 + math.exp(-10.0 * r))
    return lam - 1.0 if dann_shift else lam


LOSS_NAMES = ("bvp", "hr", "con", "ort")


def overall_loss(parts: Mapping[str, Tensor | float], w: LossWeights, iter_current: int, iter_total: int,
                 dann_shift: bool = False) -> Tensor:
    """``k1*bvp + lambda*(k2*hr + k3*con + k4*ort)``; absent parts count as zero."""
    unknown = set(parts) - set(LOSS_NAMES)
    if unknown:
        raise ObjectiveError(f"unknown loss parts {sorted(unknown)}")
    for name, value in parts.items():
        v = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ObjectiveError(f"loss part {name} is not finite")
    lam = lambda_schedule(iter_current, iter_total, dann_shift)

    def part(name):
        return parts.get(name, 0.0)

    aux = w.k2 * part("hr") + w.k3 * part("con") + w.k4 * part("ort")
    total = w.k1 * part("bvp") + lam * aux
    return total if isinstance(total, Tensor) else Tensor(total)
