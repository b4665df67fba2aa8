"""Frozen task networks, approximated ground truth, and evaluation metrics.

Both task networks are trained once on reference-condition renders, then
frozen; a content hash taken at freeze time lets every later stage prove the
weights never moved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, ContractError
from .loops import epoch_minibatches
from .optim import Adam
from .params import ParamSet, conv_param, linear_param, zeros_param
from .rng import Rng
from .world import SampleBatch


class SegmentationNet:
    """Three 3x3 conv layers plus a 1x1 class head; per-pixel logits."""

    def __init__(self, params: ParamSet, num_classes: int):
        self.params = params
        self.num_classes = num_classes

    @classmethod
    def build(cls, rng: Rng, num_classes: int = 5, widths=(12, 24, 24)) -> "SegmentationNet":
        p = ParamSet()
        chans = [3, *widths]
        for i in range(3):
            p.add(f"c{i}.w", conv_param(rng.split(f"c{i}"), chans[i + 1], chans[i], 3))
            p.add(f"c{i}.b", zeros_param(chans[i + 1]))
        p.add("head.w", conv_param(rng.split("head"), num_classes, chans[-1], 1))
        p.add("head.b", zeros_param(num_classes))
        return cls(p, num_classes)

    def logits(self, x: Tensor) -> Tensor:
        h = x
        for i in range(3):
            h = ad.relu(ad.channel_bias(ad.conv2d(h, self.params[f"c{i}.w"], 1, 1), self.params[f"c{i}.b"]))
        return ad.channel_bias(ad.conv2d(h, self.params["head.w"], 1, 0), self.params["head.b"])

    def loss(self, images: Tensor, masks: np.ndarray) -> Tensor:
        lg = self.logits(images)
        n, k = lg.shape[0], lg.shape[1]
        flat = ad.reshape(ad.transpose(lg, (0, 2, 3, 1)), (-1, k))
        return ad.softmax_cross_entropy(flat, Tensor(ad.one_hot(masks.reshape(-1), k)))

    def predict(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        """Argmax class map per image; inference only."""
        out = np.empty((images.shape[0], images.shape[2], images.shape[3]), dtype=np.int32)
        for s in range(0, images.shape[0], batch):
            lg = self.logits(Tensor(images[s : s + batch]))
            out[s : s + batch] = lg.data.argmax(axis=1)
        return out


class RetrievalNet:
    """Three stride-2 convs, region average pooling, then a 32-d embedding.

    The pooling step makes the descriptor respond to region-level appearance
    rather than pixel texture, the behavior expected of a place embedding.
    """

    def __init__(self, params: ParamSet, embed_dim: int, num_places: int):
        self.params = params
        self.embed_dim = embed_dim
        self.num_places = num_places

    @classmethod
    def build(cls, rng: Rng, num_places: int = 32, image_hw: int = 48, widths=(8, 16, 32), embed_dim: int = 32):
        p = ParamSet()
        chans = [3, *widths]
        side = image_hw
        for i in range(3):
            p.add(f"c{i}.w", conv_param(rng.split(f"c{i}"), chans[i + 1], chans[i], 4))
            p.add(f"c{i}.b", zeros_param(chans[i + 1]))
            side //= 2
        flat = widths[-1] * (side // 2) * (side // 2)
        p.add("embed.w", linear_param(rng.split("embed"), flat, embed_dim))
        p.add("embed.b", zeros_param(embed_dim))
        p.add("head.w", linear_param(rng.split("out"), embed_dim, num_places))
        p.add("head.b", zeros_param(num_places))
        return cls(p, embed_dim, num_places)

    def _features(self, x: Tensor) -> Tensor:
        h = x
        for i in range(3):
            h = ad.relu(ad.channel_bias(ad.conv2d(h, self.params[f"c{i}.w"], 2, 1), self.params[f"c{i}.b"]))
        h = ad.avg_pool2d(h, 2)
        n = h.shape[0]
        return ad.linear(ad.reshape(h, (n, -1)), self.params["embed.w"], self.params["embed.b"])

    def descriptor(self, x: Tensor) -> Tensor:
        """L2-normalized penultimate activations; differentiable."""
        return ad.l2_normalize(self._features(x))

    def loss(self, images: Tensor, place_ids: np.ndarray) -> Tensor:
        logits = ad.linear(self._features(images), self.params["head.w"], self.params["head.b"])
        return ad.softmax_cross_entropy(logits, Tensor(ad.one_hot(place_ids, self.num_places)))

    def descriptors(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        out = np.empty((images.shape[0], self.embed_dim), dtype=np.float32)
        for s in range(0, images.shape[0], batch):
            out[s : s + batch] = self.descriptor(Tensor(images[s : s + batch])).data
        return out


@dataclass
class TaskNet:
    """A task model plus its freeze state; frozen weights must never change."""

    kind: str  # "segmentation" | "retrieval"
    net: object
    frozen: bool = False
    frozen_hash: Optional[str] = None

    @property
    def params(self) -> ParamSet:
        return self.net.params

    def freeze(self) -> None:
        self.params.set_requires_grad(False)
        self.frozen = True
        self.frozen_hash = self.params.content_hash()

    def verify_frozen(self) -> str:
        if not self.frozen:
            raise ContractError(f"{self.kind} task net is not frozen")
        current = self.params.content_hash()
        if current != self.frozen_hash:
            raise ContractError(f"{self.kind} task net parameters changed after freezing")
        return current


@dataclass
class PseudoGroundTruth:
    """Frozen-task outputs on reference renders, reused as labels downstream."""

    seg_maps: np.ndarray  # (N, H, W) int32
    descriptors: np.ndarray  # (N, D) float32, L2-normalized


def train_segmentation(
    train: SampleBatch,
    gate: SampleBatch,
    rng: Rng,
    epochs: int = 12,
    batch_size: int = 16,
    lr: float = 1e-3,
    target_miou: float = 0.85,
) -> tuple[TaskNet, dict]:
    """Train the segmentation stand-in on exact masks, then freeze it."""
    net = SegmentationNet.build(rng.split("init"), num_classes=int(train.masks.max()) + 1)
    opt = Adam(net.params, lr=lr)
    data_rng = rng.split("batches")
    losses = []
    for epoch in range(epochs):
        for idx in epoch_minibatches(len(train), batch_size, data_rng):
            with Tape() as tape:
                loss = net.loss(Tensor(train.images[idx]), train.masks[idx])
            opt.step(tape.gradients(loss, net.params.tensors()))
            losses.append(loss.item())
    achieved = dataset_miou(net.predict(gate.images), gate.masks, net.num_classes)
    if achieved < target_miou:
        raise ConfigError(
            f"segmentation gate failed: mIOU {achieved:.4f} < {target_miou} "
            f"after {epochs} epochs (final loss {losses[-1]:.4f})"
        )
    task = TaskNet("segmentation", net)
    task.freeze()
    return task, {"gate_miou": achieved, "final_loss": losses[-1], "steps": len(losses)}


def train_retrieval(
    train: SampleBatch,
    gate_query: SampleBatch,
    gate_db: SampleBatch,
    rng: Rng,
    epochs: int = 10,
    batch_size: int = 16,
    lr: float = 1e-3,
    target_top1: float = 0.9,
    num_places: int = 32,
    jitter_scale: float = 0.05,
    jitter_noise: float = 0.008,
) -> tuple[TaskNet, dict]:
    """Train the place-embedding stand-in by place classification, then freeze.

    Mild photometric jitter during training keeps the descriptor from keying
    on exact pixel values; the appearance conditions are far outside the
    jitter range, so they still break it.
    """
    net = RetrievalNet.build(rng.split("init"), num_places=num_places, image_hw=train.images.shape[2])
    opt = Adam(net.params, lr=lr)
    data_rng = rng.split("batches")
    aug_rng = rng.split("jitter")
    losses = []
    for epoch in range(epochs):
        for idx in epoch_minibatches(len(train), batch_size, data_rng):
            images = train.images[idx]
            if jitter_scale > 0 or jitter_noise > 0:
                scale = 1.0 + jitter_scale * (2.0 * aug_rng.uniform((len(idx), 1, 1, 1)) - 1.0)
                images = np.clip(
                    images * scale + aug_rng.normal(images.shape, std=jitter_noise), 0.0, 1.0
                ).astype(np.float32)
            with Tape() as tape:
                loss = net.loss(Tensor(images), train.place_ids[idx])
            opt.step(tape.gradients(loss, net.params.tensors()))
            losses.append(loss.item())
    result = evaluate_retrieval(
        net.descriptors(gate_query.images), gate_query.place_ids, net.descriptors(gate_db.images), gate_db.place_ids
    )
    if result.top1 < target_top1:
        raise ConfigError(
            f"retrieval gate failed: top-1 {result.top1:.4f} < {target_top1} after {epochs} epochs"
        )
    task = TaskNet("retrieval", net)
    task.freeze()
    return task, {"gate_top1": result.top1, "gate_auc": result.auc, "final_loss": losses[-1], "steps": len(losses)}


def compute_pseudo_gt(reference: SampleBatch, seg: TaskNet, retrieval: TaskNet) -> PseudoGroundTruth:
    """Frozen-task outputs on the reference sequence, stored as labels."""
    if not np.all(reference.condition_ids == 0):
        raise ContractError("pseudo ground truth is computed on reference renders only")
    seg.verify_frozen()
    retrieval.verify_frozen()
    return PseudoGroundTruth(
        seg_maps=seg.net.predict(reference.images),
        descriptors=retrieval.net.descriptors(reference.images),
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def miou(pred_map: np.ndarray, gt_map: np.ndarray, num_classes: int) -> float:
    """Mean IOU over the classes present in the ground-truth map."""
    pred = np.asarray(pred_map)
    gt = np.asarray(gt_map)
    if pred.shape != gt.shape:
        raise ContractError("prediction and ground truth shapes differ")
    for arr in (pred, gt):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ContractError("class id out of range")
    ious = []
    for c in range(num_classes):
        gt_c = gt == c
        if not gt_c.any():
            continue
        pred_c = pred == c
        inter = np.logical_and(gt_c, pred_c).sum()
        union = np.logical_or(gt_c, pred_c).sum()
        ious.append(inter / union)
    return float(np.mean(ious))


def dataset_miou(pred_maps: np.ndarray, gt_maps: np.ndarray, num_classes: int) -> float:
    """Global mIOU: intersection/union counts aggregated over the whole split."""
    pred = np.asarray(pred_maps).reshape(-1)
    gt = np.asarray(gt_maps).reshape(-1)
    if pred.shape != gt.shape:
        raise ContractError("prediction and ground truth shapes differ")
    ious = []
    for c in range(num_classes):
        gt_c = gt == c
        if not gt_c.any():
            continue
        pred_c = pred == c
        inter = np.logical_and(gt_c, pred_c).sum()
        union = np.logical_or(gt_c, pred_c).sum()
        ious.append(inter / union)
    return float(np.mean(ious))


@dataclass
class RetrievalResult:
    """Nearest-neighbor matches and the threshold-swept PR curve."""

    distances: np.ndarray  # (Q,) nearest-db distance per query
    correct: np.ndarray  # (Q,) bool, nearest db entry has the query's place id
    thresholds: np.ndarray
    precisions: np.ndarray  # includes the (recall 0, precision 1) anchor
    recalls: np.ndarray
    auc: float
    top1: float


def pr_auc(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """Trapezoidal area under a PR curve, integrating precision over recall."""
    order = np.argsort(recalls, kind="stable")
    r = np.asarray(recalls, dtype=np.float64)[order]
    p = np.asarray(precisions, dtype=np.float64)[order]
    return float(np.trapezoid(p, r))


def evaluate_retrieval(
    query_desc: np.ndarray,
    query_places: np.ndarray,
    db_desc: np.ndarray,
    db_places: np.ndarray,
) -> RetrievalResult:
    """Nearest-db-descriptor matching with a distance-threshold PR sweep.

    A match is correct iff the nearest database entry carries the query's
    exact place id. The curve starts from a (recall 0, precision 1) anchor
    and appends one point per unique nearest distance, ascending.
    """
    q = np.asarray(query_desc, dtype=np.float64)
    d = np.asarray(db_desc, dtype=np.float64)
    if q.ndim != 2 or d.ndim != 2 or q.shape[1] != d.shape[1]:
        raise ContractError("descriptor matrices must be (N, D) with matching D")
    dists = np.sqrt(np.maximum(((q[:, None, :] - d[None, :, :]) ** 2).sum(axis=2), 0.0))
    nn_idx = dists.argmin(axis=1)
    nn_dist = dists[np.arange(len(q)), nn_idx]
    correct = np.asarray(db_places)[nn_idx] == np.asarray(query_places)
    nq = len(q)

    thresholds = np.unique(nn_dist)
    precisions = [1.0]
    recalls = [0.0]
    for t in thresholds:
        accepted = nn_dist <= t
        tp = int(np.logical_and(accepted, correct).sum())
        precisions.append(tp / int(accepted.sum()))
        recalls.append(tp / nq)
    precisions = np.asarray(precisions)
    recalls = np.asarray(recalls)
    return RetrievalResult(
        distances=nn_dist.astype(np.float32),
        correct=correct,
        thresholds=thresholds.astype(np.float32),
        precisions=precisions,
        recalls=recalls,
        auc=pr_auc(recalls, precisions),
        top1=float(correct.mean()),
    )
