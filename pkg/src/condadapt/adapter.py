"""Condition-specific input adapters trained through the frozen tasks.

An adapter is a small encoder-decoder that maps a degraded image to one the
frozen task networks understand. Supervision comes exclusively from the task
losses evaluated against approximated ground truth; the tasks themselves
never receive gradient updates (hash-verified before and after training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._blas import limit_blas_threads
from .autodiff import Tape, Tensor
from .errors import ContractError
from .loops import BestCheckpoint, epoch_minibatches
from .optim import Adam
from .params import ParamSet, conv_param, conv_transpose_param, ones_param, zeros_param
from .rng import Rng
from .tasks import PseudoGroundTruth, TaskNet
from .world import SampleBatch


@dataclass
class TaskWeighting:
    """Non-negative per-task loss weights; at least one must be positive."""

    alpha_seg: float = 1.0
    alpha_retrieval: float = 10.0

    def __post_init__(self):
        if self.alpha_seg < 0 or self.alpha_retrieval < 0:
            raise ContractError("task weights must be non-negative")
        if self.alpha_seg == 0 and self.alpha_retrieval == 0:
            raise ContractError("at least one task weight must be positive")


class AdapterNet:
    """3 stride-2 downs, residual bottleneck, 3 stride-2 ups with skip concats."""

    def __init__(self, params: ParamSet):
        self.params = params

    @classmethod
    def build(cls, rng: Rng, widths=(16, 32, 64), n_res: int = 2) -> "AdapterNet":
        p = ParamSet()
        w1, w2, w3 = widths
        downs = [(5, w1), (w1, w2), (w2, w3)]
        for i, (ci, co) in enumerate(downs):
            p.add(f"d{i}.w", conv_param(rng.split(f"d{i}"), co, ci, 4))
            p.add(f"d{i}.g", ones_param(co))
            p.add(f"d{i}.b", zeros_param(co))
        for r in range(n_res):
            for j in range(2):
                p.add(f"r{r}{j}.w", conv_param(rng.split(f"r{r}{j}"), w3, w3, 3))
                p.add(f"r{r}{j}.g", ones_param(w3))
                p.add(f"r{r}{j}.b", zeros_param(w3))
        # decoder inputs are channel concats of the previous stage and the skip
        p.add("u0.w", conv_transpose_param(rng.split("u0"), 2 * w3, w2, 4))
        p.add("u0.g", ones_param(w2))
        p.add("u0.b", zeros_param(w2))
        p.add("u1.w", conv_transpose_param(rng.split("u1"), 2 * w2, w1, 4))
        p.add("u1.g", ones_param(w1))
        p.add("u1.b", zeros_param(w1))
        # two heads predict a per-pixel affine map in logit space
        p.add("u2s.w", conv_transpose_param(rng.split("u2s"), 2 * w1, 3, 4))
        p.add("u2s.b", zeros_param(3))
        p.add("u2o.w", conv_transpose_param(rng.split("u2o"), 2 * w1, 3, 4))
        p.add("u2o.b", zeros_param(3))
        return cls(p)

    def _n_res(self) -> int:
        n = 0
        while f"r{n}0.w" in self.params:
            n += 1
        return n

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        e0 = ad.relu(ad.instance_norm(ad.conv2d(ad.with_coords(x), p["d0.w"], 2, 1), p["d0.g"], p["d0.b"]))
        e1 = ad.relu(ad.instance_norm(ad.conv2d(e0, p["d1.w"], 2, 1), p["d1.g"], p["d1.b"]))
        e2 = ad.relu(ad.instance_norm(ad.conv2d(e1, p["d2.w"], 2, 1), p["d2.g"], p["d2.b"]))
        h = e2
        for r in range(self._n_res()):
            inner = ad.relu(ad.instance_norm(ad.conv2d(h, p[f"r{r}0.w"], 1, 1), p[f"r{r}0.g"], p[f"r{r}0.b"]))
            inner = ad.instance_norm(ad.conv2d(inner, p[f"r{r}1.w"], 1, 1), p[f"r{r}1.g"], p[f"r{r}1.b"])
            h = ad.add(h, inner)
        h = ad.relu(ad.instance_norm(ad.conv_transpose2d(ad.concat_channels(h, e2), p["u0.w"], 2, 1), p["u0.g"], p["u0.b"]))
        h = ad.relu(ad.instance_norm(ad.conv_transpose2d(ad.concat_channels(h, e1), p["u1.w"], 2, 1), p["u1.g"], p["u1.b"]))
        top = ad.concat_channels(h, e0)
        hs = ad.channel_bias(ad.conv_transpose2d(top, p["u2s.w"], 2, 1), p["u2s.b"])
        ho = ad.channel_bias(ad.conv_transpose2d(top, p["u2o.w"], 2, 1), p["u2o.b"])
        # sigmoid head over a predicted per-pixel affine map of the input's
        # logit: photometric distortions (gamma, brightness, tint) are close
        # to affine there, so their inverses are the cheapest solutions and
        # the head rests at the input image when both heads are silent
        scale = ad.affine(ad.tanh(hs), 0.75, 1.0)
        return ad.sigmoid(ad.add(ad.mul(scale, ad.bounded_logit(x, 0.15)), ho))

    def apply(self, images: np.ndarray, batch: int = 32) -> np.ndarray:
        out = np.empty_like(images)
        for s in range(0, images.shape[0], batch):
            out[s : s + batch] = self(Tensor(images[s : s + batch])).data
        return out


def adapt(images: np.ndarray, adapter_params: ParamSet) -> np.ndarray:
    """Run the adapter on a stack of images; output stays in [0, 1]."""
    return AdapterNet(adapter_params).apply(images)


def pretrain_identity(
    ref_images: np.ndarray,
    rng: Rng,
    epochs: int = 4,
    batch_size: int = 8,
    lr: float = 5e-4,
) -> tuple[ParamSet, dict]:
    """Train the seed adapter to reproduce reference images (L1 objective)."""
    limit_blas_threads()
    net = AdapterNet.build(rng.split("init"))
    if epochs == 0:
        return net.params, {"final_l1": None, "steps": 0}
    opt = Adam(net.params, lr=lr)
    data_rng = rng.split("batches")
    last = None
    steps = 0
    for epoch in range(epochs):
        for idx in epoch_minibatches(len(ref_images), batch_size, data_rng):
            x = Tensor(ref_images[idx])
            with Tape() as tape:
                loss = ad.l1_loss(net(x), x)
            opt.step(tape.gradients(loss, net.params.tensors()))
            last = loss.item()
            steps += 1
    return net.params, {"final_l1": last, "steps": steps}


def task_supervision_loss(
    adapted: Tensor,
    pseudo_seg: np.ndarray,
    pseudo_desc: np.ndarray,
    seg: TaskNet,
    retrieval: TaskNet,
    weighting: TaskWeighting,
) -> Tensor:
    """Weighted task discrepancy against approximated ground truth.

    Segmentation contributes cross-entropy to the pseudo label maps;
    retrieval contributes the squared L2 gap to the pseudo descriptors.
    """
    terms = []
    if weighting.alpha_seg > 0:
        logits = seg.net.logits(adapted)
        k = logits.shape[1]
        flat = ad.reshape(ad.transpose(logits, (0, 2, 3, 1)), (-1, k))
        seg_loss = ad.softmax_cross_entropy(flat, Tensor(ad.one_hot(pseudo_seg.reshape(-1), k)))
        terms.append(ad.affine(seg_loss, weighting.alpha_seg))
    if weighting.alpha_retrieval > 0:
        desc = retrieval.net.descriptor(adapted)
        ret_loss = ad.squared_l2(desc, Tensor(pseudo_desc))
        terms.append(ad.affine(ret_loss, weighting.alpha_retrieval))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def train_adapter(
    condition_id: int,
    generated_train: SampleBatch,
    generated_val: SampleBatch,
    pseudo_train: PseudoGroundTruth,
    pseudo_val: PseudoGroundTruth,
    seed_params: ParamSet,
    seg: TaskNet,
    retrieval: TaskNet,
    weighting: TaskWeighting,
    rng: Rng,
    epochs: int = 20,
    batch_size: int = 8,
    lr: float = 5e-4,
    patience: int = 2,
) -> tuple[ParamSet, dict]:
    """Clone the seed and train on generated data through the frozen tasks.

    Early-stops when the validation task loss stops improving; returns the
    best-validation parameters. The seed is never mutated.
    """
    limit_blas_threads()
    seg_hash = seg.verify_frozen()
    retr_hash = retrieval.verify_frozen()
    if len(generated_train) != len(pseudo_train.seg_maps):
        raise ContractError("generated set and pseudo ground truth are misaligned")

    net = AdapterNet(seed_params.clone())
    opt = Adam(net.params, lr=lr)
    data_rng = rng.split("batches")

    def val_loss() -> float:
        total = 0.0
        count = 0
        for s in range(0, len(generated_val), 16):
            e = min(s + 16, len(generated_val))
            loss = task_supervision_loss(
                net(Tensor(generated_val.images[s:e])),
                pseudo_val.seg_maps[s:e],
                pseudo_val.descriptors[s:e],
                seg,
                retrieval,
                weighting,
            )
            total += loss.item() * (e - s)
            count += e - s
        return total / count

    history = [val_loss()]
    tracker = BestCheckpoint(net.params, patience)
    tracker.update(history[0])
    for epoch in range(epochs):
        for idx in epoch_minibatches(len(generated_train), batch_size, data_rng):
            with Tape() as tape:
                loss = task_supervision_loss(
                    net(Tensor(generated_train.images[idx])),
                    pseudo_train.seg_maps[idx],
                    pseudo_train.descriptors[idx],
                    seg,
                    retrieval,
                    weighting,
                )
            opt.step(tape.gradients(loss, net.params.tensors()))
        history.append(val_loss())
        if tracker.update(history[-1]):
            break
    tracker.restore()

    if seg.verify_frozen() != seg_hash or retrieval.verify_frozen() != retr_hash:
        raise ContractError("frozen task hash changed during adapter training")
    return net.params, {
        "condition_id": condition_id,
        "val_history": history,
        "best_val": tracker.best_loss,
        "epochs_ran": len(history) - 1,
    }
