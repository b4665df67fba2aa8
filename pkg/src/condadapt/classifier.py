"""Condition classifier with a 128-d penultimate descriptor.

The classifier picks which adapter serves each frame; its penultimate layer
doubles as a condition descriptor for memory addressing and novelty
detection, so unseen conditions can be recognized without retraining.
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
from .params import ParamSet, conv_param, linear_param, zeros_param
from .rng import Rng

DESCRIPTOR_DIM = 128


class ConditionClassifier:
    """4 stride-2 convs, then 3 fully connected layers and a softmax head."""

    def __init__(self, params: ParamSet, num_conditions: int):
        self.params = params
        self.num_conditions = num_conditions

    @classmethod
    def build(cls, rng: Rng, num_conditions: int, image_hw: int = 48, widths=(8, 16, 32, 64), fc1: int = 192):
        p = ParamSet()
        chans = [3, *widths]
        side = image_hw
        for i in range(4):
            p.add(f"c{i}.w", conv_param(rng.split(f"c{i}"), chans[i + 1], chans[i], 4))
            p.add(f"c{i}.b", zeros_param(chans[i + 1]))
            side //= 2
        flat = widths[-1] * side * side
        p.add("f0.w", linear_param(rng.split("f0"), flat, fc1))
        p.add("f0.b", zeros_param(fc1))
        p.add("f1.w", linear_param(rng.split("f1"), fc1, DESCRIPTOR_DIM))
        p.add("f1.b", zeros_param(DESCRIPTOR_DIM))
        p.add("f2.w", linear_param(rng.split("f2"), DESCRIPTOR_DIM, num_conditions))
        p.add("f2.b", zeros_param(num_conditions))
        return cls(p, num_conditions)

    def _descriptor_tensor(self, x: Tensor) -> Tensor:
        p = self.params
        h = x
        for i in range(4):
            h = ad.relu(ad.channel_bias(ad.conv2d(h, p[f"c{i}.w"], 2, 1), p[f"c{i}.b"]))
        h = ad.relu(ad.linear(ad.reshape(h, (h.shape[0], -1)), p["f0.w"], p["f0.b"]))
        return ad.relu(ad.linear(h, p["f1.w"], p["f1.b"]))

    def logits(self, x: Tensor) -> Tensor:
        return ad.linear(self._descriptor_tensor(x), self.params["f2.w"], self.params["f2.b"])

    def classify(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        """Softmax distribution over conditions per image."""
        out = np.empty((images.shape[0], self.num_conditions), dtype=np.float32)
        for s in range(0, images.shape[0], batch):
            out[s : s + batch] = ad.softmax(self.logits(Tensor(images[s : s + batch])).data)
        return out

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.classify(images).argmax(axis=1).astype(np.int32)

    def extract_descriptors(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        """Length-128 penultimate activations, un-normalized."""
        out = np.empty((images.shape[0], DESCRIPTOR_DIM), dtype=np.float32)
        for s in range(0, images.shape[0], batch):
            out[s : s + batch] = self._descriptor_tensor(Tensor(images[s : s + batch])).data
        return out

    def extract_descriptor(self, image: np.ndarray) -> np.ndarray:
        return self.extract_descriptors(image[None])[0]


def average_descriptor(descriptors: np.ndarray) -> np.ndarray:
    """Elementwise mean over a buffer of descriptors."""
    d = np.asarray(descriptors, dtype=np.float32)
    if d.ndim != 2 or d.shape[1] != DESCRIPTOR_DIM or d.shape[0] == 0:
        raise ContractError(f"expected a non-empty (N, {DESCRIPTOR_DIM}) descriptor stack")
    return d.mean(axis=0)


def train_classifier(
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    num_conditions: int,
    rng: Rng,
    epochs: int = 8,
    batch_size: int = 16,
    lr: float = 5e-4,
    patience: int = 3,
) -> tuple[ConditionClassifier, dict]:
    """Cross-entropy training over condition labels with best-val checkpointing."""
    limit_blas_threads()
    clf = ConditionClassifier.build(rng.split("init"), num_conditions, image_hw=train_images.shape[2])
    opt = Adam(clf.params, lr=lr)
    data_rng = rng.split("batches")

    def val_loss() -> float:
        total = 0.0
        for s in range(0, len(val_images), 64):
            e = min(s + 64, len(val_images))
            loss = ad.softmax_cross_entropy(
                clf.logits(Tensor(val_images[s:e])), Tensor(ad.one_hot(val_labels[s:e], num_conditions))
            )
            total += loss.item() * (e - s)
        return total / len(val_images)

    tracker = BestCheckpoint(clf.params, patience)
    curve = []
    for epoch in range(epochs):
        for idx in epoch_minibatches(len(train_images), batch_size, data_rng):
            with Tape() as tape:
                loss = ad.softmax_cross_entropy(
                    clf.logits(Tensor(train_images[idx])), Tensor(ad.one_hot(train_labels[idx], num_conditions))
                )
            opt.step(tape.gradients(loss, clf.params.tensors()))
        curve.append(val_loss())
        if tracker.update(curve[-1]):
            break
    tracker.restore()
    accuracy = float((clf.predict(val_images) == val_labels).mean())
    return clf, {"val_accuracy": accuracy, "epochs_ran": len(curve), "val_curve": curve}


def confusion_matrix(clf: ConditionClassifier, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Rows are true conditions, columns predicted; trace/total is accuracy."""
    preds = clf.predict(images)
    n = clf.num_conditions
    out = np.zeros((n, n), dtype=np.int64)
    for t, p in zip(labels, preds):
        out[int(t), int(p)] += 1
    return out
