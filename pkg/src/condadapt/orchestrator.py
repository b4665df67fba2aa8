"""Runtime adapter selection and the online-learning state machine.

Frames stream through a FIFO buffer; the buffer-averaged condition descriptor
is compared against the parameter memory. When it sits farther than the
calibrated threshold from every stored condition, a full unsupervised
adaptation episode runs: fine-tune the nearest generators on the buffer,
regenerate training data from the reference sequence, train a new adapter
from the nearest stored one, and publish a new memory record.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .adapter import TaskWeighting, train_adapter
from .classifier import ConditionClassifier, average_descriptor
from .errors import ContractError
from .gan import GanHyper, GanModels, finetune_pair, generate_condition_sequence
from .memory import AdapterRecord, ParameterMemory
from .rng import Rng
from .tasks import PseudoGroundTruth, TaskNet
from .world import SampleBatch


class FrameBuffer:
    """Most recent `capacity` frames, oldest evicted first."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ContractError("buffer capacity must be positive")
        self.capacity = capacity
        self._frames: deque = deque(maxlen=capacity)

    def push(self, image: np.ndarray) -> None:
        self._frames.append(np.asarray(image, dtype=np.float32))

    def __len__(self) -> int:
        return len(self._frames)

    def frames(self) -> np.ndarray:
        """Oldest-to-newest stack."""
        return np.stack(list(self._frames))

    @property
    def full(self) -> bool:
        return len(self._frames) == self.capacity


@dataclass(frozen=True)
class NoveltyPolicy:
    threshold: float
    min_fill: int

    def __post_init__(self):
        if self.threshold <= 0:
            raise ContractError("novelty threshold must be positive")

    def is_novel(self, distance: float) -> bool:
        """Strict inequality: a distance exactly at the threshold is Known."""
        return distance > self.threshold


@dataclass
class NoveltyResult:
    novel: bool
    distance: float
    nearest_id: Optional[int]


@dataclass
class OnlineHyper:
    gan: GanHyper = field(default_factory=GanHyper)
    gan_epochs: int = 5
    adapter_epochs: int = 5
    adapter_batch: int = 8
    adapter_lr: float = 5e-4
    adapter_patience: int = 2
    weighting: TaskWeighting = field(default_factory=TaskWeighting)


class EventLog:
    """Line-delimited JSON log with a logical (monotone) timestamp."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self.events: list[dict] = []
        self._t = 0

    def emit(self, event: str, **fields) -> dict:
        self._t += 1
        entry = {"timestamp": self._t, "event": event, **fields}
        self.events.append(entry)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry


class OnlineRuntime:
    """Selection path plus the Monitoring -> Adapting -> Monitoring cycle."""

    def __init__(
        self,
        classifier: ConditionClassifier,
        memory: ParameterMemory,
        policy: NoveltyPolicy,
        seg: TaskNet,
        retrieval: TaskNet,
        reference_train: SampleBatch,
        pseudo_train: PseudoGroundTruth,
        reference_val: SampleBatch,
        pseudo_val: PseudoGroundTruth,
        gan_checkpoints: dict[int, GanModels],
        hyper: OnlineHyper,
        rng: Rng,
        log: Optional[EventLog] = None,
    ):
        self.classifier = classifier
        self.memory = memory
        self.policy = policy
        self.seg = seg
        self.retrieval = retrieval
        self.reference_train = reference_train
        self.pseudo_train = pseudo_train
        self.reference_val = reference_val
        self.pseudo_val = pseudo_val
        self.gan_checkpoints = gan_checkpoints
        self.hyper = hyper
        self.rng = rng
        self.log = log or EventLog()
        self.buffer = FrameBuffer(policy.min_fill)
        self.state = "Monitoring"

    def push_frame(self, image: np.ndarray) -> None:
        self.buffer.push(image)

    def select_adapter(self, image: np.ndarray) -> AdapterRecord:
        """Classify one frame and fetch its condition's adapter; never an ensemble."""
        cid = int(self.classifier.predict(image[None])[0])
        try:
            record = self.memory.query_by_index(cid)
        except Exception:
            # unseen class index: fall back to the nearest stored descriptor
            record, _ = self.memory.query_by_descriptor(self.classifier.extract_descriptor(image))
        self.log.emit("select", condition_id=record.condition_id, predicted=cid)
        return record

    def detect_novelty(self) -> NoveltyResult:
        """Buffer-averaged descriptor vs nearest stored; Novel iff strictly beyond tau."""
        if len(self.buffer) < self.policy.min_fill:
            raise ContractError("buffer below minimum fill for novelty detection")
        avg = average_descriptor(self.classifier.extract_descriptors(self.buffer.frames()))
        record, dist = self.memory.query_by_descriptor(avg)
        novel = self.policy.is_novel(dist)
        self.log.emit(
            "novelty_check",
            distance=float(dist),
            threshold=self.policy.threshold,
            nearest_id=record.condition_id,
            novel=bool(novel),
        )
        return NoveltyResult(novel=novel, distance=float(dist), nearest_id=record.condition_id)

    def run_online_adaptation(self) -> AdapterRecord:
        """Full unsupervised episode for the condition currently in the buffer."""
        if self.state != "Monitoring":
            raise ContractError(f"cannot start adaptation while {self.state}")
        self.state = "Adapting"
        self.log.emit("adaptation_start", buffer=len(self.buffer))
        try:
            frames = self.buffer.frames()
            avg = average_descriptor(self.classifier.extract_descriptors(frames))
            seed_record, seed_dist = self.memory.query_by_descriptor(avg, require_generators=True)
            seed_gan = self.gan_checkpoints[seed_record.condition_id]
            seed_adapter_record, _ = self.memory.query_by_descriptor(avg)
            new_id = self.memory.next_id(minimum=self.classifier.num_conditions)
            self.log.emit("seed_selected", gan_seed=seed_record.condition_id,
                          adapter_seed=seed_adapter_record.condition_id, distance=seed_dist, new_id=new_id)

            seed_gan_hash = (
                seed_gan.generators.g_ab.content_hash(),
                seed_gan.generators.g_ba.content_hash(),
            )
            seed_adapter_hash = seed_adapter_record.adapter_params.content_hash()

            models, _ = finetune_pair(
                seed_gan,
                self.reference_train.images,
                frames,
                self.hyper.gan,
                self.rng.split("gan").split(new_id),
                epochs=self.hyper.gan_epochs,
                new_condition_id=new_id,
            )
            self.log.emit("gan_finetuned", new_id=new_id)

            generated_train = generate_condition_sequence(models.generators.g_ab, self.reference_train, new_id)
            generated_val = generate_condition_sequence(models.generators.g_ab, self.reference_val, new_id)
            self.log.emit("sequence_generated", count=len(generated_train))

            adapter_params, info = train_adapter(
                new_id,
                generated_train,
                generated_val,
                self.pseudo_train,
                self.pseudo_val,
                seed_adapter_record.adapter_params,
                self.seg,
                self.retrieval,
                self.hyper.weighting,
                self.rng.split("adapter").split(new_id),
                epochs=self.hyper.adapter_epochs,
                batch_size=self.hyper.adapter_batch,
                lr=self.hyper.adapter_lr,
                patience=self.hyper.adapter_patience,
            )
            self.log.emit("adapter_trained", new_id=new_id, epochs=info["epochs_ran"])

            # clone-before-finetune contract
            if (
                seed_gan.generators.g_ab.content_hash() != seed_gan_hash[0]
                or seed_gan.generators.g_ba.content_hash() != seed_gan_hash[1]
                or seed_adapter_record.adapter_params.content_hash() != seed_adapter_hash
            ):
                raise ContractError("online adaptation mutated a stored seed")

            record = AdapterRecord(
                condition_id=new_id,
                descriptor=avg,
                adapter_params=adapter_params,
                generator_ab=models.generators.g_ab,
                generator_ba=models.generators.g_ba,
                provenance={
                    "origin": "online",
                    "parent_condition_id": seed_adapter_record.condition_id,
                    "gan_seed_condition_id": seed_record.condition_id,
                    "timestamp": self.log._t,
                },
            )
            self.memory.store(record)
            self.gan_checkpoints[new_id] = models
            self.log.emit("record_stored", new_id=new_id)
        except Exception:
            self.state = "Monitoring"
            self.log.emit("adaptation_failed")
            raise
        self.state = "Monitoring"
        self.log.emit("adaptation_done", new_id=record.condition_id)
        return record


def calibrate_threshold(
    classifier: ConditionClassifier,
    condition_val_images: dict[int, np.ndarray],
    centroids: dict[int, np.ndarray],
    buffer_len: int,
    rng: Rng,
    sigmas: float = 3.0,
    buffers_per_condition: int = 16,
) -> float:
    """tau = mu + sigmas * std of within-condition buffer-averaged distances."""
    dists = []
    for cid, images in sorted(condition_val_images.items()):
        descs = classifier.extract_descriptors(images)
        draw = rng.split("tau").split(cid)
        for _ in range(buffers_per_condition):
            idx = draw.integers(buffer_len, len(images))
            avg = average_descriptor(descs[idx])
            dists.append(float(np.linalg.norm(avg - centroids[cid])))
    mu = float(np.mean(dists))
    sd = float(np.std(dists))
    return mu + sigmas * sd
