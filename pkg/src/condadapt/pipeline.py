"""End-to-end pipeline stages behind the CLI.

Every stage reads the JSON config plus upstream artifacts from the output
directory and writes its own artifacts back, so each command is re-runnable
and byte-identical under a fixed seed.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import adapter as adapter_mod
from . import classifier as classifier_mod
from . import gan as gan_mod
from . import tasks as tasks_mod
from . import world
from ._blas import limit_blas_threads
from .errors import ConfigError, DependencyError
from .memory import (
    AdapterRecord,
    ParameterMemory,
    arrays_to_paramset,
    load_container,
    paramset_to_arrays,
    save_container,
)
from .orchestrator import (
    EventLog,
    NoveltyPolicy,
    OnlineHyper,
    OnlineRuntime,
    calibrate_threshold,
)
from .params import ParamSet
from .rng import Rng
from .world import ConditionSpec, SampleBatch, WorldConfig


@dataclass
class PipelineConfig:
    """Everything a full run needs; all seeds explicit."""

    # world
    image_hw: int = 48
    num_classes: int = 5
    num_places: int = 32
    layout_seed: int = 2024
    train_count: int = 512
    val_count: int = 64
    test_count: int = 128
    num_initial_conditions: int = 4
    heldout_condition_id: int = 5
    # master seed for every training stage
    seed: int = 7
    # gan
    gan_steps: int = 2000
    gan_batch: int = 4
    gan_lr: float = 2e-4
    gan_beta1: float = 0.5
    lambda_rec: float = 10.0
    lambda_adv: float = 1.0
    pool_size: int = 50
    gan_online_epochs: int = 5
    # tasks
    seg_epochs: int = 12
    retrieval_epochs: int = 10
    task_lr: float = 1e-3
    task_batch: int = 16
    seg_target_miou: float = 0.85
    retrieval_target_top1: float = 0.9
    # adapters
    adapter_lr: float = 5e-4
    adapter_epochs: int = 20
    adapter_online_epochs: int = 5
    adapter_batch: int = 8
    adapter_patience: int = 2
    identity_epochs: int = 4
    alpha_seg: float = 1.0
    alpha_retrieval: float = 10.0
    # classifier
    classifier_epochs: int = 8
    classifier_batch: int = 16
    classifier_lr: float = 5e-4
    # orchestrator
    buffer_len: int = 16
    tau_sigmas: float = 3.0

    def __post_init__(self):
        positive = [
            "image_hw", "num_classes", "num_places", "train_count", "val_count", "test_count",
            "num_initial_conditions", "gan_steps", "gan_batch", "seg_epochs", "retrieval_epochs",
            "task_batch", "adapter_epochs", "adapter_batch", "classifier_epochs", "classifier_batch",
            "buffer_len",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def world(self) -> WorldConfig:
        return WorldConfig(
            height=self.image_hw,
            width=self.image_hw,
            num_classes=self.num_classes,
            num_places=self.num_places,
            layout_seed=self.layout_seed,
            train_count=self.train_count,
            val_count=self.val_count,
            test_count=self.test_count,
        )

    def conditions(self) -> list[ConditionSpec]:
        specs = world.default_conditions()
        wanted = [0, *range(1, self.num_initial_conditions + 1), self.heldout_condition_id]
        by_id = {s.condition_id: s for s in specs}
        missing = [i for i in wanted if i not in by_id]
        if missing:
            raise ConfigError(f"no built-in condition specs for ids {missing}")
        return [by_id[i] for i in wanted]

    def initial_condition_ids(self) -> list[int]:
        return list(range(1, self.num_initial_conditions + 1))

    def gan_hyper(self) -> gan_mod.GanHyper:
        return gan_mod.GanHyper(
            lambda_rec=self.lambda_rec,
            lambda_adv=self.lambda_adv,
            steps=self.gan_steps,
            batch_size=self.gan_batch,
            pool_size=self.pool_size,
            lr=self.gan_lr,
            beta1=self.gan_beta1,
        )

    def weighting(self) -> adapter_mod.TaskWeighting:
        return adapter_mod.TaskWeighting(self.alpha_seg, self.alpha_retrieval)

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# artifact paths and helpers
# ---------------------------------------------------------------------------

class Paths:
    def __init__(self, out: str | Path):
        self.out = Path(out)
        self.datasets = self.out / "datasets"
        self.tasks = self.out / "tasks"
        self.gan = self.out / "gan"
        self.adapters = self.out / "adapters"
        self.classifier = self.out / "classifier"
        self.memory = self.out / "memory"
        self.eval = self.out / "eval"
        self.online = self.out / "online"
        self.report = self.out / "report"

    def dataset(self, condition_id: int, split: str) -> Path:
        return self.datasets / f"cond{condition_id}_{split}.adpt"


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing artifact {path}; run `condadapt {producer}` first")
    return path


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    os.replace(tmp, path)


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _load_split(paths: Paths, condition_id: int, split: str) -> SampleBatch:
    return world.load_batch(_require(paths.dataset(condition_id, split), "gen-data"))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_gen_data(cfg: PipelineConfig, paths: Paths) -> dict:
    """Render every (condition, split) dataset plus the sample manifest."""
    paths.datasets.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in cfg.conditions():
        for split in ("train", "val", "test"):
            batch = world.build_split(spec, split, cfg.world)
            rel = paths.dataset(spec.condition_id, split).name
            world.save_batch(paths.dataset(spec.condition_id, split), batch)
            for i in range(len(batch)):
                entries.append(
                    {
                        "path": rel,
                        "index": i,
                        "place_id": int(batch.place_ids[i]),
                        "condition_id": int(batch.condition_ids[i]),
                        "split": split,
                    }
                )
    world.write_manifest(paths.datasets / "manifest.json", entries)
    info = {"samples": len(entries), "conditions": [s.name for s in cfg.conditions()]}
    _write_json(paths.datasets / "info.json", info)
    return info


def stage_train_tasks(cfg: PipelineConfig, paths: Paths) -> dict:
    """Train and freeze both task networks on the reference condition."""
    limit_blas_threads()
    train = _load_split(paths, 0, "train")
    val = _load_split(paths, 0, "val")
    test = _load_split(paths, 0, "test")
    rng = Rng(cfg.seed).split("tasks")

    seg, seg_info = tasks_mod.train_segmentation(
        train, test, rng.split("seg"),
        epochs=cfg.seg_epochs, batch_size=cfg.task_batch, lr=cfg.task_lr, target_miou=cfg.seg_target_miou,
    )
    retr, retr_info = tasks_mod.train_retrieval(
        train, test, val, rng.split("retrieval"),
        epochs=cfg.retrieval_epochs, batch_size=cfg.task_batch, lr=cfg.task_lr,
        target_top1=cfg.retrieval_target_top1, num_places=cfg.num_places,
    )
    paths.tasks.mkdir(parents=True, exist_ok=True)
    save_container(
        paths.tasks / "seg.adpt",
        paramset_to_arrays(seg.params),
        extra={"kind": "segmentation", "num_classes": seg.net.num_classes, "frozen_hash": seg.frozen_hash},
    )
    save_container(
        paths.tasks / "retrieval.adpt",
        paramset_to_arrays(retr.params),
        extra={
            "kind": "retrieval",
            "embed_dim": retr.net.embed_dim,
            "num_places": retr.net.num_places,
            "frozen_hash": retr.frozen_hash,
        },
    )
    info = {
        "segmentation": seg_info,
        "retrieval": retr_info,
        "frozen_hashes": {"segmentation": seg.frozen_hash, "retrieval": retr.frozen_hash},
    }
    _write_json(paths.tasks / "info.json", info)
    return info


def load_tasks(paths: Paths) -> tuple[tasks_mod.TaskNet, tasks_mod.TaskNet]:
    arrays, extra = load_container(_require(paths.tasks / "seg.adpt", "train-tasks"))
    seg_net = tasks_mod.SegmentationNet(arrays_to_paramset(arrays, requires_grad=False), extra["num_classes"])
    seg = tasks_mod.TaskNet("segmentation", seg_net, frozen=True, frozen_hash=extra["frozen_hash"])
    seg.verify_frozen()

    arrays, extra = load_container(_require(paths.tasks / "retrieval.adpt", "train-tasks"))
    retr_net = tasks_mod.RetrievalNet(
        arrays_to_paramset(arrays, requires_grad=False), extra["embed_dim"], extra["num_places"]
    )
    retr = tasks_mod.TaskNet("retrieval", retr_net, frozen=True, frozen_hash=extra["frozen_hash"])
    retr.verify_frozen()
    return seg, retr


def stage_pseudo_gt(cfg: PipelineConfig, paths: Paths) -> dict:
    """Approximated ground truth: frozen-task outputs on reference renders."""
    seg, retr = load_tasks(paths)
    out = {}
    for split in ("train", "val"):
        ref = _load_split(paths, 0, split)
        pseudo = tasks_mod.compute_pseudo_gt(ref, seg, retr)
        save_container(
            paths.tasks / f"pseudo_{split}.adpt",
            {"seg_maps": pseudo.seg_maps.astype(np.float32), "descriptors": pseudo.descriptors},
            extra={"split": split},
        )
        quality = tasks_mod.dataset_miou(pseudo.seg_maps, ref.masks, cfg.num_classes)
        out[split] = {"count": len(ref), "pseudo_vs_exact_miou": quality}
    _write_json(paths.tasks / "pseudo_info.json", out)
    return out


def load_pseudo(paths: Paths, split: str) -> tasks_mod.PseudoGroundTruth:
    arrays, _ = load_container(_require(paths.tasks / f"pseudo_{split}.adpt", "pseudo-gt"))
    return tasks_mod.PseudoGroundTruth(
        seg_maps=arrays["seg_maps"].astype(np.int32), descriptors=arrays["descriptors"]
    )


def _gan_checkpoint_arrays(models: gan_mod.GanModels) -> dict:
    arrays = {}
    arrays.update(paramset_to_arrays(models.generators.g_ab, "gen_ab/"))
    arrays.update(paramset_to_arrays(models.generators.g_ba, "gen_ba/"))
    arrays.update(paramset_to_arrays(models.discriminators.d_a, "disc_a/"))
    arrays.update(paramset_to_arrays(models.discriminators.d_b, "disc_b/"))
    return arrays


def load_gan_checkpoint(path: Path, condition_id: int) -> gan_mod.GanModels:
    arrays, _ = load_container(path)
    return gan_mod.GanModels(
        gan_mod.GeneratorPair(
            arrays_to_paramset(arrays, "gen_ab/"), arrays_to_paramset(arrays, "gen_ba/"), condition_id
        ),
        gan_mod.DiscriminatorPair(arrays_to_paramset(arrays, "disc_a/"), arrays_to_paramset(arrays, "disc_b/")),
    )


def stage_train_gan(cfg: PipelineConfig, paths: Paths, only_condition: Optional[int] = None) -> dict:
    """Train one cycle pair per initial condition on unpaired sets."""
    limit_blas_threads()
    ref_train = _load_split(paths, 0, "train")
    ref_test = _load_split(paths, 0, "test")
    hyper = cfg.gan_hyper()
    specs = {s.condition_id: s for s in cfg.conditions()}
    paths.gan.mkdir(parents=True, exist_ok=True)
    info = {}
    for cid in cfg.initial_condition_ids():
        if only_condition is not None and cid != only_condition:
            continue
        cond_train = _load_split(paths, cid, "train")
        cond_test = _load_split(paths, cid, "test")
        seed_rng = Rng(cfg.seed).split("gan").split(cid)

        init_models = gan_mod._build_models(seed_rng.split("init"), cid)
        # diagnostic only: analytic transform of the same test traversals
        analytic = np.stack(
            [
                world.apply_condition(ref_test.sample(i), specs[cid], int(ref_test.jitter_seeds[i])).image
                for i in range(len(ref_test))
            ]
        )
        diag_init = gan_mod.translation_diagnostic(init_models.generators.g_ab, ref_test.images, analytic)
        models, history = gan_mod.train_pair(ref_train.images, cond_train.images, cid, hyper, seed_rng)
        diag_final = gan_mod.translation_diagnostic(models.generators.g_ab, ref_test.images, analytic)

        save_container(paths.gan / f"cond{cid}.adpt", _gan_checkpoint_arrays(models), extra={"condition_id": cid})
        _write_csv(
            paths.gan / f"history_cond{cid}.csv",
            ["step", "l_gen", "l_disc", "l_rec", "l_adv"],
            history.rows(),
        )
        info[str(cid)] = {
            "condition": specs[cid].name,
            "diag_l1_init": diag_init,
            "diag_l1_final": diag_final,
            "diag_ratio": diag_final / diag_init,
            "steps": len(history.steps),
            "final_l_gen": history.l_gen[-1],
            "cond_test_count": len(cond_test),
        }
        existing = {}
        if (paths.gan / "info.json").exists():
            existing = json.loads((paths.gan / "info.json").read_text())
        existing.update(info)
        _write_json(paths.gan / "info.json", existing)
    return info


def stage_train_adapters(cfg: PipelineConfig, paths: Paths) -> dict:
    """Identity-seed pretraining, then one adapter per initial condition."""
    limit_blas_threads()
    ref_train = _load_split(paths, 0, "train")
    ref_val = _load_split(paths, 0, "val")
    seg, retr = load_tasks(paths)
    pseudo_train = load_pseudo(paths, "train")
    pseudo_val = load_pseudo(paths, "val")
    weighting = cfg.weighting()
    rng = Rng(cfg.seed).split("adapters")
    paths.adapters.mkdir(parents=True, exist_ok=True)

    seed_params, seed_info = adapter_mod.pretrain_identity(
        ref_train.images, rng.split("identity"),
        epochs=cfg.identity_epochs, batch_size=cfg.adapter_batch, lr=cfg.adapter_lr,
    )
    id_out = adapter_mod.adapt(ref_val.images, seed_params)
    identity_l1 = float(np.abs(id_out - ref_val.images).mean())
    save_container(
        paths.adapters / "identity.adpt",
        paramset_to_arrays(seed_params),
        extra={"condition_id": 0, "origin": "identity-seed", "holdout_l1": identity_l1},
    )

    info = {"identity": {**seed_info, "holdout_l1": identity_l1, "hash": seed_params.content_hash()}}
    for cid in cfg.initial_condition_ids():
        arrays, _ = load_container(_require(paths.gan / f"cond{cid}.adpt", "train-gan"))
        g_ab = arrays_to_paramset(arrays, "gen_ab/")
        generated_train = gan_mod.generate_condition_sequence(g_ab, ref_train, cid)
        generated_val = gan_mod.generate_condition_sequence(g_ab, ref_val, cid)
        params, train_info = adapter_mod.train_adapter(
            cid, generated_train, generated_val, pseudo_train, pseudo_val,
            seed_params, seg, retr, weighting, rng.split("cond").split(cid),
            epochs=cfg.adapter_epochs, batch_size=cfg.adapter_batch,
            lr=cfg.adapter_lr, patience=cfg.adapter_patience,
        )
        save_container(
            paths.adapters / f"cond{cid}.adpt",
            paramset_to_arrays(params),
            extra={"condition_id": cid, "origin": "offline"},
        )
        _write_csv(
            paths.adapters / f"curve_cond{cid}.csv",
            ["epoch", "val_loss"],
            list(enumerate(train_info["val_history"])),
        )
        info[str(cid)] = {k: v for k, v in train_info.items() if k != "val_history"}
    info["identity_seed_hash_after"] = seed_params.content_hash()
    info["frozen_hashes"] = {"segmentation": seg.verify_frozen(), "retrieval": retr.verify_frozen()}
    _write_json(paths.adapters / "info.json", info)
    return info


def stage_train_classifier(cfg: PipelineConfig, paths: Paths) -> dict:
    """Train the condition classifier on generated sequences + reference renders,
    then compute stored centroids and the novelty threshold."""
    limit_blas_threads()
    ref_train = _load_split(paths, 0, "train")
    ref_val = _load_split(paths, 0, "val")
    rng = Rng(cfg.seed).split("classifier")

    train_images = [ref_train.images]
    train_labels = [np.zeros(len(ref_train), dtype=np.int64)]
    val_images = [ref_val.images]
    val_labels = [np.zeros(len(ref_val), dtype=np.int64)]
    for cid in cfg.initial_condition_ids():
        arrays, _ = load_container(_require(paths.gan / f"cond{cid}.adpt", "train-gan"))
        g_ab = arrays_to_paramset(arrays, "gen_ab/")
        gen_train = gan_mod.generate_condition_sequence(g_ab, ref_train, cid)
        gen_val = gan_mod.generate_condition_sequence(g_ab, ref_val, cid)
        train_images.append(gen_train.images)
        train_labels.append(np.full(len(gen_train), cid, dtype=np.int64))
        val_images.append(gen_val.images)
        val_labels.append(np.full(len(gen_val), cid, dtype=np.int64))

    num_conditions = cfg.num_initial_conditions + 1
    clf, info = classifier_mod.train_classifier(
        np.concatenate(train_images), np.concatenate(train_labels),
        np.concatenate(val_images), np.concatenate(val_labels),
        num_conditions, rng,
        epochs=cfg.classifier_epochs, batch_size=cfg.classifier_batch, lr=cfg.classifier_lr,
    )
    paths.classifier.mkdir(parents=True, exist_ok=True)
    save_container(
        paths.classifier / "clf.adpt",
        paramset_to_arrays(clf.params),
        extra={"num_conditions": num_conditions, "image_hw": cfg.image_hw},
    )

    # centroids over real condition validation renders; tau from within-condition
    # buffer-averaged distances on the same data
    centroids = {}
    cond_val_images = {}
    for cid in [0, *cfg.initial_condition_ids()]:
        batch = _load_split(paths, cid, "val")
        cond_val_images[cid] = batch.images
        centroids[cid] = classifier_mod.average_descriptor(clf.extract_descriptors(batch.images))
    tau = calibrate_threshold(
        clf, cond_val_images, centroids, cfg.buffer_len, rng.split("tau"), sigmas=cfg.tau_sigmas
    )
    save_container(
        paths.classifier / "centroids.adpt",
        {f"centroid/{cid}": centroids[cid] for cid in sorted(centroids)},
        extra={"tau": tau, "buffer_len": cfg.buffer_len, "sigmas": cfg.tau_sigmas},
    )
    info = {**info, "tau": tau}
    _write_json(paths.classifier / "info.json", info)
    return info


def load_classifier(paths: Paths) -> classifier_mod.ConditionClassifier:
    arrays, extra = load_container(_require(paths.classifier / "clf.adpt", "train-classifier"))
    return classifier_mod.ConditionClassifier(
        arrays_to_paramset(arrays, requires_grad=False), extra["num_conditions"]
    )


def load_centroids(paths: Paths) -> tuple[dict[int, np.ndarray], float]:
    arrays, extra = load_container(_require(paths.classifier / "centroids.adpt", "train-classifier"))
    centroids = {int(k.split("/")[1]): v for k, v in arrays.items()}
    return centroids, float(extra["tau"])


def stage_build_memory(cfg: PipelineConfig, paths: Paths) -> dict:
    """Populate the parameter memory with every offline condition record."""
    centroids, tau = load_centroids(paths)
    if paths.memory.exists():
        shutil.rmtree(paths.memory)
    memory = ParameterMemory(paths.memory)

    arrays, _ = load_container(_require(paths.adapters / "identity.adpt", "train-adapters"))
    memory.store(
        AdapterRecord(
            condition_id=0,
            descriptor=centroids[0],
            adapter_params=arrays_to_paramset(arrays),
            provenance={"origin": "offline", "parent_condition_id": None, "timestamp": 0},
        )
    )
    for cid in cfg.initial_condition_ids():
        arrays, _ = load_container(_require(paths.adapters / f"cond{cid}.adpt", "train-adapters"))
        gan_arrays, _ = load_container(_require(paths.gan / f"cond{cid}.adpt", "train-gan"))
        memory.store(
            AdapterRecord(
                condition_id=cid,
                descriptor=centroids[cid],
                adapter_params=arrays_to_paramset(arrays),
                generator_ab=arrays_to_paramset(gan_arrays, "gen_ab/"),
                generator_ba=arrays_to_paramset(gan_arrays, "gen_ba/"),
                provenance={"origin": "offline", "parent_condition_id": None, "timestamp": cid},
            )
        )
    info = {"records": len(memory), "tau": tau}
    _write_json(paths.memory / "info.json", info)
    return info


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _selection_adapt(
    clf: classifier_mod.ConditionClassifier,
    memory: ParameterMemory,
    images: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Adapt every frame with the adapter its predicted condition selects."""
    preds = clf.predict(images)
    out = np.empty_like(images)
    for cid in np.unique(preds):
        idx = np.where(preds == cid)[0]
        record = memory.query_by_index(int(cid))
        out[idx] = adapter_mod.adapt(images[idx], record.adapter_params)
    return out, preds


def _condition_eval(
    images: np.ndarray,
    masks: np.ndarray,
    place_ids: np.ndarray,
    seg: tasks_mod.TaskNet,
    retr: tasks_mod.TaskNet,
    db_desc: np.ndarray,
    db_places: np.ndarray,
    num_classes: int,
) -> dict:
    pred = seg.net.predict(images)
    result = tasks_mod.evaluate_retrieval(retr.net.descriptors(images), place_ids, db_desc, db_places)
    return {
        "miou": tasks_mod.dataset_miou(pred, masks, num_classes),
        "auc": result.auc,
        "top1": result.top1,
        "_pr": result,
    }


def stage_evaluate(cfg: PipelineConfig, paths: Paths) -> dict:
    """Per-condition segmentation and retrieval tables, raw vs adapted."""
    limit_blas_threads()
    seg, retr = load_tasks(paths)
    clf = load_classifier(paths)
    memory = ParameterMemory.load(_require(paths.memory, "build-memory"))
    specs = {s.condition_id: s for s in cfg.conditions()}
    ref_test = _load_split(paths, 0, "test")
    db_desc = retr.net.descriptors(ref_test.images)
    db_places = ref_test.place_ids
    paths.eval.mkdir(parents=True, exist_ok=True)

    conditions = {}
    miou_rows = []
    auc_rows = []
    eval_ids = [0, *cfg.initial_condition_ids()]
    for cid in eval_ids:
        name = specs[cid].name
        test = _load_split(paths, cid, "test")
        raw = _condition_eval(test.images, test.masks, test.place_ids, seg, retr, db_desc, db_places, cfg.num_classes)
        adapted_images, preds = _selection_adapt(clf, memory, test.images)
        adapted = _condition_eval(
            adapted_images, test.masks, test.place_ids, seg, retr, db_desc, db_places, cfg.num_classes
        )
        _write_csv(
            paths.eval / f"pr_cond{cid}_raw.csv",
            ["threshold", "precision", "recall"],
            zip([0.0, *raw["_pr"].thresholds.tolist()], raw["_pr"].precisions, raw["_pr"].recalls),
        )
        _write_csv(
            paths.eval / f"pr_cond{cid}_adapted.csv",
            ["threshold", "precision", "recall"],
            zip([0.0, *adapted["_pr"].thresholds.tolist()], adapted["_pr"].precisions, adapted["_pr"].recalls),
        )
        conditions[name] = {
            "condition_id": cid,
            "miou_raw": raw["miou"],
            "miou_adapted": adapted["miou"],
            "auc_raw": raw["auc"],
            "auc_adapted": adapted["auc"],
            "selection_accuracy": float((preds == cid).mean()),
        }
        miou_rows.append([name, f"{raw['miou']:.4f}", f"{adapted['miou']:.4f}"])
        auc_rows.append([name, f"{raw['auc']:.4f}", f"{adapted['auc']:.4f}"])

    # reference transparency with the identity adapter forced
    identity = memory.query_by_index(0)
    ref_identity_images = adapter_mod.adapt(ref_test.images, identity.adapter_params)
    ref_identity_miou = tasks_mod.dataset_miou(seg.net.predict(ref_identity_images), ref_test.masks, cfg.num_classes)
    reference = {
        "miou_no_adapter": conditions[specs[0].name]["miou_raw"],
        "miou_identity_adapter": ref_identity_miou,
        "delta": abs(ref_identity_miou - conditions[specs[0].name]["miou_raw"]),
    }

    # classifier accuracy and confusion over real held-out test images
    all_images = []
    all_labels = []
    for cid in eval_ids:
        test = _load_split(paths, cid, "test")
        all_images.append(test.images)
        all_labels.append(np.full(len(test), cid, dtype=np.int64))
    images = np.concatenate(all_images)
    labels = np.concatenate(all_labels)
    cm = classifier_mod.confusion_matrix(clf, images, labels)
    accuracy = float(np.trace(cm) / cm.sum())
    _write_csv(
        paths.eval / "confusion.csv",
        ["true\\pred", *[specs[c].name for c in eval_ids]],
        [[specs[c].name, *cm[i].tolist()] for i, c in enumerate(eval_ids)],
    )

    # held-out condition before any online learning (raw baseline only)
    heldout_test = _load_split(paths, cfg.heldout_condition_id, "test")
    heldout_raw = _condition_eval(
        heldout_test.images, heldout_test.masks, heldout_test.place_ids, seg, retr, db_desc, db_places, cfg.num_classes
    )

    initial = [specs[c].name for c in cfg.initial_condition_ids()]
    means = {
        "miou_raw": float(np.mean([conditions[n]["miou_raw"] for n in initial])),
        "miou_adapted": float(np.mean([conditions[n]["miou_adapted"] for n in initial])),
        "auc_raw": float(np.mean([conditions[n]["auc_raw"] for n in initial])),
        "auc_adapted": float(np.mean([conditions[n]["auc_adapted"] for n in initial])),
    }
    means["miou_gain"] = means["miou_adapted"] - means["miou_raw"]
    means["auc_gain"] = means["auc_adapted"] - means["auc_raw"]

    metrics = {
        "conditions": conditions,
        "means_over_initial_conditions": means,
        "reference_transparency": reference,
        "classifier": {"accuracy": accuracy, "test_images": int(cm.sum())},
        "heldout_before_online": {
            "name": specs[cfg.heldout_condition_id].name,
            "miou_raw": heldout_raw["miou"],
            "auc_raw": heldout_raw["auc"],
        },
        "frozen_hashes": {"segmentation": seg.verify_frozen(), "retrieval": retr.verify_frozen()},
    }
    _write_csv(paths.eval / "miou_table.csv", ["condition", "no_adapter", "with_adapter"], miou_rows)
    _write_csv(paths.eval / "auc_table.csv", ["condition", "no_adapter", "with_adapter"], auc_rows)
    _write_json(paths.eval / "metrics.json", metrics)
    return metrics


def stage_online_run(cfg: PipelineConfig, paths: Paths) -> dict:
    """Stream the held-out condition through the runtime and adapt online."""
    limit_blas_threads()
    seg, retr = load_tasks(paths)
    clf = load_classifier(paths)
    _, tau = load_centroids(paths)
    _require(paths.memory, "build-memory")

    # operate on a copy so build-memory artifacts stay pristine and the
    # command is re-runnable
    paths.online.mkdir(parents=True, exist_ok=True)
    online_memory_root = paths.online / "memory"
    if online_memory_root.exists():
        shutil.rmtree(online_memory_root)
    shutil.copytree(paths.memory, online_memory_root)
    memory = ParameterMemory.load(online_memory_root)

    gan_checkpoints = {}
    for cid in cfg.initial_condition_ids():
        gan_checkpoints[cid] = load_gan_checkpoint(
            _require(paths.gan / f"cond{cid}.adpt", "train-gan"), cid
        )

    ref_train = _load_split(paths, 0, "train")
    ref_val = _load_split(paths, 0, "val")
    ref_test = _load_split(paths, 0, "test")
    pseudo_train = load_pseudo(paths, "train")
    pseudo_val = load_pseudo(paths, "val")
    heldout = _load_split(paths, cfg.heldout_condition_id, "test")

    events_path = paths.online / "events.jsonl"
    if events_path.exists():
        events_path.unlink()
    log = EventLog(events_path)
    runtime = OnlineRuntime(
        classifier=clf,
        memory=memory,
        policy=NoveltyPolicy(threshold=tau, min_fill=cfg.buffer_len),
        seg=seg,
        retrieval=retr,
        reference_train=ref_train,
        pseudo_train=pseudo_train,
        reference_val=ref_val,
        pseudo_val=pseudo_val,
        gan_checkpoints=gan_checkpoints,
        hyper=OnlineHyper(
            gan=cfg.gan_hyper(),
            gan_epochs=cfg.gan_online_epochs,
            adapter_epochs=cfg.adapter_online_epochs,
            adapter_batch=cfg.adapter_batch,
            adapter_lr=cfg.adapter_lr,
            adapter_patience=cfg.adapter_patience,
            weighting=cfg.weighting(),
        ),
        rng=Rng(cfg.seed).split("online"),
        log=log,
    )

    frozen_before = {"segmentation": seg.verify_frozen(), "retrieval": retr.verify_frozen()}
    seed_hashes_before = {rid: memory.query_by_index(rid).adapter_params.content_hash() for rid in memory.ids()}
    size_before = len(memory)

    for i in range(cfg.buffer_len):
        runtime.push_frame(heldout.images[i])
    before = runtime.detect_novelty()
    new_record = None
    if before.novel:
        new_record = runtime.run_online_adaptation()
    after = runtime.detect_novelty()

    db_desc = retr.net.descriptors(ref_test.images)
    raw = _condition_eval(
        heldout.images, heldout.masks, heldout.place_ids, seg, retr, db_desc, ref_test.place_ids, cfg.num_classes
    )
    adapted_metrics = None
    finetune_diag = None
    if new_record is not None:
        adapted_images = adapter_mod.adapt(heldout.images, new_record.adapter_params)
        adapted = _condition_eval(
            adapted_images, heldout.masks, heldout.place_ids, seg, retr,
            db_desc, ref_test.place_ids, cfg.num_classes,
        )
        adapted_metrics = {"miou": adapted["miou"], "auc": adapted["auc"]}
        save_container(
            paths.online / "gan_new.adpt",
            _gan_checkpoint_arrays(runtime.gan_checkpoints[new_record.condition_id]),
            extra={"condition_id": new_record.condition_id},
        )
        # l1 diagnostic against the analytic held-out transform of the same
        # reference traversals: the fine-tuned translator must land closer
        # than its seed
        spec = {s.condition_id: s for s in cfg.conditions()}[cfg.heldout_condition_id]
        analytic = np.stack(
            [
                world.apply_condition(ref_test.sample(i), spec, int(ref_test.jitter_seeds[i])).image
                for i in range(len(ref_test))
            ]
        )
        seed_gan_id = new_record.provenance["gan_seed_condition_id"]
        finetune_diag = {
            "seed_condition_id": seed_gan_id,
            "diag_seed": gan_mod.translation_diagnostic(
                gan_checkpoints[seed_gan_id].generators.g_ab, ref_test.images, analytic
            ),
            "diag_tuned": gan_mod.translation_diagnostic(
                runtime.gan_checkpoints[new_record.condition_id].generators.g_ab, ref_test.images, analytic
            ),
        }

    seed_hashes_after = {
        rid: memory.query_by_index(rid).adapter_params.content_hash() for rid in seed_hashes_before
    }
    metrics = {
        "tau": tau,
        "novelty_before": {"novel": before.novel, "distance": before.distance, "nearest_id": before.nearest_id},
        "novelty_after": {"novel": after.novel, "distance": after.distance, "nearest_id": after.nearest_id},
        "new_condition_id": new_record.condition_id if new_record else None,
        "memory_size_before": size_before,
        "memory_size_after": len(memory),
        "heldout": {
            "name": cfg.conditions()[-1].name,
            "miou_raw": raw["miou"],
            "auc_raw": raw["auc"],
            "adapted": adapted_metrics,
            "miou_gain": (adapted_metrics["miou"] - raw["miou"]) if adapted_metrics else None,
            "auc_gain": (adapted_metrics["auc"] - raw["auc"]) if adapted_metrics else None,
        },
        "seed_adapter_hashes_unchanged": seed_hashes_before == seed_hashes_after,
        "frozen_hashes_before": frozen_before,
        "frozen_hashes_after": {"segmentation": seg.verify_frozen(), "retrieval": retr.verify_frozen()},
        "finetune_diagnostic": finetune_diag,
    }
    _write_json(paths.online / "online_metrics.json", metrics)
    return metrics


def stage_report(cfg: PipelineConfig, paths: Paths) -> dict:
    """Aggregate stage outputs into one report."""
    report = {"config": asdict(cfg)}
    for name, path in [
        ("datasets", paths.datasets / "info.json"),
        ("tasks", paths.tasks / "info.json"),
        ("pseudo_gt", paths.tasks / "pseudo_info.json"),
        ("gan", paths.gan / "info.json"),
        ("adapters", paths.adapters / "info.json"),
        ("classifier", paths.classifier / "info.json"),
        ("memory", paths.memory / "info.json"),
        ("evaluate", paths.eval / "metrics.json"),
        ("online", paths.online / "online_metrics.json"),
    ]:
        report[name] = json.loads(path.read_text()) if path.exists() else None
    paths.report.mkdir(parents=True, exist_ok=True)
    _write_json(paths.report / "report.json", report)
    return report


STAGES = {
    "gen-data": stage_gen_data,
    "train-tasks": stage_train_tasks,
    "pseudo-gt": stage_pseudo_gt,
    "train-gan": stage_train_gan,
    "train-adapters": stage_train_adapters,
    "train-classifier": stage_train_classifier,
    "build-memory": stage_build_memory,
    "evaluate": stage_evaluate,
    "online-run": stage_online_run,
    "report": stage_report,
}


def run_all(cfg: PipelineConfig, out_dir: str | Path) -> dict:
    """Run every stage in order; returns the final report."""
    paths = Paths(out_dir)
    for name in STAGES:
        STAGES[name](cfg, paths)
    return json.loads((paths.report / "report.json").read_text())
