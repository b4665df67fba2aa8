"""Procedural street scenes with exact segmentation masks and place ids.

Scenes are deterministic functions of (place_id, layout_seed); traversals of
the same place differ only by small object jitter and pixel noise keyed by
jitter_seed. Appearance conditions are closed-form photometric maps applied
on top of the reference render; they never touch the mask or the place id.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError
from .memory import load_container, save_container
from .rng import Rng

CLASS_NAMES = ("sky", "road", "building", "vehicle", "vegetation")
SKY, ROAD, BUILDING, VEHICLE, VEGETATION = range(5)

_SPLIT_INDEX = {"train": 0, "val": 1, "test": 2}
_SEED_STRIDE = 1_000_000

_VEHICLE_COLORS = (
    (0.62, 0.16, 0.16),
    (0.20, 0.30, 0.60),
    (0.70, 0.70, 0.72),
    (0.16, 0.16, 0.20),
)


@dataclass(frozen=True)
class WorldConfig:
    height: int = 48
    width: int = 48
    num_classes: int = 5
    num_places: int = 32
    layout_seed: int = 2024
    train_count: int = 512
    val_count: int = 64
    test_count: int = 128

    def count_for(self, split: str) -> int:
        return {"train": self.train_count, "val": self.val_count, "test": self.test_count}[split]


@dataclass
class SceneObject:
    cls: int
    x0: int
    y0: int
    w: int
    h: int
    color: tuple[float, float, float]


@dataclass
class Scene:
    place_id: int
    layout_seed: int
    horizon: int
    sky_color: tuple[float, float, float]
    road_color: tuple[float, float, float]
    objects: list[SceneObject]


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) int32 class ids
    place_id: int
    condition_id: int


@dataclass(frozen=True)
class ConditionSpec:
    """Photometric transform parameters; the reference spec is the identity."""

    condition_id: int
    name: str
    gamma: float = 1.0
    brightness: float = 1.0
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # fade blends toward fade_target; targets outside [0, 1] model black/white
    # point crushes once the final clip is applied
    fade: float = 0.0
    fade_target: float = 0.5
    blob_center: Optional[tuple[float, float]] = None  # fractional (y, x)
    blob_radius: float = 0.0
    blob_intensity: float = 0.0
    blur_radius: int = 0
    noise_std: float = 0.0

    def is_identity(self) -> bool:
        return (
            self.gamma == 1.0
            and self.brightness == 1.0
            and self.tint == (1.0, 1.0, 1.0)
            and self.fade == 0.0
            and self.blob_intensity == 0.0
            and self.blur_radius == 0
            and self.noise_std == 0.0
        )


def default_conditions() -> list[ConditionSpec]:
    """Reference + four trained conditions + one held out for online learning."""
    return [
        ConditionSpec(0, "reference"),
        ConditionSpec(
            1,
            "night",
            gamma=2.2,
            brightness=0.35,
            tint=(0.80, 0.85, 1.15),
            fade=0.12,
            fade_target=-0.35,
        ),
        ConditionSpec(
            2,
            "glare",
            brightness=1.25,
            fade=0.30,
            fade_target=0.85,
            blob_center=(0.18, 0.72),
            blob_radius=0.22,
            blob_intensity=0.60,
            noise_std=0.015,
        ),
        ConditionSpec(
            3,
            "fog",
            brightness=0.88,
            tint=(0.96, 0.99, 1.05),
            fade=0.60,
            fade_target=0.80,
            blur_radius=1,
            noise_std=0.01,
        ),
        ConditionSpec(4, "dusk", gamma=1.5, brightness=0.55, tint=(1.22, 0.88, 0.62), noise_std=0.012),
        ConditionSpec(5, "overexposure", gamma=0.65, brightness=2.1, tint=(1.05, 1.02, 0.95), noise_std=0.01),
    ]


def build_scene(place_id: int, layout_seed: int, cfg: WorldConfig = WorldConfig()) -> Scene:
    """Deterministic object layout for one place."""
    if not 0 <= place_id < cfg.num_places:
        raise ContractError(f"place_id {place_id} out of range [0, {cfg.num_places})")
    rng = Rng(layout_seed).split("scene").split(place_id)
    h, w = cfg.height, cfg.width
    horizon = int(h * 0.46) + int(rng.integers(1, max(2, h // 6))[0])
    u = rng.uniform((3,))
    base = 0.50 + 0.10 * float(u[0])
    sky = (base, min(base + 0.06 + 0.05 * float(u[1]), 1.0), min(base + 0.16 + 0.08 * float(u[2]), 1.0))
    road = tuple(float(0.30 + 0.08 * v) for v in rng.uniform((3,)))

    objects: list[SceneObject] = []
    n_buildings = 2 + int(rng.integers(1, 3)[0])
    edges = np.sort(rng.integers(n_buildings - 1, w - 8) + 4) if n_buildings > 1 else np.array([], dtype=np.int64)
    bounds = [0, *edges.tolist(), w]
    for i in range(n_buildings):
        x0, x1 = bounds[i], bounds[i + 1]
        if x1 - x0 < 5:
            continue
        bw = max(4, int((x1 - x0) * (0.7 + 0.3 * rng.uniform())))
        bh = 7 + int(rng.integers(1, max(2, horizon - 10))[0])
        base = 0.40 + 0.22 * rng.uniform()
        tintr = rng.uniform((3,)) * 0.12
        color = (float(base + tintr[0]), float(base * 0.82 + tintr[1] * 0.5), float(base * 0.62 + tintr[2] * 0.4))
        objects.append(SceneObject(BUILDING, x0 + (x1 - x0 - bw) // 2, horizon - bh, bw, bh, color))

    for _ in range(1 + int(rng.integers(1, 2)[0])):
        vw = 4 + int(rng.integers(1, 6)[0])
        vh = 4 + int(rng.integers(1, 5)[0])
        vx = int(rng.integers(1, max(2, w - vw))[0])
        g = 0.34 + 0.18 * rng.uniform()
        color = (float(g * 0.45), float(g), float(g * 0.5))
        objects.append(SceneObject(VEGETATION, vx, horizon - vh + 1, vw, vh, color))

    for _ in range(1 + int(rng.integers(1, 2)[0])):
        cw = 5 + int(rng.integers(1, 4)[0])
        ch = 3 + int(rng.integers(1, 3)[0])
        cx = int(rng.integers(1, max(2, w - cw))[0])
        cy = horizon + 2 + int(rng.integers(1, max(2, h - horizon - ch - 3))[0])
        color = _VEHICLE_COLORS[int(rng.integers(1, len(_VEHICLE_COLORS))[0])]
        objects.append(SceneObject(VEHICLE, cx, cy, cw, ch, color))

    return Scene(place_id, layout_seed, horizon, sky, road, objects)


def render_scene(place_id: int, layout_seed: int, jitter_seed: int, cfg: WorldConfig = WorldConfig()) -> Sample:
    """Render one traversal of a place under the reference condition."""
    scene = build_scene(place_id, layout_seed, cfg)
    h, w = cfg.height, cfg.width
    jr = Rng(layout_seed).split("jitter").split(place_id).split(jitter_seed)

    image = np.empty((3, h, w), dtype=np.float32)
    mask = np.empty((h, w), dtype=np.int32)
    for c in range(3):
        image[c, : scene.horizon] = scene.sky_color[c]
        image[c, scene.horizon :] = scene.road_color[c]
    mask[: scene.horizon] = SKY
    mask[scene.horizon :] = ROAD

    for obj in scene.objects:
        jx = int(jr.integers(1, 5)[0]) - 2
        jy = int(jr.integers(1, 5)[0]) - 2
        x0 = int(np.clip(obj.x0 + jx, 0, w - obj.w)) if obj.w <= w else 0
        if obj.cls == VEHICLE:
            y0 = int(np.clip(obj.y0 + jy, scene.horizon + 1, h - obj.h))
        else:
            y0 = obj.y0
        x1, y1 = min(x0 + obj.w, w), min(y0 + obj.h, h)
        for c in range(3):
            image[c, y0:y1, x0:x1] = obj.color[c]
        mask[y0:y1, x0:x1] = obj.cls

    image += jr.normal((3, h, w), std=0.008)
    np.clip(image, 0.0, 1.0, out=image)
    return Sample(image=image, mask=mask, place_id=place_id, condition_id=0)


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    k = 2 * radius + 1
    _, h, w = img.shape
    pad = np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(k):
        for dx in range(k):
            out += pad[:, dy : dy + h, dx : dx + w]
    return out / (k * k)


def apply_condition(sample: Sample, spec: ConditionSpec, noise_seed: int) -> Sample:
    """Photometric transform of one sample; mask and place_id copy verbatim."""
    if spec.is_identity():
        return Sample(sample.image.copy(), sample.mask.copy(), sample.place_id, spec.condition_id)
    img = sample.image.astype(np.float32).copy()
    if spec.gamma != 1.0:
        np.power(np.clip(img, 0.0, 1.0), np.float32(spec.gamma), out=img)
    if spec.brightness != 1.0:
        img *= np.float32(spec.brightness)
    if spec.tint != (1.0, 1.0, 1.0):
        img *= np.asarray(spec.tint, dtype=np.float32)[:, None, None]
    if spec.fade != 0.0:
        img = img * np.float32(1.0 - spec.fade) + np.float32(spec.fade * spec.fade_target)
    if spec.blob_intensity != 0.0 and spec.blob_center is not None:
        _, h, w = img.shape
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float32), np.arange(w, dtype=np.float32), indexing="ij")
        cy, cx = spec.blob_center[0] * h, spec.blob_center[1] * w
        sigma = max(spec.blob_radius * h, 1e-3)
        img += np.float32(spec.blob_intensity) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    if spec.blur_radius > 0:
        img = _box_blur(img, spec.blur_radius)
    if spec.noise_std > 0.0:
        img += Rng(noise_seed).split("pixel-noise").normal(img.shape, std=spec.noise_std)
    np.clip(img, 0.0, 1.0, out=img)
    return Sample(img, sample.mask.copy(), sample.place_id, spec.condition_id)


@dataclass
class SampleBatch:
    """Columnar dataset of rendered samples."""

    images: np.ndarray  # (n, 3, H, W) float32
    masks: np.ndarray  # (n, H, W) int32
    place_ids: np.ndarray  # (n,) int32
    condition_ids: np.ndarray  # (n,) int32
    jitter_seeds: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return self.images.shape[0]

    def sample(self, i: int) -> Sample:
        return Sample(self.images[i], self.masks[i], int(self.place_ids[i]), int(self.condition_ids[i]))

    def subset(self, idx) -> "SampleBatch":
        return SampleBatch(
            self.images[idx], self.masks[idx], self.place_ids[idx], self.condition_ids[idx], self.jitter_seeds[idx]
        )


def split_jitter_seeds(condition_id: int, split: str, count: int) -> np.ndarray:
    """Disjoint jitter-seed range per (condition, split)."""
    if split not in _SPLIT_INDEX:
        raise ConfigError(f"unknown split {split!r}")
    if count <= 0 or count >= _SEED_STRIDE:
        raise ConfigError(f"count {count} outside (0, {_SEED_STRIDE})")
    base = (condition_id * len(_SPLIT_INDEX) + _SPLIT_INDEX[split] + 1) * _SEED_STRIDE
    return np.arange(base, base + count, dtype=np.int64)


def build_split(
    spec: ConditionSpec,
    split: str,
    cfg: WorldConfig = WorldConfig(),
    route: Optional[list[int]] = None,
    count: Optional[int] = None,
) -> SampleBatch:
    """Render one (condition, split) dataset.

    Conditions other than the reference are rendered from their own traversals
    (disjoint jitter seeds) and shuffled, so GAN training sets are unpaired.
    """
    n = cfg.count_for(split) if count is None else count
    route = list(range(cfg.num_places)) if route is None else list(route)
    seeds = split_jitter_seeds(spec.condition_id, split, n)
    images = np.empty((n, 3, cfg.height, cfg.width), dtype=np.float32)
    masks = np.empty((n, cfg.height, cfg.width), dtype=np.int32)
    place_ids = np.empty(n, dtype=np.int32)
    for i in range(n):
        ref = render_scene(route[i % len(route)], cfg.layout_seed, int(seeds[i]), cfg)
        out = apply_condition(ref, spec, int(seeds[i])) if spec.condition_id != 0 or not spec.is_identity() else ref
        images[i] = out.image
        masks[i] = out.mask
        place_ids[i] = out.place_id
    batch = SampleBatch(
        images, masks, place_ids, np.full(n, spec.condition_id, dtype=np.int32), seeds
    )
    if spec.condition_id != 0:
        order = Rng(cfg.layout_seed).split("shuffle").split(spec.condition_id).split(_SPLIT_INDEX[split]).permutation(n)
        batch = batch.subset(order)
    return batch


def save_batch(path: str | Path, batch: SampleBatch) -> None:
    save_container(
        path,
        {
            "images": batch.images,
            "masks": batch.masks.astype(np.float32),
            "place_ids": batch.place_ids.astype(np.float32),
            "condition_ids": batch.condition_ids.astype(np.float32),
            "jitter_seeds": batch.jitter_seeds.astype(np.float32),
        },
        extra={"count": len(batch)},
    )


def load_batch(path: str | Path) -> SampleBatch:
    arrays, _ = load_container(path)
    return SampleBatch(
        images=arrays["images"],
        masks=arrays["masks"].astype(np.int32),
        place_ids=arrays["place_ids"].astype(np.int32),
        condition_ids=arrays["condition_ids"].astype(np.int32),
        jitter_seeds=arrays["jitter_seeds"].astype(np.int64),
    )


def write_manifest(path: str | Path, entries: list[dict]) -> None:
    """One JSON manifest listing every sample of every stored split."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps({"samples": entries}, indent=None, sort_keys=True))
    os.replace(tmp, path)
