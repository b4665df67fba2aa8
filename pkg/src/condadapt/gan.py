"""Cycle-consistent translation between the reference condition and one target.

Two generators (reference->condition and back) and two patch discriminators
train on unpaired image sets with least-squares adversarial losses plus an L1
cycle reconstruction penalty. Only the forward generator is consumed
downstream to synthesize condition training data; both are stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError, NumericalError, TrainingDivergedError
from .optim import Adam
from .params import ParamSet, conv_param, conv_transpose_param, ones_param, zeros_param
from .rng import Rng
from .world import SampleBatch


@dataclass
class GanHyper:
    lambda_rec: float = 10.0
    lambda_adv: float = 1.0
    steps: int = 2000
    batch_size: int = 4
    pool_size: int = 50
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999


class Generator:
    """2 stride-2 downs, 2 residual blocks, 2 stride-2 ups, tanh head in [0,1]."""

    def __init__(self, params: ParamSet):
        self.params = params

    @classmethod
    def build(cls, rng: Rng, widths=(12, 24), n_res: int = 2) -> "Generator":
        p = ParamSet()
        w1, w2 = widths
        p.add("d0.w", conv_param(rng.split("d0"), w1, 5, 4))
        p.add("d0.g", ones_param(w1))
        p.add("d0.b", zeros_param(w1))
        p.add("d1.w", conv_param(rng.split("d1"), w2, w1, 4))
        p.add("d1.g", ones_param(w2))
        p.add("d1.b", zeros_param(w2))
        for r in range(n_res):
            for j in range(2):
                p.add(f"r{r}{j}.w", conv_param(rng.split(f"r{r}{j}"), w2, w2, 3))
                p.add(f"r{r}{j}.g", ones_param(w2))
                p.add(f"r{r}{j}.b", zeros_param(w2))
        p.add("u0.w", conv_transpose_param(rng.split("u0"), w2, w1, 4))
        p.add("u0.g", ones_param(w1))
        p.add("u0.b", zeros_param(w1))
        p.add("u1.w", conv_transpose_param(rng.split("u1"), w1, 3, 4))
        p.add("u1.b", zeros_param(3))
        return cls(p)

    def _n_res(self) -> int:
        n = 0
        while f"r{n}0.w" in self.params:
            n += 1
        return n

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.instance_norm(ad.conv2d(ad.with_coords(x), p["d0.w"], 2, 1), p["d0.g"], p["d0.b"]))
        h = ad.relu(ad.instance_norm(ad.conv2d(h, p["d1.w"], 2, 1), p["d1.g"], p["d1.b"]))
        for r in range(self._n_res()):
            inner = ad.relu(ad.instance_norm(ad.conv2d(h, p[f"r{r}0.w"], 1, 1), p[f"r{r}0.g"], p[f"r{r}0.b"]))
            inner = ad.instance_norm(ad.conv2d(inner, p[f"r{r}1.w"], 1, 1), p[f"r{r}1.g"], p[f"r{r}1.b"])
            h = ad.add(h, inner)
        h = ad.relu(ad.instance_norm(ad.conv_transpose2d(h, p["u0.w"], 2, 1), p["u0.g"], p["u0.b"]))
        h = ad.channel_bias(ad.conv_transpose2d(h, p["u1.w"], 2, 1), p["u1.b"])
        return ad.affine(ad.tanh(h), 0.5, 0.5)

    def translate(self, images: np.ndarray, batch: int = 32) -> np.ndarray:
        out = np.empty_like(images)
        for s in range(0, images.shape[0], batch):
            out[s : s + batch] = self(Tensor(images[s : s + batch])).data
        return out


class PatchDiscriminator:
    """3 stride-2 convs with leaky relu; outputs a grid of realness scores."""

    def __init__(self, params: ParamSet):
        self.params = params

    @classmethod
    def build(cls, rng: Rng, widths=(12, 24)) -> "PatchDiscriminator":
        p = ParamSet()
        w1, w2 = widths
        p.add("c0.w", conv_param(rng.split("c0"), w1, 5, 4))
        p.add("c0.b", zeros_param(w1))
        p.add("c1.w", conv_param(rng.split("c1"), w2, w1, 4))
        p.add("c1.b", zeros_param(w2))
        p.add("c2.w", conv_param(rng.split("c2"), 1, w2, 4))
        p.add("c2.b", zeros_param(1))
        return cls(p)

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        h = ad.leaky_relu(ad.channel_bias(ad.conv2d(ad.with_coords(x), p["c0.w"], 2, 1), p["c0.b"]), 0.2)
        h = ad.leaky_relu(ad.channel_bias(ad.conv2d(h, p["c1.w"], 2, 1), p["c1.b"]), 0.2)
        return ad.channel_bias(ad.conv2d(h, p["c2.w"], 2, 1), p["c2.b"])


@dataclass
class GeneratorPair:
    g_ab: ParamSet
    g_ba: ParamSet
    condition_id: int


@dataclass
class DiscriminatorPair:
    d_a: ParamSet
    d_b: ParamSet


@dataclass
class GanModels:
    generators: GeneratorPair
    discriminators: DiscriminatorPair

    def clone(self) -> "GanModels":
        return GanModels(
            GeneratorPair(self.generators.g_ab.clone(), self.generators.g_ba.clone(), self.generators.condition_id),
            DiscriminatorPair(self.discriminators.d_a.clone(), self.discriminators.d_b.clone()),
        )


# ---------------------------------------------------------------------------
# losses (least-squares adversarial forms)
# ---------------------------------------------------------------------------

def generator_adversarial_loss(d_scores: Tensor) -> Tensor:
    """Mean (score - 1)^2; the generator wants scores pushed to 1."""
    return ad.squared_error(d_scores, 1.0)


def discriminator_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """Mean (real - 1)^2 + mean fake^2."""
    return ad.add(ad.squared_error(real_scores, 1.0), ad.squared_error(fake_scores, 0.0))


def cycle_loss(original: Tensor, reconstructed: Tensor) -> Tensor:
    """L1 penalty between an image and its round-trip reconstruction."""
    return ad.l1_loss(original, reconstructed)


def generator_objective(rec: Tensor, adv: Tensor, hyper: GanHyper) -> Tensor:
    """lambda_rec * rec + lambda_adv * adv."""
    return ad.add(ad.affine(rec, hyper.lambda_rec), ad.affine(adv, hyper.lambda_adv))


class ImagePool:
    """History buffer of generated images feeding discriminator updates."""

    def __init__(self, capacity: int, rng: Rng):
        self.capacity = capacity
        self.rng = rng
        self.images: list[np.ndarray] = []

    def query(self, batch: np.ndarray) -> np.ndarray:
        if self.capacity <= 0:
            return batch
        out = []
        for img in batch:
            if len(self.images) < self.capacity:
                self.images.append(img.copy())
                out.append(img)
            elif self.rng.uniform() < 0.5:
                k = int(self.rng.integers(1, len(self.images))[0])
                out.append(self.images[k].copy())
                self.images[k] = img.copy()
            else:
                out.append(img)
        return np.stack(out)


@dataclass
class GanHistory:
    steps: list = field(default_factory=list)
    l_gen: list = field(default_factory=list)
    l_disc: list = field(default_factory=list)
    l_rec: list = field(default_factory=list)
    l_adv: list = field(default_factory=list)

    def rows(self):
        return zip(self.steps, self.l_gen, self.l_disc, self.l_rec, self.l_adv)


def _build_models(rng: Rng, condition_id: int) -> GanModels:
    return GanModels(
        GeneratorPair(
            Generator.build(rng.split("g_ab")).params,
            Generator.build(rng.split("g_ba")).params,
            condition_id,
        ),
        DiscriminatorPair(
            PatchDiscriminator.build(rng.split("d_a")).params,
            PatchDiscriminator.build(rng.split("d_b")).params,
        ),
    )


def _run_training(
    models: GanModels,
    ref_images: np.ndarray,
    cond_images: np.ndarray,
    hyper: GanHyper,
    rng: Rng,
    steps: int,
    history: Optional[GanHistory] = None,
) -> GanHistory:
    """Alternating generator/discriminator updates; mutates `models` in place."""
    g_ab, g_ba = Generator(models.generators.g_ab), Generator(models.generators.g_ba)
    d_a, d_b = PatchDiscriminator(models.discriminators.d_a), PatchDiscriminator(models.discriminators.d_b)
    opt_gab = Adam(g_ab.params, lr=hyper.lr, beta1=hyper.beta1, beta2=hyper.beta2)
    opt_gba = Adam(g_ba.params, lr=hyper.lr, beta1=hyper.beta1, beta2=hyper.beta2)
    opt_da = Adam(d_a.params, lr=hyper.lr, beta1=hyper.beta1, beta2=hyper.beta2)
    opt_db = Adam(d_b.params, lr=hyper.lr, beta1=hyper.beta1, beta2=hyper.beta2)
    pool_a = ImagePool(hyper.pool_size, rng.split("pool_a"))
    pool_b = ImagePool(hyper.pool_size, rng.split("pool_b"))
    batch_rng = rng.split("batches")
    history = history or GanHistory()
    gen_params = g_ab.params.tensors() + g_ba.params.tensors()
    base_step = history.steps[-1] + 1 if history.steps else 0

    try:
        for step in range(steps):
            ia = batch_rng.integers(hyper.batch_size, len(ref_images))
            ib = batch_rng.integers(hyper.batch_size, len(cond_images))
            a = Tensor(ref_images[ia])
            b = Tensor(cond_images[ib])

            # generator phase: discriminators participate but do not learn
            d_a.params.set_requires_grad(False)
            d_b.params.set_requires_grad(False)
            with Tape() as tape:
                fake_b = g_ab(a)
                fake_a = g_ba(b)
                rec_a = g_ba(fake_b)
                rec_b = g_ab(fake_a)
                adv = ad.add(generator_adversarial_loss(d_b(fake_b)), generator_adversarial_loss(d_a(fake_a)))
                rec = ad.add(cycle_loss(a, rec_a), cycle_loss(b, rec_b))
                gen_loss = generator_objective(rec, adv, hyper)
            grads = tape.gradients(gen_loss, gen_params)
            n_ab = len(g_ab.params)
            opt_gab.step(grads[:n_ab])
            opt_gba.step(grads[n_ab:])
            d_a.params.set_requires_grad(True)
            d_b.params.set_requires_grad(True)

            # discriminator phase on pooled fakes (detached by construction)
            fb = Tensor(pool_b.query(fake_b.data))
            fa = Tensor(pool_a.query(fake_a.data))
            with Tape() as tape:
                loss_db = discriminator_loss(d_b(b), d_b(fb))
                loss_da = discriminator_loss(d_a(a), d_a(fa))
                disc_loss = ad.add(loss_da, loss_db)
            opt_da.step(tape.gradients(disc_loss, d_a.params.tensors()))
            opt_db.step(tape.gradients(disc_loss, d_b.params.tensors()))

            history.steps.append(base_step + step)
            history.l_gen.append(gen_loss.item())
            history.l_disc.append(disc_loss.item())
            history.l_rec.append(rec.item())
            history.l_adv.append(adv.item())
    except NumericalError as exc:
        raise TrainingDivergedError(
            f"gan training diverged at step {len(history.steps)}: {exc}",
            step=len(history.steps),
            loss_tail=history.l_gen[-10:],
        ) from exc
    return history


def train_pair(
    ref_images: np.ndarray,
    cond_images: np.ndarray,
    condition_id: int,
    hyper: GanHyper,
    seed_rng: Rng,
) -> tuple[GanModels, GanHistory]:
    """Train one condition pair from scratch on unpaired image sets."""
    models = _build_models(seed_rng.split("init"), condition_id)
    history = _run_training(models, ref_images, cond_images, hyper, seed_rng.split("train"), hyper.steps)
    return models, history


def finetune_pair(
    seed_models: GanModels,
    ref_images: np.ndarray,
    buffer_images: np.ndarray,
    hyper: GanHyper,
    rng: Rng,
    epochs: int = 5,
    new_condition_id: Optional[int] = None,
) -> tuple[GanModels, GanHistory]:
    """Clone the nearest stored models and continue training on the buffer.

    The seed models are never mutated; zero epochs returns a bitwise clone.
    """
    if len(buffer_images) == 0:
        raise ContractError("fine-tuning requires a non-empty frame buffer")
    models = seed_models.clone()
    if new_condition_id is not None:
        models.generators.condition_id = new_condition_id
    steps = epochs * max(1, len(ref_images) // hyper.batch_size)
    if epochs == 0:
        return models, GanHistory()
    history = _run_training(models, ref_images, buffer_images, hyper, rng.split("finetune"), steps)
    return models, history


def generate_condition_sequence(g_ab: ParamSet, reference: SampleBatch, condition_id: int) -> SampleBatch:
    """Translate the reference sequence; masks and place ids carry over."""
    gen = Generator(g_ab)
    return SampleBatch(
        images=gen.translate(reference.images),
        masks=reference.masks.copy(),
        place_ids=reference.place_ids.copy(),
        condition_ids=np.full(len(reference), condition_id, dtype=np.int32),
        jitter_seeds=reference.jitter_seeds.copy(),
    )


def translation_diagnostic(g_ab: ParamSet, ref_images: np.ndarray, target_images: np.ndarray) -> float:
    """Mean absolute error between translated references and analytic targets."""
    out = Generator(g_ab).translate(ref_images)
    return float(np.abs(out - target_images).mean())
