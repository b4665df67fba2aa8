"""Adapter net contracts and the task-supervised loss (cheap parts)."""

import numpy as np
import pytest

from condadapt import adapter, tasks, world
from condadapt.autodiff import Tape, Tensor
from condadapt.errors import ContractError
from condadapt.rng import Rng


@pytest.fixture(scope="module")
def tiny_tasks():
    """Minimally trained (not gated) frozen task nets for contract tests."""
    specs = world.default_conditions()
    train = world.build_split(specs[0], "train", count=32)
    seg_net = tasks.SegmentationNet.build(Rng(41), 5)
    retr_net = tasks.RetrievalNet.build(Rng(42), num_places=32)
    seg = tasks.TaskNet("segmentation", seg_net)
    retr = tasks.TaskNet("retrieval", retr_net)
    seg.freeze()
    retr.freeze()
    return train, seg, retr


class TestWeighting:
    def test_rejects_negative(self):
        with pytest.raises(ContractError):
            adapter.TaskWeighting(-1.0, 1.0)

    def test_rejects_all_zero(self):
        with pytest.raises(ContractError):
            adapter.TaskWeighting(0.0, 0.0)


class TestAdapterNet:
    def test_shape_and_range(self):
        net = adapter.AdapterNet.build(Rng(43))
        x = Rng(44).uniform((2, 3, 48, 48))
        y = net(Tensor(x))
        assert y.data.shape == x.shape
        assert y.data.min() >= 0.0 and y.data.max() <= 1.0

    def test_deterministic_per_params(self):
        net = adapter.AdapterNet.build(Rng(45))
        x = Rng(46).uniform((1, 3, 48, 48))
        a = net(Tensor(x)).data
        b = net(Tensor(x)).data
        assert np.array_equal(a, b)

    def test_zero_budget_returns_raw_initialization(self):
        images = Rng(47).uniform((8, 3, 48, 48))
        params, info = adapter.pretrain_identity(images, Rng(48), epochs=0)
        fresh = adapter.AdapterNet.build(Rng(48).split("init"))
        assert params.content_hash() == fresh.params.content_hash()
        assert info["steps"] == 0


class TestTaskSupervisionLoss:
    def test_retrieval_term_zero_on_matching_descriptor(self, tiny_tasks):
        train, seg, retr = tiny_tasks
        images = train.images[:4]
        desc = retr.net.descriptors(images)
        w = adapter.TaskWeighting(alpha_seg=0.0, alpha_retrieval=1.0)
        loss = adapter.task_supervision_loss(
            Tensor(images), train.masks[:4], desc, seg, retr, w
        )
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_seg_term_is_self_entropy_on_own_argmax(self, tiny_tasks):
        train, seg, retr = tiny_tasks
        images = train.images[:4]
        pseudo_maps = seg.net.predict(images)
        desc = retr.net.descriptors(images)
        w = adapter.TaskWeighting(alpha_seg=1.0, alpha_retrieval=0.0)
        loss = adapter.task_supervision_loss(Tensor(images), pseudo_maps, desc, seg, retr, w)
        assert loss.item() >= 0.0

    def test_alpha_gates_gradient_flow(self, tiny_tasks):
        train, seg, retr = tiny_tasks
        images = Tensor(train.images[:2], requires_grad=True)
        pseudo_maps = seg.net.predict(train.images[:2])
        desc = retr.net.descriptors(train.images[:2]) + 0.1
        w = adapter.TaskWeighting(alpha_seg=0.0, alpha_retrieval=1.0)
        with Tape() as tape:
            loss = adapter.task_supervision_loss(images, pseudo_maps, desc, seg, retr, w)
        (g,) = tape.gradients(loss, [images])
        assert np.any(g != 0.0)

    def test_doubling_weights_doubles_loss(self, tiny_tasks):
        train, seg, retr = tiny_tasks
        images = Tensor(train.images[:3])
        pseudo_maps = seg.net.predict(train.images[:3])
        desc = retr.net.descriptors(train.images[:3]) + 0.05
        one = adapter.task_supervision_loss(images, pseudo_maps, desc, seg, retr, adapter.TaskWeighting(1.0, 10.0))
        two = adapter.task_supervision_loss(images, pseudo_maps, desc, seg, retr, adapter.TaskWeighting(2.0, 20.0))
        assert two.item() == pytest.approx(2.0 * one.item(), rel=1e-5)


class TestTrainAdapterContracts:
    def test_frozen_hash_mismatch_aborts(self, tiny_tasks):
        train, seg, retr = tiny_tasks
        pseudo = tasks.PseudoGroundTruth(
            seg_maps=seg.net.predict(train.images[:8]),
            descriptors=retr.net.descriptors(train.images[:8]),
        )
        batch = train.subset(np.arange(8))
        seed = adapter.AdapterNet.build(Rng(49)).params
        # sabotage the frozen net after hashing
        retr.params.tensors()[0].data[0, 0, 0, 0] += 1.0
        try:
            with pytest.raises(ContractError, match="changed after freezing"):
                adapter.train_adapter(
                    1, batch, batch, pseudo, pseudo, seed, seg, retr,
                    adapter.TaskWeighting(), Rng(50), epochs=1, batch_size=4,
                )
        finally:
            retr.params.tensors()[0].data[0, 0, 0, 0] -= 1.0

    def test_misaligned_pseudo_rejected(self, tiny_tasks):
        train, seg, retr = tiny_tasks
        pseudo = tasks.PseudoGroundTruth(
            seg_maps=seg.net.predict(train.images[:4]),
            descriptors=retr.net.descriptors(train.images[:4]),
        )
        batch = train.subset(np.arange(8))
        seed = adapter.AdapterNet.build(Rng(51)).params
        with pytest.raises(ContractError, match="misaligned"):
            adapter.train_adapter(
                1, batch, batch, pseudo, pseudo, seed, seg, retr,
                adapter.TaskWeighting(), Rng(52), epochs=1, batch_size=4,
            )

    def test_seed_clone_semantics_and_best_checkpoint(self, tiny_tasks):
        train, seg, retr = tiny_tasks
        n = 16
        pseudo = tasks.PseudoGroundTruth(
            seg_maps=seg.net.predict(train.images[:n]),
            descriptors=retr.net.descriptors(train.images[:n]),
        )
        batch = train.subset(np.arange(n))
        seed = adapter.AdapterNet.build(Rng(53)).params
        seed_hash = seed.content_hash()
        params, info = adapter.train_adapter(
            2, batch, batch, pseudo, pseudo, seed, seg, retr,
            adapter.TaskWeighting(), Rng(54), epochs=2, batch_size=4,
        )
        assert seed.content_hash() == seed_hash  # seed untouched
        assert params.content_hash() != seed_hash
        # best-checkpoint contract: returned params are no worse than epoch 0
        assert info["best_val"] <= info["val_history"][0] + 1e-9
