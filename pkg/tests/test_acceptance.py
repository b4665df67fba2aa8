"""Acceptance suite: one test per criterion, one printed pass line each.

The heavy criteria read the shared full-pipeline session fixture; running
this module alone therefore executes the complete default-config pipeline
(and a second run for the determinism criterion).
"""

import math
import time

import numpy as np
import pytest

from condadapt import autodiff as ad
from condadapt import gan, tasks
from condadapt.autodiff import Tensor
from condadapt.errors import CheckpointError
from condadapt.memory import load_container, paramset_to_arrays, save_container
from condadapt.params import ParamSet
from condadapt.rng import Rng

from _gradcheck import assert_gradients_match
from test_autodiff import GRADCHECK_CASES


def _report(criterion: int, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: PASS - {detail}")


def test_criterion_01_gradient_suite_under_a_minute():
    start = time.time()
    for case in GRADCHECK_CASES:
        fn_case = case.values[0]
        for trial in range(10):
            rng = Rng(1000 + trial).split(fn_case.__name__)
            fn, arrays = fn_case(rng)
            assert_gradients_match(fn, arrays, h=1e-3, rtol=1e-3)
    elapsed = time.time() - start
    assert elapsed < 60.0
    _report(1, f"{len(GRADCHECK_CASES)} ops x 10 instances, rel err < 1e-3, {elapsed:.1f}s")


def test_criterion_02_loss_identities():
    def const(v):
        return Tensor(np.full((2, 1, 3, 3), v, dtype=np.float32))

    assert gan.generator_adversarial_loss(const(1.0)).item() == 0.0
    assert gan.generator_adversarial_loss(const(0.0)).item() == 1.0
    assert gan.generator_adversarial_loss(const(0.5)).item() == 0.25
    assert gan.discriminator_loss(const(1.0), const(0.0)).item() == 0.0
    assert gan.discriminator_loss(const(0.0), const(1.0)).item() == 2.0
    assert gan.discriminator_loss(const(0.5), const(0.5)).item() == 0.5
    ones = Tensor(np.ones((2, 3, 4, 4), dtype=np.float32))
    zeros = Tensor(np.zeros((2, 3, 4, 4), dtype=np.float32))
    assert gan.cycle_loss(ones, ones).item() == 0.0
    assert gan.cycle_loss(ones, zeros).item() == 1.0
    assert ad.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), Tensor([[1.0, 0.0]])).item() == pytest.approx(
        0.0, abs=1e-6
    )
    assert ad.softmax_cross_entropy(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]])).item() == pytest.approx(
        math.log(2.0), abs=1e-6
    )
    hyper = gan.GanHyper(lambda_rec=10.0, lambda_adv=1.0)
    rec = Tensor(np.asarray(0.2, dtype=np.float32))
    adv = Tensor(np.asarray(0.5, dtype=np.float32))
    assert gan.generator_objective(rec, adv, hyper).item() == pytest.approx(2.5, abs=1e-6)
    assert ad.squared_error(Tensor(np.full(4, 0.5)), 1.0).item() == pytest.approx(0.25)
    _report(2, "LSGAN, cycle, cross-entropy and objective arithmetic identities exact")


def test_criterion_03_metric_oracles():
    # mIOU vs exhaustive counting
    pred = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [0, 0, 0, 0], [1, 1, 1, 1]])
    gt = np.array([[0, 0, 1, 1], [0, 1, 1, 1], [0, 0, 1, 0], [1, 1, 0, 0]])
    inter0 = np.logical_and(pred == 0, gt == 0).sum()
    union0 = np.logical_or(pred == 0, gt == 0).sum()
    inter1 = np.logical_and(pred == 1, gt == 1).sum()
    union1 = np.logical_or(pred == 1, gt == 1).sum()
    assert tasks.miou(pred, gt, 2) == pytest.approx((inter0 / union0 + inter1 / union1) / 2, abs=1e-12)
    assert tasks.miou(gt, gt, 2) == 1.0
    # PR/AUC vs hand integration
    recalls = np.array([0.0, 0.5, 1.0])
    precisions = np.array([1.0, 0.8, 0.6])
    assert tasks.pr_auc(recalls, precisions) == pytest.approx(0.45 + 0.35)
    desc = Rng(5).normal((12, 8))
    places = np.arange(12) % 4
    assert tasks.evaluate_retrieval(desc, places, desc, places).auc == pytest.approx(1.0)
    _report(3, "mIOU counting oracle and PR trapezoid hand integration match exactly")


def test_criterion_04_frozen_task_immutability(acceptance_report):
    r = acceptance_report
    trained = r["tasks"]["frozen_hashes"]
    after_adapters = r["adapters"]["frozen_hashes"]
    after_eval = r["evaluate"]["frozen_hashes"]
    online_before = r["online"]["frozen_hashes_before"]
    online_after = r["online"]["frozen_hashes_after"]
    for stage_hashes in (after_adapters, after_eval, online_before, online_after):
        assert stage_hashes == trained
    _report(4, "task-net hashes identical across GAN, adapter and online stages")


def test_criterion_05_adapter_segmentation_gain(acceptance_run, acceptance_report):
    means = acceptance_report["evaluate"]["means_over_initial_conditions"]
    assert means["miou_gain"] >= 0.10
    worst = min(
        c["miou_adapted"] - c["miou_raw"]
        for name, c in acceptance_report["evaluate"]["conditions"].items()
        if c["condition_id"] != 0
    )
    assert worst >= -0.02
    seconds = acceptance_run["seconds"]
    if seconds is not None:
        assert seconds <= 30 * 60
    _report(
        5,
        f"mean mIOU gain {means['miou_gain']:+.3f} (>= 0.10), worst condition {worst:+.3f}, "
        f"pipeline {'%.0fs' % seconds if seconds else 'cached'}",
    )


def test_criterion_06_retrieval_gain(acceptance_report):
    means = acceptance_report["evaluate"]["means_over_initial_conditions"]
    assert means["auc_gain"] >= 0.05
    _report(6, f"mean retrieval AUC gain {means['auc_gain']:+.3f} (>= 0.05)")


def test_criterion_07_classifier_accuracy(acceptance_report):
    acc = acceptance_report["evaluate"]["classifier"]["accuracy"]
    assert acc >= 0.90
    _report(7, f"held-out condition accuracy {acc:.3f} (>= 0.90)")


def test_criterion_08_online_learning_episode(acceptance_report):
    on = acceptance_report["online"]
    assert on["novelty_before"]["novel"] is True
    assert on["heldout"]["miou_gain"] is not None and on["heldout"]["miou_gain"] >= 0.05
    assert on["novelty_after"]["novel"] is False
    assert on["memory_size_after"] == on["memory_size_before"] + 1
    assert on["seed_adapter_hashes_unchanged"] is True
    _report(
        8,
        f"novel triggered (d={on['novelty_before']['distance']:.2f} > tau={on['tau']:.2f}), "
        f"mIOU gain {on['heldout']['miou_gain']:+.3f}, then Known; memory +1; seeds unchanged",
    )


def test_criterion_09_reference_transparency(acceptance_report):
    ref = acceptance_report["evaluate"]["reference_transparency"]
    assert ref["delta"] < 0.03
    _report(9, f"identity adapter shifts reference mIOU by {ref['delta']:.4f} (< 0.03)")


def test_criterion_10_persistence_roundtrip(tmp_path):
    ps = ParamSet()
    ps.add("w", Tensor(Rng(77).normal((5, 4, 3, 3)), requires_grad=True))
    ps.add("b", Tensor(Rng(78).normal((5,)), requires_grad=True))
    path = tmp_path / "roundtrip.adpt"
    save_container(path, paramset_to_arrays(ps), extra={"note": "acceptance"})
    arrays, extra = load_container(path)
    for name, t in ps.items():
        assert arrays[name].tobytes() == t.data.tobytes()
    corrupted = bytearray(path.read_bytes())
    corrupted[-1] ^= 0x01
    path.write_bytes(bytes(corrupted))
    with pytest.raises(CheckpointError):
        load_container(path)
    _report(10, "container round-trip bit-exact; corrupted blob rejected")


def test_criterion_11_determinism(second_run_metrics):
    first, second = second_run_metrics
    assert first == second
    _report(11, f"two full runs produced byte-identical metrics JSON ({len(first)} bytes)")
