"""FIFO buffer, novelty policy, and event-log contracts (cheap parts; the
full online episode runs in the acceptance pipeline)."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condadapt.errors import ContractError
from condadapt.orchestrator import EventLog, FrameBuffer, NoveltyPolicy


class TestFrameBuffer:
    def test_push_one(self):
        buf = FrameBuffer(4)
        buf.push(np.zeros((3, 2, 2)))
        assert len(buf) == 1
        assert not buf.full

    def test_eviction_after_capacity(self):
        buf = FrameBuffer(3)
        for i in range(4):
            buf.push(np.full((1, 1, 1), float(i)))
        assert len(buf) == 3
        frames = buf.frames()
        assert frames[0, 0, 0, 0] == 1.0  # frame 0 evicted
        assert frames[-1, 0, 0, 0] == 3.0

    def test_order_oldest_to_newest(self):
        buf = FrameBuffer(5)
        for i in range(5):
            buf.push(np.full((1, 1, 1), float(i)))
        np.testing.assert_array_equal(buf.frames().reshape(-1), [0, 1, 2, 3, 4])

    @given(st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=30))
    @settings(max_examples=40, deadline=None)
    def test_size_never_exceeds_capacity(self, capacity, pushes):
        buf = FrameBuffer(capacity)
        for i in range(pushes):
            buf.push(np.full((1, 1, 1), float(i)))
        assert len(buf) == min(capacity, pushes)
        if pushes >= capacity:
            assert buf.full
            # oldest surviving frame is pushes - capacity
            assert buf.frames()[0, 0, 0, 0] == float(pushes - capacity)

    def test_bad_capacity(self):
        with pytest.raises(ContractError):
            FrameBuffer(0)


class TestNoveltyPolicy:
    def test_threshold_positive(self):
        with pytest.raises(ContractError):
            NoveltyPolicy(threshold=0.0, min_fill=4)

    def test_fields(self):
        p = NoveltyPolicy(threshold=1.5, min_fill=8)
        assert p.threshold == 1.5 and p.min_fill == 8

    def test_distance_exactly_at_threshold_is_known(self):
        p = NoveltyPolicy(threshold=2.0, min_fill=4)
        assert p.is_novel(2.0) is False  # strict inequality triggers
        assert p.is_novel(2.0000001) is True
        assert p.is_novel(1.9) is False


class TestEventLog:
    def test_monotone_logical_timestamps(self, tmp_path):
        log = EventLog(tmp_path / "events.jsonl")
        log.emit("a")
        log.emit("b", value=3)
        log.emit("c")
        stamps = [e["timestamp"] for e in log.events]
        assert stamps == [1, 2, 3]

    def test_jsonl_file_matches_memory(self, tmp_path):
        path = tmp_path / "events.jsonl"
        log = EventLog(path)
        log.emit("x", foo="bar")
        log.emit("y")
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert lines == log.events

    def test_total_order_of_transitions(self, tmp_path):
        log = EventLog(tmp_path / "e.jsonl")
        for name in ("adaptation_start", "gan_finetuned", "adapter_trained", "record_stored", "adaptation_done"):
            log.emit(name)
        order = [e["event"] for e in sorted(log.events, key=lambda e: e["timestamp"])]
        assert order == ["adaptation_start", "gan_finetuned", "adapter_trained", "record_stored", "adaptation_done"]
