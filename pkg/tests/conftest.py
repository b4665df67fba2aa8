"""Test-session setup: BLAS pinning plus the shared full-pipeline fixture."""

import json
import os
import sys
import time
from pathlib import Path

if "numpy" not in sys.modules:
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

sys.path.insert(0, os.path.dirname(__file__))

import pytest


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    """One full default-config pipeline run shared by acceptance and
    integration tests.

    Set CONDADAPT_ACCEPTANCE_DIR to reuse an existing completed run while
    iterating locally; the suite runs it fresh otherwise.
    """
    from condadapt.pipeline import PipelineConfig, run_all

    override = os.environ.get("CONDADAPT_ACCEPTANCE_DIR")
    if override and (Path(override) / "report" / "report.json").exists():
        return {"dir": Path(override), "seconds": None}
    out = tmp_path_factory.mktemp("acceptance")
    start = time.time()
    run_all(PipelineConfig(), out)
    return {"dir": out, "seconds": time.time() - start}


@pytest.fixture(scope="session")
def acceptance_report(acceptance_run):
    return json.loads((acceptance_run["dir"] / "report" / "report.json").read_text())


@pytest.fixture(scope="session")
def second_run_metrics(acceptance_run, tmp_path_factory):
    """A second, independent full run for the determinism criterion.

    Returns the metrics.json byte strings of both runs.
    """
    from condadapt.pipeline import PipelineConfig, Paths, run_all

    second = tmp_path_factory.mktemp("acceptance_second")
    run_all(PipelineConfig(), second)
    first_bytes = (Paths(acceptance_run["dir"]).eval / "metrics.json").read_bytes()
    second_bytes = (Paths(second).eval / "metrics.json").read_bytes()
    return first_bytes, second_bytes
