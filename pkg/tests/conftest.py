import json
import time
from pathlib import Path

import pytest

from tabattack.pipeline import RunConfig, run

ACCEPTANCE_LINES = []


def record(criterion: str, passed: bool, detail: str):
    """Print and remember one acceptance verdict line."""
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


REFERENCE = {"name": "reference"}
SMALL = {
    "name": "small",
    "synth": {"n_samples": 1500},
    "split": {"attack_set_size": 60},
    "triplet": {"epochs": 3},
    "solver": {"epochs": 10},
    "tree_params": {"rf": {"n_trees": 5}, "gbm": {"n_trees": 10}},
}


class Run:
    def __init__(self, out: Path, seconds: float, config: dict):
        self.out = out
        self.seconds = seconds
        self.config = config

    def json(self, rel):
        return json.loads((self.out / rel).read_text())


def _execute(tmp_path_factory, name, doc):
    out = tmp_path_factory.mktemp(name)
    cfg = RunConfig.from_dict(doc)
    t0 = time.perf_counter()
    run(cfg, out)
    return Run(out, time.perf_counter() - t0, doc)


@pytest.fixture(scope="session")
def reference_runs(tmp_path_factory):
    """Default pipeline on the reference synthetic task for seeds 0, 1, 2."""
    return [_execute(tmp_path_factory, f"reference{s}", {**REFERENCE, "seed": s}) for s in range(3)]


@pytest.fixture(scope="session")
def regression_run(tmp_path_factory):
    doc = {"name": "regression", "seed": 0, "synth": {"task": "regression"}, "targets": ["dt"]}
    return _execute(tmp_path_factory, "regression", doc)


@pytest.fixture(scope="session")
def monotone_run(tmp_path_factory):
    doc = {"name": "monotone", "seed": 0, "synth": {"monotone_pair": True}, "targets": ["dt"]}
    return _execute(tmp_path_factory, "monotone", doc)


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """Reduced synthetic pipeline for module-level end-to-end checks."""
    return _execute(tmp_path_factory, "small", {**SMALL, "seed": 0})
