import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from weightgen import nets

torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda l: int(l.split("]")[1].split(".")[0])):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def data_root(tmp_path_factory) -> Path:
    """Dataset cache shared by the whole session (reuses WEIGHTGEN_DATA_ROOT when set)."""
    env = os.environ.get("WEIGHTGEN_DATA_ROOT")
    return Path(env) if env else tmp_path_factory.mktemp("data")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cnn_arch():
    return nets.small_cnn_arch()


@pytest.fixture
def resnet_arch():
    return nets.mini_resnet_arch()


@pytest.fixture
def mlp_arch():
    return nets.mlp_arch()


REFERENCE_ROWS = {
    "CIFAR10": [(30.2, 1.3), (14.9, 0.8), (8.5, 0.4), (18.9, 0.0), (43.9, 1.4)],
    "CIFAR100": [(18.5, 0.6), (8.1, 0.4), (4.8, 0.4), (21.3, 1.5), (29.3, 2.9)],
    "CIFAR10 + 100": [(62.5, 0.9), (32.0, 0.4), (27.2, 0.2), (53.9, 1.3), (72.1, 1.2)],
}


@pytest.fixture
def reference_reports():
    """Published single- and multi-zoo rows for the residual track, as report objects."""
    from weightgen.evalharness import EvalReport, TaskResult, TaskSuite

    suite = TaskSuite(["CIFAR10", "CIFAR100"], ["TIN"], ["SVHN", "EuroSAT"])
    return [
        EvalReport(label, suite, {t: TaskResult(m, s, 10) for t, (m, s) in zip(suite.tasks, cells)})
        for label, cells in REFERENCE_ROWS.items()
    ]
