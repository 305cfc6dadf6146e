import sys

import numpy as np
import pytest

from fraug.config import ExperimentConfig, replace_path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**dotted) -> ExperimentConfig:
    """A few-second federation: 4 clients, tiny networks, 3 rounds of 5 steps."""
    base = dict(
        data__n_train=60,
        data__n_test=40,
        data__dim=8,
        network__classifier__hidden=[16],
        network__classifier__embed_dim=8,
        network__generator__noise_dim=4,
        network__generator__hidden=8,
        network__rtnet__hidden=6,
        train__rounds=3,
        train__local_steps=5,
        train__batch_size=8,
        run__seeds=[0],
    )
    base.update(dotted)
    return replace_path(ExperimentConfig(), **base)


@pytest.fixture
def small_cfg():
    return small_config


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
