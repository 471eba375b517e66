import numpy as np
import pytest
import torch

from eegsal.data_io import SyntheticSpec, generate_synthetic, prepare_trials
from eegsal.imaging import MontageGeometry


@pytest.fixture(scope="session")
def geometry():
    return MontageGeometry.standard()


@pytest.fixture(scope="session")
def tiny_trials():
    return generate_synthetic(SyntheticSpec(n_participants=2, trials_per_participant=4, seed=3))


@pytest.fixture(scope="session")
def tiny_data(tiny_trials, geometry):
    return prepare_trials(tiny_trials, geometry)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
