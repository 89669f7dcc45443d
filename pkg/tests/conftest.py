import pytest
import torch

from hbridge.config import tiny_config
from hbridge.model import HBridgeModel

torch.set_num_threads(1)


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def model(cfg):
    return HBridgeModel(cfg)


@pytest.fixture
def model64(cfg):
    return HBridgeModel(cfg).double()


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
