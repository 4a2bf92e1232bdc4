import os

import numpy as np
import pytest
import torch

from dparnet.core import Sequence

_ACCEPTANCE_LINES = []


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    """Print and remember one pass/fail line for an acceptance criterion."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {name}: {detail}"
    _ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.manual_seed(0)
    torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_sequence(rng):
    from dparnet.data import synthetic_sequence
    return Sequence(synthetic_sequence(rng, 5, 64, 64, 1), id="small")


@pytest.fixture(scope="session")
def vgg_weights(tmp_path_factory):
    """A deterministic VGG-19 state dict saved to disk (no pretrained download available)."""
    import torchvision
    torch.manual_seed(7)
    net = torchvision.models.vgg19(weights=None)
    path = tmp_path_factory.mktemp("vgg") / "vgg19.pth"
    torch.save({k: v for k, v in net.state_dict().items() if k.startswith("features.")}, path)
    return path
