import numpy as np
import pytest

from mambatrans.data import generate_dataset
from mambatrans.detector import DetectorConfig
from mambatrans.model import ModelConfig
from mambatrans.train import pretrain_detector


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    """Smallest model that still has every block type (two groups of one block)."""
    return ModelConfig(feature_channels=4, num_groups=2, blocks_per_group=1, state_dim=2, num_heads=2)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(seed=7, count=4, size=32)


@pytest.fixture(scope="session")
def tiny_detector(tiny_dataset):
    det, _ = pretrain_detector(tiny_dataset, steps=30, seed=0, config=DetectorConfig(width=8))
    return det


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; repeated in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
