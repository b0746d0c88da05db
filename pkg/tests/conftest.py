import os
from pathlib import Path

import numpy as np
import pytest

from randsac.model import ModelConfig, RandSAC

CIFAR_DIR = Path(os.environ.get("RANDSAC_CIFAR", "/root/data/cifar-10-batches-bin"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cifar_dir():
    if not (CIFAR_DIR / "test_batch.bin").is_file():
        pytest.skip(f"CIFAR-10 binaries not found at {CIFAR_DIR} (set RANDSAC_CIFAR)")
    return CIFAR_DIR


@pytest.fixture
def tiny_config():
    return ModelConfig(dim=16, heads=2, enc_layers=2, dec_layers=1, patch=2, image_size=(8, 8))


@pytest.fixture
def tiny_model(tiny_config):
    return RandSAC(tiny_config, seed=0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
