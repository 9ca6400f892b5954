import sys

import numpy as np
import pytest
import torch

from landcover_cgan.synth import synth_corpus
from landcover_cgan.taxonomy import default_taxonomy


@pytest.fixture(scope="session")
def taxonomy():
    return default_taxonomy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12 synthetic tiles on disk: 8 train, 2 validation, 2 test."""
    out = tmp_path_factory.mktemp("corpus")
    tiles, manifest = synth_corpus(3, 12, split_counts={"train": 8, "validation": 2, "test": 2}, out_dir=out)
    return tiles, manifest, out


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
