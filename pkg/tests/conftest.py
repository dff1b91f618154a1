import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hstf.features import flows_to_samples  # noqa: E402
from hstf.net import ModelConfig  # noqa: E402
from hstf.synth import generate_corpus  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(60, 60, "high", seed=11)


@pytest.fixture(scope="session")
def small_samples(small_corpus):
    return flows_to_samples(small_corpus)


@pytest.fixture
def tiny_cfg():
    """Shrunken network: 4x8 matrices, one 2x4 kernel, LSTM width 3, two packets per direction."""
    return ModelConfig(rows=4, cols=8, kernel_h=2, kernel_w=4, stride=2, kernels=1, lstm_hidden=3,
                       flow_size=2, ep_out=4, ef_out=4, head_hidden=5, dtype="float64", seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
