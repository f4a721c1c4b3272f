import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hvq.synthetic import SyntheticSpec, synth_generate  # noqa: E402
from hvq.tcn import TcnConfig  # noqa: E402
from hvq.training import TrainConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """Three short synthetic videos; enough for fast end-to-end plumbing tests."""
    return synth_generate(SyntheticSpec(K=3, n_videos=3, feature_dim=8, short_lengths=(4, 6),
                                        long_lengths=(8, 12), seed=3))


@pytest.fixture
def small_config():
    tcn = TcnConfig(latent_dim=8, stages=1, layers_per_stage=3, hidden_channels=8)
    return TrainConfig(epochs=3, seed=0, tcn=tcn)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one ``PASS``/``FAIL`` line per acceptance criterion."""
    def report(criterion, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
