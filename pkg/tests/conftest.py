import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedal.config import DataConfig, ModelConfig, RunConfig

settings.register_profile("fedal", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fedal")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """A run small enough for protocol tests to take about a second."""
    return RunConfig(
        rounds=2, local_epochs=1, K=4, coreset_steps=2, batch_size=4,
        data=DataConfig(preset="di2", n_clients=2, seqs_per_client=8, length=64, eval_seqs_per_domain=4),
        model=ModelConfig(n_layers=1, d_model=8, n_heads=2, patch_len=8),
    )


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

