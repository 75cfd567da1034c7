import numpy as np
import pytest
import torch

from pnreid.synth_data import SynthConfig, generate_dataset

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Register a PASS/FAIL line for the acceptance summary, then assert."""
    def record(number: int, title: str, passed: bool, detail: str = ""):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _torch_state():
    torch.use_deterministic_algorithms(True)
    yield


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(SynthConfig(n_identities=6, n_train_identities=3, images_per_identity=4, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
