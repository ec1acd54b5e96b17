import time

import pytest
from hypothesis import settings

from mfevit import tensor as T
from mfevit.gradcheck import check_gradients
from mfevit.harness import Dataset
from mfevit.pipeline import generate_synthetic

settings.register_profile("default", deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.get_tape().reset()
    yield
    T.get_tape().reset()


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> Dataset:
    """Four subjects, two samples per expression each, 32x32."""
    root = tmp_path_factory.mktemp("small")
    return Dataset.from_manifest(generate_synthetic(root, 4, 2, seed=0), 32)


@pytest.fixture(scope="session")
def gradient_reports():
    """Finite-difference audit of every parameter on the tiny config, with its wall time."""
    t0 = time.perf_counter()
    reports = check_gradients()
    return reports, time.perf_counter() - t0


def synthetic_dataset(tmp_path_factory, seed: int) -> Dataset:
    """The smoke-training corpus: 10 subjects, 4 samples per expression each, 10% noisy."""
    root = tmp_path_factory.mktemp(f"synthetic{seed}")
    return Dataset.from_manifest(generate_synthetic(root, 10, 4, seed=seed, noise_frac=0.1, image_size=32), 32)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
