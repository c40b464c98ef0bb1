import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from peatcluster.features import dataset_features
from peatcluster.ingest import SynthConfig, synthesize_dataset

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Record ``(criterion, title, passed, detail)`` for the end-of-run summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"criterion {number:2d} {title}: {'PASS' if passed else 'FAIL'} ({detail})")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:2d} {title}: {'PASS' if passed else 'FAIL'} ({detail})")


@pytest.fixture(scope="session")
def noiseless30():
    ds, labels = synthesize_dataset(SynthConfig(noise_sd=0.0, seed=0))
    fm, decomps, templates = dataset_features(ds)
    return ds, labels, fm, decomps, templates


@pytest.fixture(scope="session")
def noisy30():
    ds, labels = synthesize_dataset(SynthConfig(seed=3))
    fm, decomps, templates = dataset_features(ds)
    return ds, labels, fm, decomps, templates


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
