import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_records():
    """64 NSR + 64 AFIB three-lead records at 100 Hz (shared, read-only)."""
    from ecgssl.synth import synth_records
    return synth_records(["NSR", "AFIB"], 64, seed=3, fs_hz=100.0, n_leads=3, noise_sd=0.05)


@pytest.fixture(scope="session")
def small_segments(small_records):
    from ecgssl.data import segment_record, zscore
    return [zscore(s) for r in small_records for s in segment_record(r)]


# ---- acceptance reporting ----------------------------------------------------------

ACCEPTANCE_CRITERIA = 11
_acceptance: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, passed, detail)``."""
    def record(n: int, passed: bool, detail: str) -> None:
        _acceptance[n] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, ACCEPTANCE_CRITERIA + 1):
        if n not in _acceptance:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        passed, detail = _acceptance[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
