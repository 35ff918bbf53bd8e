import functools
from contextlib import contextmanager

import pytest
from hypothesis import HealthCheck, settings

from cmlreid.lifelong import ExperimentConfig, run_sequence
from cmlreid.world import build_world

settings.register_profile("cmlreid", deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("cmlreid")

_CRITERIA: dict[int, list[tuple[str, bool, str]]] = {}


@contextmanager
def criterion(number: int, name: str):
    """Record the outcome of one acceptance check, then let any failure propagate."""
    detail = {"text": ""}
    try:
        yield detail
    except BaseException:
        _CRITERIA.setdefault(number, []).append((name, False, detail["text"]))
        raise
    _CRITERIA.setdefault(number, []).append((name, True, detail["text"]))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        checks = _CRITERIA[number]
        ok = all(c[1] for c in checks)
        parts = "; ".join(f"{n} {'ok' if p else 'FAILED'}{(' (' + d + ')') if d else ''}"
                          for n, p, d in checks)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} | {parts}")


@functools.lru_cache(maxsize=None)
def cached_run(**overrides):
    return run_sequence(ExperimentConfig(**overrides))


@functools.lru_cache(maxsize=None)
def cached_world(seed: int = 0):
    return build_world(seed)


@pytest.fixture(scope="session")
def world():
    return cached_world(0)


@pytest.fixture(scope="session")
def default_full():
    return cached_run(variant="full")
