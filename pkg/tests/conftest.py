"""Shared fixtures: one small planted benchmark reused across test modules."""

import numpy as np
import pytest

from pathopt import (
    PlantSpec,
    RoutingConfig,
    build_reference_set,
    generate_planted_benchmark,
)

SMALL_PLANT = PlantSpec(pool_size=240, test_size=48)


@pytest.fixture(scope="session")
def cfg():
    return RoutingConfig()


@pytest.fixture(scope="session")
def small_bench(cfg):
    """(model, pool, test) at the default noise level, small enough for unit tests."""
    return generate_planted_benchmark(5, SMALL_PLANT, cfg)


@pytest.fixture(scope="session")
def small_model(small_bench):
    return small_bench[0]


@pytest.fixture(scope="session")
def small_store(small_bench):
    model, pool, _ = small_bench
    return build_reference_set(model, pool)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion, echoed in the
# terminal summary so they are visible even with captured output

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    def record(num: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {num:>2}: {'PASS' if passed else 'FAIL'}  {name} | {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
