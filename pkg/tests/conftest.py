from pathlib import Path

import pytest

from emdc.config import load_config
from emdc.harness import synthetic_sets, train

ROOT = Path(__file__).resolve().parents[1]
SMOKE_CONFIG = ROOT / "configs" / "smoke.yaml"
SMOKE_STEPS = 200


@pytest.fixture(scope="session")
def smoke_cfg():
    return load_config(SMOKE_CONFIG)


@pytest.fixture(scope="session")
def smoke_sets(smoke_cfg):
    return synthetic_sets(smoke_cfg)


@pytest.fixture(scope="session")
def smoke_run(smoke_cfg, smoke_sets):
    """The reference 200-step smoke training, shared across test modules."""
    return train(smoke_cfg, smoke_sets[0], max_steps=SMOKE_STEPS)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(tag, ok, detail)`` records one PASS/FAIL line and asserts ``ok``."""

    def record(tag, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {tag}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
