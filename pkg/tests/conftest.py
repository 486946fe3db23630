from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from aptamine.config import Config  # noqa: E402
from corpus import FIXTURE_TARGETS, fixture_world  # noqa: E402
from mockweb import MockWeb  # noqa: E402

FIXED_TIME = "2026-01-01T00:00:00Z"


@pytest.fixture(autouse=True)
def _no_api_key(monkeypatch):
    monkeypatch.delenv("NCBI_API_KEY", raising=False)
    monkeypatch.delenv("APTAMINE_CONFIG", raising=False)


@pytest.fixture
def world():
    articles, targets, _ = fixture_world()
    with MockWeb(articles, targets) as web:
        yield web


@pytest.fixture
def fast_config(tmp_path, world) -> Config:
    """Heuristic backend, pinned clock and a fast limiter pointed at the mock world."""
    config = Config()
    world.configure(config)
    config.run.store_path = str(tmp_path / "store.db")
    config.run.out_dir = str(tmp_path / "out")
    config.run.fixed_time = FIXED_TIME
    config.semfilter.backend = "heuristic"
    config.network.ncbi_rps = 1000
    config.network.biorxiv_rps = 1000
    config.network.publisher_rps = 1000
    config.network.base_backoff = 0.01
    config.network.timeout_s = 5
    return config


@pytest.fixture
def fixture_targets() -> list[str]:
    return list(FIXTURE_TARGETS)


# acceptance criterion number -> (title, passed, detail)
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")
