from __future__ import annotations

import pytest


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption("--run-slow", action="store_true", default=False, help="auch langsame Tests ausführen")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="langsamer Test; mit --run-slow aktivieren")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
