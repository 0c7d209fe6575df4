"""Pytest options shared by every test module."""
import pytest


def pytest_addoption(parser):
    """Register --runslow."""
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow training tests"
    )


def pytest_collection_modifyitems(config, items):
    """Skip tests marked slow unless --runslow is given."""
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
