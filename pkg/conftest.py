import logging

import pytest

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long Monte Carlo checks")
    parser.addoption("--runnightly", action="store_true", default=False, help="run full-length replication studies")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running Monte Carlo or pipeline check")
    config.addinivalue_line("markers", "nightly: replication study taking an hour or more")


def pytest_collection_modifyitems(config, items):
    skips = {}
    if not config.getoption("--runslow"):
        skips["slow"] = pytest.mark.skip(reason="needs --runslow")
    if not config.getoption("--runnightly"):
        skips["nightly"] = pytest.mark.skip(reason="needs --runnightly")
    for item in items:
        for keyword, marker in skips.items():
            if keyword in item.keywords:
                item.add_marker(marker)
