"""
Shared fixtures for the bridge auditor test suite.
"""

import os
import sys
from pathlib import Path

import pytest

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from trace_builder import TraceBuilder, audit_config, bridge_config  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale runs (deselect with -m 'not slow')")


@pytest.fixture
def builder():
    """Fresh trace builder for the default test bridge"""
    return TraceBuilder()


@pytest.fixture
def config():
    """AuditConfig for the default test bridge (indeterminate fee, all strategies)"""
    return audit_config(bridge_config())


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture(autouse=True)
def _isolated_environment(monkeypatch):
    """Keep BRIDGE_AUDIT_* settings from the developer's shell out of the tests"""
    for name in list(os.environ):
        if name.startswith("BRIDGE_AUDIT_"):
            monkeypatch.delenv(name, raising=False)
