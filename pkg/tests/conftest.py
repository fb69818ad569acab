from __future__ import annotations

import sys

import pytest

from curasr.mockserver import MockServer


@pytest.fixture
def serve():
    """Factory starting mock servers that are torn down after the test."""
    servers: list[MockServer] = []

    def _serve(fixture: dict) -> MockServer:
        server = MockServer(fixture).start()
        servers.append(server)
        return server

    yield _serve
    for server in servers:
        server.stop()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """One visible pass/fail line per acceptance criterion."""
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and item.module.__name__ == "test_acceptance":
        status = "PASS" if report.passed else "FAIL"
        print(f"[acceptance] {item.name}: {status}", file=sys.__stdout__, flush=True)
