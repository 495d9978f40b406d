from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from needle_handover.sim import NoiseSettings, build_scene

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# criterion number -> (passed, detail); filled by the acceptance module
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def scene():
    return build_scene()


@pytest.fixture
def zero_noise():
    return NoiseSettings.zero()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
