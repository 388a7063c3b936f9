import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pointlf.scene import SynthConfig, synthesize_scene

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_config():
    return SynthConfig(num_frames=12, width=24, height=20, focal=20.0, points_per_frame=300)


@pytest.fixture(scope="session")
def small_scene(small_config):
    return synthesize_scene(small_config, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary -------------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def acceptance():
    """``record(number, name, ok, detail)``; one line per criterion is printed at session end."""
    def record(number: int, name: str, ok: bool, detail: str = "") -> None:
        _ACCEPTANCE[number] = (name, bool(ok), detail)
        print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {name} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        name, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n:2d}. {name}: {detail}")
