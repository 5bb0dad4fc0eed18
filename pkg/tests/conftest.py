import numpy as np
import pytest

from radarsnn.points import RadarPointCloud


def make_cloud(power, frame_id="t", seed=0):
    power = np.asarray(power, dtype=np.float32)
    rng = np.random.default_rng(seed)
    pts = np.zeros((len(power), 5), dtype=np.float32)
    pts[:, :3] = rng.uniform(0, 10, size=(len(power), 3))
    pts[:, 3] = power
    pts[:, 4] = rng.normal(size=len(power))
    return RadarPointCloud(pts, frame_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(name, ok, detail)``; returns ``ok``."""
    def record(name, ok, detail=""):
        ACCEPTANCE.append((name, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else ""))
