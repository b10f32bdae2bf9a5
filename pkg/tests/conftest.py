import os

# acceptance timings are stated for one core
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import time  # noqa: E402

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import settings  # noqa: E402

from csnn.config import make_config  # noqa: E402
from csnn.experiment import train_run  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# (criterion, status, detail) lines collected by test_acceptance.py
ACCEPTANCE_LINES = []


def record(criterion: str, passed, detail: str = "") -> None:
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    line = f"[{status}] {criterion}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


@pytest.fixture(scope="session")
def moons_run(tmp_path_factory):
    """The moons preset trained once per session, timed."""
    out = tmp_path_factory.mktemp("runs")
    cfg = make_config(preset="moons", out=str(out))
    t0 = time.perf_counter()
    res = train_run(cfg)
    res.seconds = time.perf_counter() - t0
    res.config = cfg
    return res
