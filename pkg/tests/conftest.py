import time

import numpy as np
import pytest

from halo.mac import characterize, default_profile
from halo.netlist import build_default_mac_netlist


@pytest.fixture(scope="session")
def netlist():
    return build_default_mac_netlist()


@pytest.fixture(scope="session")
def profile():
    return default_profile()


@pytest.fixture(scope="session")
def raw_exhaustive_timed(netlist):
    # about a minute on one core; shared by every test that needs it
    t0 = time.perf_counter()
    prof = characterize(netlist)
    return prof, time.perf_counter() - t0


@pytest.fixture(scope="session")
def raw_exhaustive(raw_exhaustive_timed):
    return raw_exhaustive_timed[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
