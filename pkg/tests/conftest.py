import numpy as np
import pytest

from spheremorph.grid import make_grid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def grid8():
    return make_grid(8, 16)


@pytest.fixture(scope="session")
def grid16():
    return make_grid(16, 32)


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """``record = criterion(n)`` marks criterion ``n`` as started; ``record(ok, detail)`` logs the outcome."""
    log = request.config.stash[_ACCEPTANCE]

    def start(n: int):
        log[n] = f"FAIL criterion {n}: raised before completing"

        def record(ok: bool, detail: str) -> bool:
            log[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
            print(log[n])
            return ok

        return record

    return start


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, {})
    if log:
        terminalreporter.section("acceptance criteria")
        for n in sorted(log):
            terminalreporter.write_line(log[n])
