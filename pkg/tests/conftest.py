import numpy as np
import pytest

from ir2net.autograd import precision


@pytest.fixture
def wide():
    with precision("wide"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status:<4} {title} -- {detail}")
