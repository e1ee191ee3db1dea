import pytest

from ccasim.board import load_profile


@pytest.fixture
def rk3588():
    return load_profile("rk3588")


@pytest.fixture
def fvp():
    return load_profile("fvp-rme")


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
