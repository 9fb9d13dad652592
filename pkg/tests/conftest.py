import numpy as np
import pytest

from agvsched.factory import Layout, build_grid, default_layout


@pytest.fixture(scope="session")
def grid10():
    return build_grid(10, 10, default_layout(10, 10))


@pytest.fixture(scope="session")
def toy_grid():
    # 3x3 with two production cells west/east of the centre, one resupply
    return build_grid(3, 3, Layout(production=((0, 1), (2, 1)), resupply=((1, 0),)),
                      validate=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_REPORT: list[str] = []


@pytest.fixture
def report():
    """Record one summary line per acceptance criterion."""
    def add(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        _REPORT.append(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_REPORT, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
