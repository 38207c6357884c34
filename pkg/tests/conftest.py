import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def finite_diff(f, arr: np.ndarray, eps: float = 1e-5, order: int = 2) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``arr`` (mutated in place).

    ``order=4`` uses the five-point stencil, which keeps truncation error small
    when the function is strongly curved.
    """
    steps = {2: ((1, 0.5),), 4: ((1, 2 / 3), (2, -1 / 12))}[order]
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        acc = 0.0
        for k, w in steps:
            arr[i] = old + k * eps
            hi = f()
            arr[i] = old - k * eps
            lo = f()
            acc += w * (hi - lo)
        arr[i] = old
        g[i] = acc / eps
    return g


@pytest.fixture
def fd():
    return finite_diff


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
