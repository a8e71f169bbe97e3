import numpy as np
import pytest
from hypothesis import settings

from fecanet.tensor import Tensor

settings.register_profile("desk", max_examples=25, deadline=None)
settings.load_profile("desk")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tensor(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class AcceptanceLog:
    def __init__(self):
        self.lines = []

    def record(self, number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
        self.lines.append((number, line))
        print(line)
        return ok


def pytest_configure(config):
    config._acceptance = AcceptanceLog()


@pytest.fixture
def acceptance(request):
    return request.config._acceptance


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = sorted(config._acceptance.lines)
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
