import numpy as np
import pytest

from vortexlab.kernel import build_kernel_model, build_tensor_kernel, build_v0_field


@pytest.fixture(scope="session")
def kernel():
    return build_kernel_model(32, 256)


@pytest.fixture(scope="session")
def v0_field():
    return build_v0_field(32, 256)


@pytest.fixture(scope="session")
def tensor_kernel(kernel, v0_field):
    return build_tensor_kernel(1.0, 1.0, base=kernel, v0=v0_field)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(label, ok, detail):
        line = f"{label}: {'PASS' if ok else 'FAIL'} | {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        return ok
    return record
