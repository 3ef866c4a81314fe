import os

import numpy as np
import pytest

from promptfed import _backend


def pytest_configure(config):
    # keep test runs away from the user's backbone cache
    os.environ.setdefault("PROMPTFED_CACHE", os.path.join(os.path.dirname(__file__), "..", ".cache", "backbones"))


@pytest.fixture(params=_backend.available())
def backend(request):
    """Run a test once per importable kernel backend."""
    prev = _backend.NAME
    _backend.use(request.param)
    yield request.param
    _backend.use(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pretrained():
    """The default pretrained backbone (built once, then cached on disk)."""
    from promptfed import config, experiments

    return experiments.get_backbone(config.RunConfig())


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report_criterion(request):
    """Record one ``criterion N: PASS/FAIL ...`` line and print it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((n, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
