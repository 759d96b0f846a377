import pytest
from hypothesis import settings

from mlattn import _backend

settings.register_profile("repo", derandomize=True)
settings.load_profile("repo")


@pytest.fixture(params=_backend.available())
def backend(request):
    """Run a test once per importable kernel backend, restoring the default afterwards."""
    previous = _backend.BACKEND
    _backend.use(request.param)
    yield request.param
    _backend.use(previous)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
