import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record and print one PASS/FAIL line per acceptance criterion, then assert it."""
    config = request.config
    tr = config.pluginmanager.get_plugin("terminalreporter")

    def report(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        config.acceptance_lines.append(line)
        if tr is not None:
            tr.ensure_newline()
            tr.write_line(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
