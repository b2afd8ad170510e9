import pytest

from urbanwind import data


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """10 scenes at 64x64 (80 samples), shared across the session."""
    root = tmp_path_factory.mktemp("ds10")
    data.build_dataset(10, 64, 0, root)
    return root


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", {}) if mod else {}
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
