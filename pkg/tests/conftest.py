import pytest

from anchorsense.scene import bundled_scene_path, load_scene


@pytest.fixture(scope="session")
def example1():
    return load_scene(bundled_scene_path("example1"))


@pytest.fixture(scope="session")
def example2():
    return load_scene(bundled_scene_path("example2"))


@pytest.fixture(scope="session")
def example4():
    return load_scene(bundled_scene_path("example4"))


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
