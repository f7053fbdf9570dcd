import pytest

from pidcnn.scene import build_rig, generate_records


@pytest.fixture(scope="session")
def tiny_train():
    """64 samples at 8x8, the smoke-test scale."""
    return generate_records(64, seed=21, rig=build_rig(8))


@pytest.fixture(scope="session")
def tiny_val():
    return generate_records(32, seed=22, rig=build_rig(8))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
