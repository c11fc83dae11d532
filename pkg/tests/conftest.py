import json
from pathlib import Path

import pytest

HERE = Path(__file__).parent


@pytest.fixture(scope="session")
def frozen():
    return json.loads((HERE / "frozen_oracles.json").read_text())


@pytest.fixture(scope="session")
def recipe_paths():
    paths = sorted((HERE.parent / "recipes").glob("*.cfg"))
    assert paths
    return paths


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.lines():
            terminalreporter.write_line(line)
