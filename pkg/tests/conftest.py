import pytest

from terlab import sim


@pytest.fixture(scope="session")
def small_stations():
    return sim.generate_dataset(24, seed=5)


@pytest.fixture(scope="session")
def small_tokenized(small_stations):
    stats = sim.TokenStats.fit(small_stations)
    return [sim.tokenize_station(st, stats) for st in small_stations]


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
