import pytest

from reservex import games
from reservex.model import load_case
from reservex.preemptive import ValueCache

THREE_AREA = ["three_area_base", "three_area_connected", "three_area_emptycore", "three_area_noflex_a2"]

_cases = {}
_caches = {}
_tables = {}


def case_named(name):
    if name not in _cases:
        _cases[name] = load_case(name)
    return _cases[name]


def cache_named(name):
    # one value cache per fixture for the whole session; MILPs are the slow part
    if name not in _caches:
        _caches[name] = ValueCache(case_named(name))
    return _caches[name]


def table_named(name):
    if name not in _tables:
        cache = cache_named(name)
        _tables[name] = (games.expected_table(cache), games.scenario_tables(cache))
    return _tables[name]


@pytest.fixture(scope="session")
def base():
    return case_named("three_area_base")


@pytest.fixture(scope="session")
def base_cache():
    return cache_named("three_area_base")


@pytest.fixture(scope="session")
def base_tables():
    return table_named("three_area_base")


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
