import datetime as dt
from pathlib import Path

import numpy as np
import pytest

from stva.geo_graph import County, CountyGraph, SparsityPattern
from stva.ingest import ObservationPanel, WeekIndex

DATA = Path(__file__).parent / "data"

_criteria: dict[tuple[int, str], tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    number, title = mark.args
    outcome = "PASS" if call.excinfo is None else "FAIL"
    note = ""
    if call.excinfo is not None:
        text = str(call.excinfo.value).strip()
        note = text.splitlines()[0][:160] if text else call.excinfo.typename
    _criteria[(number, title)] = (outcome, note)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in sorted(_criteria):
        outcome, note = _criteria[(number, title)]
        line = f"criterion {number:2d} {outcome}: {title}"
        if note:
            line += f" ({note})"
        terminalreporter.write_line(line)


def make_graph(n, edges=(), hubs=(), seed=0, states=None):
    rng = np.random.default_rng(seed)
    lat = rng.uniform(30, 45, n)
    lon = rng.uniform(-110, -80, n)
    counties = [
        County(f"{10001 + i:05d}", f"C{i}", (states or ["AA", "BB"])[i % len(states or ["AA", "BB"])], lat[i], lon[i])
        for i in range(n)
    ]
    return CountyGraph.build(counties, edges, hubs)


def make_panel(cases, deaths, mobility=None, demographics=None, start=dt.date(2020, 3, 15)):
    cases = np.asarray(cases, dtype=float)
    deaths = np.asarray(deaths, dtype=float)
    T, N = cases.shape
    mobility = np.zeros((0, T, N)) if mobility is None else np.asarray(mobility, dtype=float)
    demographics = np.zeros((0, N)) if demographics is None else np.asarray(demographics, dtype=float)
    return ObservationPanel(
        fips=[f"{10001 + i:05d}" for i in range(N)],
        states=["AA"] * N,
        weeks=WeekIndex(start, T),
        cases=cases,
        deaths=deaths,
        mobility=mobility,
        demographics=demographics,
        mobility_names=tuple(f"m{k}" for k in range(mobility.shape[0])),
        demographic_names=tuple(f"z{l}" for l in range(demographics.shape[0])),
    )


def full_pattern(n):
    return SparsityPattern.from_entries(n, [(i, j) for i in range(n) for j in range(n)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
