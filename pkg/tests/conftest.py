import numpy as np
import pytest

from polycast.core import ChannelRegistry, TimeSeriesFrame
from polycast.synthworld import WorldParams, write_world

REGISTRY = ChannelRegistry()
T0 = np.datetime64("2023-05-01T00:00:00", "s")  # a Monday


def make_frame(columns, resolution="hourly", start=T0, site="Multispan", season=2023):
    """Frame from ``{acronym: values}`` using the default registry specs."""
    step = {"20min": 1200, "hourly": 3600, "daily": 86400, "weekly": 604800}[resolution]
    names = list(columns)
    n = len(columns[names[0]])
    ts = start + np.arange(n) * np.timedelta64(step, "s")
    vals = np.column_stack([np.asarray(columns[c], dtype=float) for c in names])
    return TimeSeriesFrame(site, season, resolution, ts, [REGISTRY[c] for c in names], vals)


def small_world_params(**kw):
    kw.setdefault("season_days", 28)
    kw.setdefault("wu_outage", ("Multispan", 2024, 12, 2))
    return WorldParams(**kw)


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    """A 28-day noiseless world on disk; returns its directory."""
    root = tmp_path_factory.mktemp("world28")
    write_world(small_world_params(), root)
    return root


# one "criterion N ... PASS/FAIL" line per acceptance check, echoed at the end
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
