import numpy as np
import pytest
from hypothesis import settings

from prefcoal.genealogy import Genealogy, GridStats, build_grid, grid_stats
from prefcoal.simulate import simulate_dataset

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


def make_stats(widths, counts=None, m_prime=None, exposure=None, events=None):
    """GridStats built directly from per-cell numbers (for likelihood unit tests)."""
    widths = np.asarray(widths, dtype=float)
    M = len(widths)
    counts = np.zeros(M, int) if counts is None else np.asarray(counts)
    exposure = np.zeros(M) if exposure is None else np.asarray(exposure, dtype=float)
    events = np.zeros(M, int) if events is None else np.asarray(events)
    return GridStats(
        widths=widths,
        M_prime=M if m_prime is None else m_prime,
        coal_exposure=exposure,
        coal_events=events,
        samp_count=counts,
        event_cell=np.zeros(0, int),
        event_log_factor=np.zeros(0),
        event_exposure=np.zeros((0, M)),
    )


@pytest.fixture(scope="session")
def ce_pp_100():
    return simulate_dataset("CE-PP", 100, rng=3)


@pytest.fixture(scope="session")
def ce_pp_stats(ce_pp_100):
    g = ce_pp_100.genealogy
    grid = build_grid(g, 100)
    return g, grid, grid_stats(g, grid)


@pytest.fixture
def figure1():
    # multiplicities (1, 2, 2, 2) at sampling times 0, .1, .15, .5
    s = [0.0, 0.1, 0.1, 0.15, 0.15, 0.5, 0.5]
    t = [0.12, 0.3, 0.6, 0.7, 0.8, 0.9]
    return Genealogy.from_times(s, t, rng=0)
