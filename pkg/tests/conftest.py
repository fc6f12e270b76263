import math

import pytest

from stabnav.instability import OracleModel
from stabnav.terrain import TerrainSpec, generate_terrain
from stabnav.traversability import build_traversability_map
from stabnav.simulator import EpisodeConfig, prepare_world
from stabnav.worlds import band_gap_world


def normal_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def bisect_quantile(p, lo=-10.0, hi=10.0):
    """Standard normal quantile by bisection on the erf-based CDF."""
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@pytest.fixture(scope="session")
def flat_travmap():
    emap = generate_terrain(TerrainSpec("flat", extent=(10.0, 10.0)))
    return build_traversability_map(emap, OracleModel(), stride=3)


@pytest.fixture(scope="session")
def band_gap():
    w = band_gap_world()
    prepared = prepare_world(EpisodeConfig(w.terrain, w.start, w.goal))
    return w, prepared


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
