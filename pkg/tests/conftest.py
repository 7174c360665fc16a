import sys
import time
from pathlib import Path

import pytest

from laserrelay import ao, cccp, pdd
from laserrelay.evaluation import check_feasibility
from laserrelay.scenario import Scenario

sys.path.insert(0, str(Path(__file__).parent))


class _Runs(dict):
    """Lazily solved nominal-scenario runs keyed by gamma, with wall times."""

    def __init__(self, solve):
        super().__init__()
        self.solve = solve
        self.seconds = {}

    def __missing__(self, gamma):
        t0 = time.perf_counter()
        self[gamma] = self.solve(Scenario(gamma_weight=gamma))
        self.seconds[gamma] = time.perf_counter() - t0
        return self[gamma]


class _CccpRuns(_Runs):
    """Also keeps, per gamma, whether every iterate passed the feasibility check."""

    def __init__(self):
        super().__init__(None)
        self.iterates_feasible = {}

    def __missing__(self, gamma):
        flags = []

        def solve(sc):
            return cccp.solve(sc, callback=lambda st: flags.append(
                check_feasibility(st.trajectory, st.powers, sc).feasible))

        self.solve = solve
        out = super().__missing__(gamma)
        self.iterates_feasible[gamma] = flags
        return out


@pytest.fixture(scope="session")
def cccp_nominal():
    return _CccpRuns()


@pytest.fixture(scope="session")
def pdd_nominal():
    return _Runs(pdd.solve)


@pytest.fixture(scope="session")
def ao_nominal():
    return _Runs(ao.solve)


@pytest.fixture(scope="session")
def pdd_suite():
    """Worst errors of the brute-force block oracles over 100 random small states."""
    import pdd_oracles

    return pdd_oracles.suite(pdd_oracles.make_cases(100))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
