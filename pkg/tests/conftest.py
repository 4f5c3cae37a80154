import numpy as np
import pytest

from memorybeam.generator import BeamParams, build_beam_generator
from memorybeam.memory import ExpKernel
from memorybeam.solver import ProblemSpec, linear_beam_forcing
from memorybeam.state_space import BeamState, Grid, compatible_eta, scale

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    entry = item.config.stash[_RESULTS].setdefault(
        number, {"title": title, "passed": True, "details": []})
    entry["passed"] &= rep.passed
    entry["details"] += [str(v) for k, v in rep.user_properties
                         if k == "detail"]


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(results):
        entry = results[number]
        verdict = "PASS" if entry["passed"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(
            f"criterion {number} [{entry['title']}]: {verdict}"
            + (f" ({detail})" if detail else ""))


# ---------------------------------------------------------------------------
# The certified linear example: g = -0.3^2 p1 - 0.05 p2, T = 0.2, n = 16.


@pytest.fixture(scope="session")
def grid():
    return Grid(16)


@pytest.fixture(scope="session")
def params():
    return BeamParams(1.0, 1.0, 1.0)


@pytest.fixture(scope="session")
def beam_gen(grid, params):
    return build_beam_generator(grid, params)


@pytest.fixture(scope="session")
def smooth_state(grid, params, beam_gen):
    """(3x^2 - x^3)/2 deflection at rest, scaled to unit energy norm."""
    x = grid.nodes
    p = (3 * x ** 2 - x ** 3) / 2
    q = np.zeros_like(p)
    s = BeamState(p, q, compatible_eta(p, q, grid, params.m, params.beta))
    return scale(1.0 / beam_gen.norm(s.flatten()), s)


@pytest.fixture(scope="session")
def linear_spec(grid, beam_gen, smooth_state):
    return ProblemSpec(beam_gen, linear_beam_forcing(grid, 0.3, 0.05),
                       ExpKernel(0.2), 0.0, smooth_state)
