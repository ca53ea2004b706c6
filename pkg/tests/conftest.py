import numpy as np
import pytest

from qstruct.gridstate import Grid1D


def pytest_configure(config):
    np.seterr(over="raise", invalid="raise")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_grids():
    return (Grid1D(-8.0, 8.0, 64), Grid1D(-8.0, 8.0, 64))


def well_conditioned(rng, n=2, max_cond=50.0, scale=2.0):
    """Random square matrix with bounded condition number."""
    while True:
        a = rng.uniform(-scale, scale, size=(n, n))
        if np.linalg.cond(a) < max_cond:
            return a


def symplectic_form(n):
    return np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])


def phase_space_matrix(m):
    """Jacobian of (q, p) -> (A q, B p) for a structure map."""
    n = m.dim
    z = np.zeros((n, n))
    return np.block([[m.coord_matrix, z], [z, m.momentum_matrix]])


# --- shipped scenario runs, shared across modules ---------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class ScenarioRun:
    """Outcome of one CLI invocation: exit code, wall time and output directory."""

    def __init__(self, name, conf, out, extra=()):
        import time

        from qstruct import cli
        from qstruct.config import shipped_config_path

        start = time.perf_counter()
        self.code = cli.main([name, "--config", str(shipped_config_path(conf)), "--output", str(out), *extra])
        self.seconds = time.perf_counter() - start
        self.out = out

    def json(self, name="summary.json"):
        import json

        return json.loads((self.out / name).read_text())


@pytest.fixture(scope="session")
def sg_run(tmp_path_factory):
    return ScenarioRun("sg-run", "sg.conf", tmp_path_factory.mktemp("sg"))


@pytest.fixture(scope="session")
def bohm_runs(tmp_path_factory):
    return [ScenarioRun("bohm-run", "bohm.conf", tmp_path_factory.mktemp(f"bohm{i}")) for i in range(2)]


@pytest.fixture(scope="session")
def classical_run(tmp_path_factory):
    return ScenarioRun("classical-sweep", "classical.conf", tmp_path_factory.mktemp("classical"))
