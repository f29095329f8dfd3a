import numpy as np
import pytest

from eegoc.mesh import build_shell_mesh
from eegoc.pipeline import build_lead_field_oracle, shell_experiment


@pytest.fixture(scope="session")
def shell0():
    return build_shell_mesh(0.7, 1.0, 0)


@pytest.fixture(scope="session")
def shell1():
    return build_shell_mesh(0.7, 1.0, 1)


@pytest.fixture(scope="session")
def experiment0():
    return shell_experiment(0)


@pytest.fixture(scope="session")
def oracle0(experiment0):
    return build_lead_field_oracle(None, None, None, blocks=experiment0.blocks)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def unit_tet_mesh():
    from eegoc.mesh import BoundaryTag, TetMesh

    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    faces = [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]
    tags = [BoundaryTag.CORTEX, BoundaryTag.SCALP, BoundaryTag.SCALP, BoundaryTag.SCALP]
    return TetMesh(v, [[0, 1, 2, 3]], [1], faces, tags)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Criterion number -> list of (check, ok, detail); printed at the end of the run."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    report = config.stash.get(ACCEPTANCE_KEY, None)
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(report):
        checks = report[number]
        ok = all(c[1] for c in checks)
        detail = "; ".join(f"{name}: {'ok' if good else 'FAILED'} ({info})" for name, good, info in checks)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
