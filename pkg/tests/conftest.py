import numpy as np
import pytest

from dualskin.camera import opposed_pair
from dualskin.fem import MaterialParams, assemble_stiffness
from dualskin.mesh import build_cylinder_mesh, default_mesh, place_markers
from dualskin.tactile import TactilePipeline

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mesh():
    return default_mesh()


@pytest.fixture(scope="session")
def material():
    return MaterialParams()


@pytest.fixture(scope="session")
def K(mesh, material):
    return assemble_stiffness(mesh, material)


@pytest.fixture(scope="session")
def cameras():
    return opposed_pair(300.0)


@pytest.fixture(scope="session")
def markers(mesh):
    return place_markers(mesh)


@pytest.fixture(scope="session")
def pipeline(mesh, markers, cameras):
    return TactilePipeline(mesh, markers, cameras)


@pytest.fixture(scope="session")
def small_mesh():
    # 8 x 6 x 2 grid: 96 nodes, 288 DOFs
    return build_cylinder_mesh(n_theta=8, n_axial=6, n_layers=2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
