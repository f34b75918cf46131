import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to sys.path
sys.path.insert(0, str(Path(__file__).parent.parent))

from geometry_core import ChamberSpec
from part_library import box_mesh, cube_mesh
from print_oracle import WarpSpec
from remesh import IsoGraph, remesh


def pytest_addoption(parser):
    """Add a command line option to pytest to run the long acceptance runs."""
    parser.addoption(
        "--run-slow", action="store_true", default=False, help="Run tests marked slow (training runs)"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def chamber() -> ChamberSpec:
    return ChamberSpec()


@pytest.fixture
def noiseless_warp(chamber) -> WarpSpec:
    return WarpSpec(noise=0.0, chamber=chamber)


@pytest.fixture
def box_graph(chamber) -> IsoGraph:
    """The 8-corner box at the chamber centre as a graph (cheap gradient checks)."""
    box = box_mesh((20.0, 12.0, 8.0), center=chamber.center)
    return IsoGraph.from_faces(box.vertices, box.faces)


@pytest.fixture
def cube_shell_graph(chamber) -> IsoGraph:
    """20 mm cube remeshed at 5 mm: a 98-voxel hollow shell."""
    return remesh(cube_mesh(20.0, center=chamber.center), voxel_size=5.0, seed=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
