import os

# must happen before numpy initializes its BLAS thread pool
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from surftex import mesh as mesh_mod
from surftex import shapes


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def grid():
    return shapes.grid_mesh(6)


@pytest.fixture(scope="session")
def grid_frames(grid):
    return mesh_mod.compute_vertex_frames(grid)


@pytest.fixture(scope="session")
def bumpy():
    r = np.random.default_rng(77)
    return shapes.warp_heightfield(shapes.delaunay_sheet(150, r), r, amplitude=0.1)


@pytest.fixture(scope="session")
def bumpy_frames(bumpy):
    return mesh_mod.compute_vertex_frames(bumpy)


@pytest.fixture(scope="session")
def sphere():
    return shapes.icosphere(2)
