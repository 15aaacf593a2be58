import numpy as np
import pytest

from morleyfem import bench, mesh as meshmod


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)

@pytest.fixture
def square():
    return meshmod.unit_square_mesh()


@pytest.fixture
def square_fine(square):
    return square.uniform_refine().uniform_refine()


@pytest.fixture
def lshape():
    return bench.lshape_mesh()


@pytest.fixture
def smooth_problem():
    return bench.problem_square_smooth()


@pytest.fixture
def lshape_problem():
    return bench.problem_lshape()


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("refcache")
