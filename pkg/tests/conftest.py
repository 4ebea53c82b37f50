import numpy as np
import pytest

from remfl import data as dat


@pytest.fixture(scope="session")
def small_grid():
    cfg = dat.SyntheticMapConfig(seed=7, width=32, height=32, n_bs=4,
                                 n_features=8)
    return dat.generate_synthetic_map(cfg)


@pytest.fixture(scope="session")
def small_field(small_grid):
    return dat.heterogeneity(small_grid)


@pytest.fixture(scope="session")
def small_partition(small_grid, small_field):
    return dat.grid_partition(small_grid, small_field, "heavy",
                              rows=2, cols=2, seed=1)


@pytest.fixture(scope="session")
def desk_grid():
    """64x64 map with the full default M=4 / P=100 shape (desk preset)."""
    cfg = dat.SyntheticMapConfig(seed=11, width=64, height=64, n_bs=4,
                                 n_features=100)
    return dat.generate_synthetic_map(cfg)


@pytest.fixture(scope="session")
def desk_field(desk_grid):
    return dat.heterogeneity(desk_grid)


@pytest.fixture(scope="session")
def desk_heavy_partition(desk_grid, desk_field):
    return dat.grid_partition(desk_grid, desk_field, "heavy",
                              rows=3, cols=4, seed=11)
