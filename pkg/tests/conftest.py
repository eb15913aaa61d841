import numpy as np
import pytest

from cauchyfwi.geometry import Grid, build_partition


@pytest.fixture
def grid2d():
    # 200 m x 100 m at 10 m spacing
    return Grid((200.0, 100.0), (21, 11))


@pytest.fixture
def grid3d():
    return Grid((60.0, 40.0, 50.0), (7, 5, 6))


@pytest.fixture
def partition2d(grid2d):
    # 70 m caps with a 20 m water layer
    return build_partition(grid2d, (70.0, 70.0), water_depth=20.0)


def brute_force_tiling(extent, n_nodes, cap):
    """Independent recomputation of the per-axis tile layout, cell by cell."""
    h = extent / (n_nodes - 1)
    n_tiles = int(np.ceil(extent / cap - 1e-12))
    width = int(np.floor(cap / h + 1e-12))
    cell_tile = []
    for cell in range(n_nodes - 1):
        t = min(cell // width, n_tiles - 1)
        cell_tile.append(t)
    return cell_tile
