import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latentmap.voxel_grid import (
    INDEX_MAX,
    INDEX_MIN,
    GridConfig,
    VoxelIndex,
    index_to_centroid,
    neighbors,
    pack_indices,
    unpack_keys,
    world_to_index,
)

R01 = GridConfig(0.1, 3)


@pytest.mark.parametrize(
    "p, expected",
    [
        ((0, 0, 0), (0, 0, 0)),
        ((-0.05, 0.19, 0.3), (-1, 1, 3)),
        ((0.1, 0.1, 0.1), (1, 1, 1)),
    ],
)
def test_world_to_index_examples(p, expected):
    assert world_to_index(p, R01) == VoxelIndex(*expected)


@pytest.mark.parametrize("bad", [(np.nan, 0, 0), (0, np.inf, 0), (0, 0, -np.inf)])
def test_world_to_index_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        world_to_index(bad, R01)


@pytest.mark.parametrize(
    "v, r, expected",
    [
        ((0, 0, 0), 0.1, (0.05, 0.05, 0.05)),
        ((-1, 1, 3), 0.1, (-0.05, 0.15, 0.35)),
        ((2, 2, 2), 0.05, (0.125, 0.125, 0.125)),
    ],
)
def test_index_to_centroid_examples(v, r, expected):
    np.testing.assert_allclose(index_to_centroid(v, GridConfig(r, 1)), expected, atol=1e-15)


@pytest.mark.parametrize("k, count", [(1, 1), (3, 27), (5, 125)])
def test_neighbor_counts(k, count):
    v = VoxelIndex(4, -2, 7)
    nb = neighbors(v, GridConfig(0.1, k))
    assert len(nb) == count
    assert v in nb
    assert nb == sorted(nb)
    assert len(set(nb)) == count


def test_neighbors_k1_is_self():
    assert neighbors((1, 2, 3), GridConfig(0.1, 1)) == [VoxelIndex(1, 2, 3)]


@pytest.mark.parametrize("bad", [dict(resolution=0), dict(resolution=-1), dict(filter_size=2), dict(filter_size=0)])
def test_grid_config_validation(bad):
    with pytest.raises(ValueError):
        GridConfig(**{"resolution": 0.1, "filter_size": 3, **bad})


idx_st = st.integers(min_value=-50000, max_value=50000)
res_st = st.sampled_from([0.05, 0.1, 0.2, 0.25, 1.0, 0.3])


@given(idx_st, idx_st, idx_st, res_st)
def test_centroid_round_trip(i, j, k, r):
    cfg = GridConfig(r, 1)
    assert world_to_index(index_to_centroid((i, j, k), cfg), cfg) == (i, j, k)


@given(st.tuples(*[st.floats(-1e3, 1e3, allow_nan=False)] * 3), res_st)
def test_point_lies_in_its_cell(p, r):
    cfg = GridConfig(r, 1)
    v = np.array(world_to_index(p, cfg), dtype=float)
    lo = v * r
    hi = (v + 1) * r
    # Half-open cell up to the face-snapping tolerance.
    tol = 1e-9 * np.maximum(1.0, np.abs(np.asarray(p)) / r) * r
    assert np.all(np.asarray(p) >= lo - tol) and np.all(np.asarray(p) < hi + tol)


@given(st.tuples(idx_st, idx_st, idx_st), st.tuples(*[st.integers(-2, 2)] * 3))
def test_neighbor_symmetry(v, off):
    cfg = GridConfig(0.1, 5)
    u = tuple(a + b for a, b in zip(v, off))
    assert (u in neighbors(v, cfg)) == (v in neighbors(u, cfg))


@given(st.lists(st.tuples(*[st.integers(INDEX_MIN, INDEX_MAX)] * 3), min_size=1, max_size=20))
def test_pack_round_trip(idx):
    arr = np.array(idx, dtype=np.int64)
    keys = pack_indices(arr)
    np.testing.assert_array_equal(unpack_keys(keys), arr)
    assert len(set(keys.tolist())) == len(set(idx))


def test_pack_out_of_range():
    with pytest.raises(ValueError):
        pack_indices(np.array([[INDEX_MAX + 1, 0, 0]]))
