import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import kernel_ref
from latentmap.kernel import KernelConfig, point_voxel_weight, sparse_kernel
from latentmap.voxel_grid import GridConfig, index_to_centroid

L05 = KernelConfig(0.5)
GRID = GridConfig(0.1, 3)


def test_kernel_examples():
    assert sparse_kernel(0.0, L05) == pytest.approx(1.0, abs=1e-15)
    assert sparse_kernel(0.5, L05) == 0.0
    # cos(pi) = -1, sin(pi) = 0 -> (2 - 0.5) / 3
    assert sparse_kernel(0.25, L05) == pytest.approx(0.5, abs=1e-15)


def test_kernel_rejects_negative():
    with pytest.raises(ValueError):
        sparse_kernel(-0.1, L05)


def test_kernel_config_validation():
    with pytest.raises(ValueError):
        KernelConfig(0.0)


def test_kernel_matches_reference_formula():
    d = np.linspace(0, 0.7, 1001)
    ref = np.array([kernel_ref(x, 0.5) for x in d])
    np.testing.assert_allclose(sparse_kernel(d, L05), ref, atol=1e-15)


def test_kernel_bounded_on_dense_grid():
    d = np.linspace(0, 0.5, 10_000)
    k = sparse_kernel(d, L05)
    assert np.all((k >= 0) & (k <= 1))
    # Default form bottoms out at 1/2 mid-support and jumps to zero at the edge.
    assert k[:-1].min() == pytest.approx(0.5, abs=1e-7)
    assert sparse_kernel(np.nextafter(0.5, 0), L05) == pytest.approx(2 / 3)


TAPER = KernelConfig(0.5, taper=True)


def test_tapered_kernel_monotone_and_bounded():
    d = np.linspace(0, 0.5, 10_000)
    k = sparse_kernel(d, TAPER)
    assert np.all((k >= 0) & (k <= 1))
    assert np.all(np.diff(k) <= 1e-15)
    assert sparse_kernel(0.0, TAPER) == pytest.approx(1.0, abs=1e-15)
    # (2 + cos(pi)) / 3 * 1/2 = 1/6
    assert sparse_kernel(0.25, TAPER) == pytest.approx(1 / 6, abs=1e-15)


def test_tapered_kernel_continuous_at_support_edge():
    assert sparse_kernel(np.nextafter(0.5, 0), TAPER) < 1e-12
    assert sparse_kernel(0.5, TAPER) == 0.0


@given(st.floats(0, 10, allow_nan=False), st.floats(0.01, 5))
def test_kernel_in_unit_interval(d, length):
    assert 0.0 <= sparse_kernel(d, KernelConfig(length)) <= 1.0


def test_point_voxel_weight_examples():
    v = (3, -1, 2)
    c = index_to_centroid(v, GRID)
    assert point_voxel_weight(c, v, GRID, L05) == pytest.approx(1.0)
    assert point_voxel_weight(c + [0.5, 0, 0], v, GRID, L05) == 0.0
    assert point_voxel_weight(c + [0.3, 0.4, 0], v, GRID, L05) == 0.0
    assert point_voxel_weight(c + [0.25, 0, 0], v, GRID, L05) == pytest.approx(0.5, abs=1e-12)
