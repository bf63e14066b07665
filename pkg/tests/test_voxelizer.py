"""Voxelization tests: the partition property is checked exhaustively."""

import numpy as np
import pytest

from voxmask.pointcloud import PointCloud, SceneSpec, generate_scene
from voxmask.voxelgrid import (
    GridConfig,
    count_histogram,
    empty_flat_indices,
    voxel_center,
    voxel_index,
    voxelize,
)


def default_grid():
    return GridConfig()


def test_default_grid_shape():
    grid = default_grid()
    assert grid.grid_shape == (200, 200, 1)
    assert grid.n_cells == 40000


def test_grid_rejects_non_integral_extent():
    with pytest.raises(ValueError, match="integer multiple"):
        GridConfig(voxel_size=(0.3, 0.5, 8.0))


def test_voxel_index_direct():
    grid = default_grid()
    assert voxel_index((0.1, 0.2, 0.0), grid) == (100, 100, 0)


def test_voxel_index_lower_corner():
    assert voxel_index((-50.0, -50.0, -3.0), default_grid()) == (0, 0, 0)


def test_voxel_index_upper_bound_out_of_range():
    assert voxel_index((50.0, 0.0, 0.0), default_grid()) is None


def test_voxel_center_corners():
    grid = default_grid()
    np.testing.assert_allclose(voxel_center((0, 0, 0), grid), [-49.75, -49.75, 1.0])
    np.testing.assert_allclose(voxel_center((199, 199, 0), grid), [49.75, 49.75, 1.0])


def test_voxel_center_rejects_outside():
    with pytest.raises(ValueError, match="outside grid"):
        voxel_center((200, 0, 0), default_grid())


def test_center_within_half_voxel_of_point():
    grid = default_grid()
    rng = np.random.default_rng(0)
    pts = rng.uniform([-50, -50, -3], [50, 50, 5], size=(500, 3))
    half = np.array(grid.voxel_size) / 2.0
    for p in pts:
        idx = voxel_index(p, grid)
        assert idx is not None
        c = voxel_center(idx, grid)
        assert np.all(np.abs(p - c) <= half + 1e-6)


def test_voxelize_empty_cloud():
    vc = voxelize(PointCloud(np.empty((0, 3))), default_grid())
    assert vc.n_occupied == 0
    assert vc.out_of_range == 0
    assert len(empty_flat_indices(vc)) == 40000


def test_voxelize_single_cell_keeps_order():
    pts = np.array([[0.1, 0.1, 0.0], [0.2, 0.2, 0.1], [0.3, 0.3, -0.1]], dtype=np.float32)
    vc = voxelize(PointCloud(pts), default_grid())
    assert vc.n_occupied == 1
    np.testing.assert_array_equal(vc.points_of(0), pts)


def test_voxelize_partition_oracle():
    # every in-range point lands in exactly one voxel and re-indexes to it
    grid = default_grid()
    rng = np.random.default_rng(1)
    pts = rng.uniform([-60, -60, -4], [60, 60, 6], size=(10000, 3)).astype(np.float32)
    cloud = PointCloud(pts, rng.random(10000))
    vc = voxelize(cloud, grid)
    lo = np.array(grid.range_min, dtype=np.float32)
    hi = np.array(grid.range_max, dtype=np.float32)
    n_in = int(np.all((pts >= lo) & (pts < hi), axis=1).sum())
    assert vc.n_points == n_in
    assert int(vc.counts.sum()) == n_in
    assert vc.out_of_range == 10000 - n_in
    for i in range(vc.n_occupied):
        expect = tuple(vc.indices[i])
        for p in vc.points_of(i):
            assert voxel_index(p, grid) == expect


def test_voxelize_permutation_equivariant():
    rng = np.random.default_rng(2)
    cloud = generate_scene(SceneSpec(seed=5))
    vc1 = voxelize(cloud, default_grid())
    perm = rng.permutation(len(cloud))
    vc2 = voxelize(PointCloud(cloud.xyz[perm], cloud.intensity[perm]), default_grid())
    np.testing.assert_array_equal(vc1.indices, vc2.indices)
    np.testing.assert_array_equal(vc1.counts, vc2.counts)
    for i in range(vc1.n_occupied):
        a = np.sort(vc1.points_of(i), axis=0)
        b = np.sort(vc2.points_of(i), axis=0)
        np.testing.assert_array_equal(a, b)


def test_empty_indices_enumeration():
    grid = default_grid()
    cloud = PointCloud(np.array([[0.1, 0.1, 0.0]], dtype=np.float32))
    vc = voxelize(cloud, grid)
    empties = empty_flat_indices(vc)
    assert len(empties) == 39999
    combined = np.union1d(empties, vc.flat_indices)
    np.testing.assert_array_equal(combined, np.arange(40000))
    assert np.intersect1d(empties, vc.flat_indices).size == 0


def test_count_histogram_sums_to_points():
    cloud = generate_scene(SceneSpec(seed=9))
    vc = voxelize(cloud, default_grid())
    hist = count_histogram(vc)
    assert sum(n * c for n, c in hist) == vc.n_points
    assert sum(c for _, c in hist) == vc.n_occupied


def test_points_within_voxel_bounds():
    grid = default_grid()
    vc = voxelize(generate_scene(SceneSpec(seed=4)), grid)
    vs = np.array(grid.voxel_size, dtype=np.float64)
    lo = np.array(grid.range_min, dtype=np.float64)
    for i in range(vc.n_occupied):
        cell_lo = lo + vc.indices[i] * vs
        pts = vc.points_of(i).astype(np.float64)
        assert np.all(pts >= cell_lo - 1e-6)
        assert np.all(pts < cell_lo + vs + 1e-6)
