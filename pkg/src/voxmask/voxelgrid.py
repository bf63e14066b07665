"""Fixed-grid dynamic voxelization with no per-voxel point cap.

Cells are half-open boxes indexed by floor((p - range_min) / voxel_size), so
in-range points partition losslessly: nothing is discarded or duplicated.
The default grid is 0.5 x 0.5 x 8 m pillars over x, y in [-50, 50) and
z in [-3, 5), shape (200, 200, 1).
"""

from dataclasses import dataclass, field

import numpy as np

from .pointcloud import PointCloud


@dataclass(frozen=True)
class GridConfig:
    voxel_size: tuple = (0.5, 0.5, 8.0)
    range_min: tuple = (-50.0, -50.0, -3.0)
    range_max: tuple = (50.0, 50.0, 5.0)
    grid_shape: tuple = field(init=False)

    def __post_init__(self):
        vs = np.asarray(self.voxel_size, dtype=np.float64)
        lo = np.asarray(self.range_min, dtype=np.float64)
        hi = np.asarray(self.range_max, dtype=np.float64)
        if vs.shape != (3,) or lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("voxel_size, range_min, range_max must be 3-vectors")
        if not np.all(vs > 0) or not np.all(lo < hi):
            raise ValueError(f"invalid grid: voxel_size {vs.tolist()}, range {lo.tolist()}..{hi.tolist()}")
        shape = np.rint((hi - lo) / vs).astype(np.int64)
        if np.any(np.abs(shape * vs - (hi - lo)) > 1e-9):
            raise ValueError(f"grid ranges {lo.tolist()}..{hi.tolist()} are not an integer multiple of voxel_size {vs.tolist()}")
        object.__setattr__(self, "grid_shape", tuple(int(s) for s in shape))

    @property
    def n_cells(self):
        gx, gy, gz = self.grid_shape
        return gx * gy * gz

    def flatten_index(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return np.ravel_multi_index((idx[..., 0], idx[..., 1], idx[..., 2]), self.grid_shape)

    def unflatten_index(self, flat):
        flat = np.asarray(flat, dtype=np.int64)
        triples = np.unravel_index(flat, self.grid_shape)
        return np.stack(triples, axis=-1)


def voxel_index(p, grid):
    """Index triple of a point, or None when out of range."""
    p = np.asarray(p, dtype=np.float64)
    lo = np.asarray(grid.range_min)
    hi = np.asarray(grid.range_max)
    if np.any(p < lo) or np.any(p >= hi):
        return None
    idx = np.floor((p - lo) / np.asarray(grid.voxel_size)).astype(np.int64)
    # guard against float round-up at the top edge
    idx = np.minimum(idx, np.asarray(grid.grid_shape) - 1)
    return tuple(int(i) for i in idx)


def voxel_center(index, grid):
    """Metric center of a cell: range_min + (index + 0.5) * voxel_size."""
    idx = np.asarray(index, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= np.asarray(grid.grid_shape)):
        raise ValueError(f"voxel index {tuple(idx.tolist())} outside grid shape {grid.grid_shape}")
    center = np.asarray(grid.range_min) + (idx + 0.5) * np.asarray(grid.voxel_size)
    return center.astype(np.float32)


def voxel_centers(indices, grid):
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    center = np.asarray(grid.range_min) + (idx + 0.5) * np.asarray(grid.voxel_size)
    return center.astype(np.float32)


class VoxelizedCloud:
    """In-range points grouped by cell.

    Storage is flat and contiguous: `xyz`/`intensity` hold the points grouped
    by voxel, `indices` the [V, 3] cell triples in ascending flat order, and
    `starts` the per-voxel offsets, so `xyz[starts[i]:starts[i]+counts[i]]`
    are voxel i's points in their original input order.
    """

    def __init__(self, grid, indices, starts, counts, xyz, intensity, out_of_range):
        self.grid = grid
        self.indices = indices
        self.starts = starts
        self.counts = counts
        self.xyz = xyz
        self.intensity = intensity
        self.out_of_range = int(out_of_range)
        self._flat = grid.flatten_index(indices) if len(indices) else np.empty(0, dtype=np.int64)

    @property
    def n_occupied(self):
        return int(self.indices.shape[0])

    @property
    def n_points(self):
        return int(self.xyz.shape[0])

    @property
    def flat_indices(self):
        return self._flat

    def points_of(self, i):
        s = self.starts[i]
        return self.xyz[s : s + self.counts[i]]

    def occupied_map(self):
        return {tuple(self.indices[i]): self.points_of(i) for i in range(self.n_occupied)}

    def positions_of_flat(self, flat):
        """Row positions (into `indices`) of occupied cells given by flat id."""
        pos = np.searchsorted(self._flat, flat)
        if np.any(pos >= self._flat.size) or np.any(self._flat[np.minimum(pos, self._flat.size - 1)] != flat):
            raise KeyError("flat index not occupied")
        return pos

    def __repr__(self):
        return f"VoxelizedCloud(V={self.n_occupied}, points={self.n_points}, dropped={self.out_of_range})"


def voxelize(cloud, grid):
    """Partition in-range points into voxels; out-of-range points are counted, not kept."""
    xyz = cloud.xyz
    lo = np.asarray(grid.range_min, dtype=np.float32)
    hi = np.asarray(grid.range_max, dtype=np.float32)
    in_range = np.all((xyz >= lo) & (xyz < hi), axis=1)
    kept = xyz[in_range]
    vs = np.asarray(grid.voxel_size, dtype=np.float64)
    idx = np.floor((kept.astype(np.float64) - lo.astype(np.float64)) / vs).astype(np.int64)
    idx = np.minimum(idx, np.asarray(grid.grid_shape) - 1)
    flat = grid.flatten_index(idx) if len(idx) else np.empty(0, dtype=np.int64)
    order = np.argsort(flat, kind="stable")  # groups cells, keeps input order inside each
    flat_sorted = flat[order]
    uniq, starts, counts = np.unique(flat_sorted, return_index=True, return_counts=True)
    intensity = cloud.intensity[in_range][order] if cloud.has_intensity else None
    return VoxelizedCloud(
        grid=grid,
        indices=grid.unflatten_index(uniq) if uniq.size else np.empty((0, 3), dtype=np.int64),
        starts=starts.astype(np.int64),
        counts=counts.astype(np.int64),
        xyz=kept[order],
        intensity=intensity,
        out_of_range=int((~in_range).sum()),
    )


def empty_flat_indices(vc):
    """Sorted flat ids of every grid cell with no points; len() is the count."""
    all_cells = np.arange(vc.grid.n_cells, dtype=np.int64)
    return np.setdiff1d(all_cells, vc.flat_indices, assume_unique=True)


def count_histogram(vc):
    """Pairs (points_per_voxel, voxel_count), ascending."""
    values, freq = np.unique(vc.counts, return_counts=True)
    return list(zip(values.tolist(), freq.tolist()))
