"""Masked-voxel pretraining for sparse lidar point clouds on a numpy autodiff core."""

__version__ = "0.1.0"
