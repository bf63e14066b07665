"""Figure rendering for the CLI report paths.

Every figure lands next to the delimited report it illustrates. The Agg
backend is forced so rendering works headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(rows, path):
    """Loss curves, occupancy accuracy, and learning rate from metrics rows."""
    steps = np.array([int(r["step"]) for r in rows])
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    series = [("loss_total", "total"), ("loss_chamfer", "chamfer"),
              ("loss_count", "count"), ("loss_occ", "occupancy")]
    all_positive = True
    for key, label in series:
        vals = np.array([float(r[key]) for r in rows])
        if np.any(vals != 0.0):
            axes[0].plot(steps, vals, label=label, linewidth=1.0)
            all_positive = all_positive and bool(np.all(vals > 0))
    if all_positive:
        axes[0].set_yscale("log")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=8)
    axes[0].set_title("losses")

    acc = np.array([float(r["occ_accuracy"]) for r in rows])
    axes[1].plot(steps, acc, color="tab:green", linewidth=1.0)
    axes[1].set_ylim(0.0, 1.02)
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("occupancy accuracy")
    axes[1].set_title("occupancy accuracy")

    lr = np.array([float(r["lr"]) for r in rows])
    axes[2].plot(steps, lr, color="tab:orange", linewidth=1.0)
    axes[2].set_xlabel("step")
    axes[2].set_ylabel("learning rate")
    axes[2].set_title("schedule")

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_voxel_stats_figure(stats_rows, all_counts, path):
    """Per-scene occupancy plus the aggregate points-per-voxel histogram."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    idx = np.arange(len(stats_rows))
    occupied = np.array([int(r["occupied_voxels"]) for r in stats_rows])
    frac = np.array([float(r["empty_fraction"]) for r in stats_rows])
    axes[0].bar(idx, occupied, color="tab:blue")
    axes[0].set_xlabel("scene")
    axes[0].set_ylabel("occupied voxels")
    twin = axes[0].twinx()
    twin.plot(idx, frac, color="tab:red", linewidth=1.0)
    twin.set_ylim(0.0, 1.02)
    twin.set_ylabel("empty fraction", color="tab:red")
    axes[0].set_title("occupancy per scene")

    if all_counts.size:
        top = int(all_counts.max())
        axes[1].hist(all_counts, bins=np.arange(1, top + 2) - 0.5, color="tab:blue", log=True)
    axes[1].set_xlabel("points per voxel")
    axes[1].set_ylabel("voxels")
    axes[1].set_title("points-per-voxel histogram")

    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_reconstruction_figure(bundle, path):
    """Top-down scatter of masked input, reconstruction, and ground truth."""
    fig, axes = plt.subplots(1, 3, figsize=(14, 4.5), sharex=True, sharey=True)
    clouds = [(bundle.masked_input, "masked input"),
              (bundle.reconstruction, "reconstruction"),
              (bundle.truth, "ground truth")]
    for ax, (cloud, title) in zip(axes, clouds):
        xyz = cloud.xyz
        if len(cloud):
            ax.scatter(xyz[:, 0], xyz[:, 1], c=xyz[:, 2], s=1.0, cmap="viridis", linewidths=0)
        ax.set_title(f"{title} ({len(cloud)} pts)")
        ax.set_xlabel("x [m]")
        ax.set_aspect("equal")
    axes[0].set_ylabel("y [m]")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
