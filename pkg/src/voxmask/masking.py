"""Mask planning: hide a fraction of non-empty voxels, sample empty decoys.

Cardinalities are exact: floor(ratio * occupied) masked voxels and
floor(empty_fraction * empty cells) decoys, sampled uniformly without
replacement from the seeded stream. Plans are pure functions of
(voxelized cloud, ratio, empty_fraction, seed).
"""

from dataclasses import dataclass

import numpy as np

from . import seeds
from .voxelgrid import empty_flat_indices


@dataclass(frozen=True)
class MaskPlan:
    """Index triples ([K, 3] int64, ascending flat order) for each role."""

    visible: np.ndarray
    masked_nonempty: np.ndarray
    sampled_empty: np.ndarray
    ratio: float
    empty_fraction: float
    seed: int

    @property
    def n_visible(self):
        return int(self.visible.shape[0])

    @property
    def n_masked(self):
        return int(self.masked_nonempty.shape[0])

    @property
    def n_empty(self):
        return int(self.sampled_empty.shape[0])


def plan_mask(vc, ratio, empty_fraction, seed):
    """Split occupied cells into visible/masked and draw empty decoys."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    if not 0.0 <= empty_fraction <= 1.0:
        raise ValueError(f"empty_fraction must be in [0, 1], got {empty_fraction}")
    rng = seeds.rng_for(seed, seeds.TAG_MASK)
    v = vc.n_occupied
    n_masked = int(np.floor(ratio * v))
    picks = rng.choice(v, size=n_masked, replace=False) if n_masked else np.empty(0, dtype=np.int64)
    mask_flags = np.zeros(v, dtype=bool)
    mask_flags[picks] = True

    empties = empty_flat_indices(vc)
    n_empty = int(np.floor(empty_fraction * empties.size))
    epicks = rng.choice(empties.size, size=n_empty, replace=False) if n_empty else np.empty(0, dtype=np.int64)
    sampled = np.sort(empties[epicks])

    return MaskPlan(
        visible=vc.indices[~mask_flags],
        masked_nonempty=vc.indices[mask_flags],
        sampled_empty=vc.grid.unflatten_index(sampled) if sampled.size else np.empty((0, 3), dtype=np.int64),
        ratio=float(ratio),
        empty_fraction=float(empty_fraction),
        seed=int(seed),
    )


def plan_cap(plan, max_empty):
    """Truncate the decoy set to at most max_empty, uniformly at random."""
    if max_empty < 0:
        raise ValueError(f"max_empty must be >= 0, got {max_empty}")
    if plan.n_empty <= max_empty:
        return plan
    rng = seeds.rng_for(plan.seed, seeds.TAG_CAP)
    keep = np.sort(rng.choice(plan.n_empty, size=max_empty, replace=False))
    return MaskPlan(
        visible=plan.visible,
        masked_nonempty=plan.masked_nonempty,
        sampled_empty=plan.sampled_empty[keep],
        ratio=plan.ratio,
        empty_fraction=plan.empty_fraction,
        seed=plan.seed,
    )
