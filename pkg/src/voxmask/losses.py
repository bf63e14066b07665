"""Reconstruction objectives: per-voxel Chamfer, point count, occupancy.

All three carry hand-derived backward passes through the autodiff tape.
Chamfer is the bidirectional mean of squared nearest-neighbor distances in
the voxel-local normalized frame; nearest-neighbor ties break to the lowest
index and route the gradient to that pair only.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class LossWeights:
    alpha_c: float = 1.0
    alpha_np: float = 0.1
    alpha_occ: float = 1.0

    def __post_init__(self):
        vals = (self.alpha_c, self.alpha_np, self.alpha_occ)
        if any(a < 0 for a in vals):
            raise ValueError(f"loss weights must be non-negative, got {vals}")
        if all(a == 0 for a in vals):
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class LossToggles:
    chamfer: bool = True
    count: bool = True
    occupancy: bool = True

    @property
    def any_enabled(self):
        return self.chamfer or self.count or self.occupancy


@dataclass
class LossReport:
    chamfer: float
    count: float
    occupancy: float
    total: float
    enabled: LossToggles
    tensor: ad.Tensor = field(repr=False, default=None)


def chamfer_many(pred, gt, gt_counts):
    """Per-voxel bidirectional squared Chamfer: [V] from pred [V, n, 3] vs padded gt.

    gt is [V, m, 3] with gt_counts[v] >= 1 valid rows per voxel; padding rows
    are ignored. Differentiable w.r.t. pred only (gt is data).
    """
    p = pred.data
    v, n, _ = p.shape
    g = np.asarray(gt, dtype=p.dtype)
    counts = np.asarray(gt_counts, dtype=np.int64)
    if g.shape[0] != v or g.ndim != 3 or g.shape[2] != 3:
        raise ValueError(f"gt shape {g.shape} incompatible with pred {p.shape}")
    if counts.shape != (v,) or (v and counts.min() < 1):
        raise ValueError("every voxel needs at least one ground-truth point")
    if v and counts.max() > g.shape[1]:
        raise ValueError("gt_counts exceed the padded gt size")
    m = g.shape[1]
    diff = p[:, :, None, :] - g[:, None, :, :]  # [V, n, m, 3]
    d2 = np.einsum("vnmk,vnmk->vnm", diff, diff)
    valid = np.arange(m)[None, :] < counts[:, None]  # [V, m]
    d2_masked = np.where(valid[:, None, :], d2, np.inf)
    nearest_gt = d2_masked.argmin(axis=2)  # [V, n], ties -> lowest index
    rows = np.arange(v)[:, None]
    term_pred = np.take_along_axis(d2_masked, nearest_gt[:, :, None], axis=2)[:, :, 0].mean(axis=1)
    nearest_pred = d2.argmin(axis=1)  # [V, m]
    d_gt = np.take_along_axis(d2, nearest_pred[:, None, :], axis=1)[:, 0, :]
    term_gt = np.where(valid, d_gt, 0.0).sum(axis=1) / counts
    out = (term_pred + term_gt).astype(p.dtype)

    def grad_fn(go):
        dp = np.zeros_like(p)
        ga = g[rows, nearest_gt]  # [V, n, 3]
        dp += go[:, None, None] * (2.0 / n) * (p - ga)
        vv, jj = np.nonzero(valid)
        bb = nearest_pred[vv, jj]
        contrib = (go[vv] * 2.0 / counts[vv])[:, None] * (p[vv, bb] - g[vv, jj])
        np.add.at(dp, (vv, bb), contrib)
        return (dp,)

    return ad.make_op(out, (pred,), grad_fn)


def chamfer_voxel(pred, gt):
    """Scalar Chamfer for one voxel: pred [n, 3] vs gt [k, 3]."""
    if not isinstance(pred, ad.Tensor):
        pred = ad.Tensor(np.asarray(pred, dtype=np.float64))
    n = pred.data.shape[0]
    gt = np.asarray(gt, dtype=pred.dtype).reshape(-1, 3)
    if n == 0:
        raise ValueError("chamfer_voxel: empty prediction set")
    if gt.shape[0] == 0:
        raise ValueError("chamfer_voxel: empty ground-truth set (only non-empty voxels are supervised)")
    per = chamfer_many(ad.reshape(pred, (1, n, 3)), gt[None], np.array([gt.shape[0]]))
    return ad.sum_all(per)


def subsample_gt(points, cap, rng):
    """At most cap rows, uniform without replacement, original order kept."""
    k = points.shape[0]
    if k <= cap:
        return points
    keep = np.sort(rng.choice(k, size=cap, replace=False))
    return points[keep]


def chamfer_total(pred, gt, gt_counts, aggregate="sum"):
    """Aggregate per-voxel Chamfer over the masked voxels: sum (default) or mean."""
    if aggregate not in ("sum", "mean"):
        raise ValueError(f"aggregate must be sum or mean, got {aggregate!r}")
    if pred.data.shape[0] == 0:
        return ad.Tensor(np.zeros((), dtype=pred.dtype))
    per = chamfer_many(pred, gt, gt_counts)
    return ad.sum_all(per) if aggregate == "sum" else ad.mean_all(per)


def count_loss(n_hat, n_true):
    """Smooth-L1 between predicted and true per-voxel point counts, averaged.

    Quadratic inside |error| < 1, linear minus 0.5 outside.
    """
    if not isinstance(n_hat, ad.Tensor):
        n_hat = ad.Tensor(np.asarray(n_hat, dtype=np.float64))
    x = n_hat.data.reshape(-1)
    if x.size == 0:
        raise ValueError("count_loss: no masked voxels")
    n = np.asarray(n_true, dtype=x.dtype).reshape(-1)
    if n.shape != x.shape:
        raise ValueError(f"count shapes differ: {x.shape} vs {n.shape}")
    if n.min() < 1:
        raise ValueError("true counts must be >= 1")
    delta = n - x
    quad = np.abs(delta) < 1.0
    per = np.where(quad, 0.5 * delta * delta, np.abs(delta) - 0.5)
    out = per.mean().astype(x.dtype)

    def grad_fn(go):
        dper = np.where(quad, -delta, -np.sign(delta))
        return ((go * dper / x.size).reshape(n_hat.data.shape),)

    return ad.make_op(out, (n_hat,), grad_fn)


def occupancy_loss(logits, labels):
    """Mean binary cross-entropy from logits, in overflow-safe form."""
    if not isinstance(logits, ad.Tensor):
        logits = ad.Tensor(np.asarray(logits, dtype=np.float64))
    x = logits.data.reshape(-1)
    if x.size == 0:
        raise ValueError("occupancy_loss: no labeled tokens")
    y = np.asarray(labels, dtype=x.dtype).reshape(-1)
    if y.shape != x.shape:
        raise ValueError(f"occupancy shapes differ: {x.shape} vs {y.shape}")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    # softplus(x) - x*y = max(x,0) - x*y + log1p(exp(-|x|))
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = per.mean().astype(x.dtype)

    def grad_fn(go):
        sigma = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        return ((go * (sigma - y) / x.size).reshape(logits.data.shape),)

    return ad.make_op(out, (logits,), grad_fn)


def total_loss(chamfer, count, occupancy, weights, toggles):
    """Alpha-weighted sum of the enabled terms; disabled terms carry no gradient."""
    if not toggles.any_enabled:
        raise ValueError("all loss terms disabled; enable at least one")
    parts = []
    values = {}
    for name, term, alpha, on in (
        ("chamfer", chamfer, weights.alpha_c, toggles.chamfer),
        ("count", count, weights.alpha_np, toggles.count),
        ("occupancy", occupancy, weights.alpha_occ, toggles.occupancy),
    ):
        if not on:
            values[name] = 0.0
            continue
        if term is None:
            raise ValueError(f"{name} loss enabled but no term supplied")
        values[name] = float(term.data)
        parts.append(ad.scale(term, alpha))
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return LossReport(
        chamfer=values["chamfer"],
        count=values["count"],
        occupancy=values["occupancy"],
        total=float(total.data),
        enabled=toggles,
        tensor=total,
    )
