"""Loss tests: hand-derived unit values, brute-force oracles, gradients."""

import numpy as np
import pytest

from voxmask import autodiff as ad
from voxmask.losses import (
    LossToggles,
    LossWeights,
    chamfer_many,
    chamfer_total,
    chamfer_voxel,
    count_loss,
    occupancy_loss,
    subsample_gt,
    total_loss,
)


def brute_chamfer(pred, gt):
    """Independent double-loop evaluation of the bidirectional mean."""
    t1 = np.mean([min(np.sum((p - q) ** 2) for q in gt) for p in pred])
    t2 = np.mean([min(np.sum((p - q) ** 2) for p in pred) for q in gt])
    return t1 + t2


def test_chamfer_identical_singletons():
    val = chamfer_voxel(np.zeros((1, 3)), np.zeros((1, 3)))
    assert float(val.data) == 0.0


def test_chamfer_unit_offset():
    val = chamfer_voxel(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]))
    assert abs(float(val.data) - 2.0) < 1e-9


def test_chamfer_duplicates_do_not_change_value():
    pred = np.zeros((2, 3))
    gt = np.array([[1.0, 0.0, 0.0]])
    val = chamfer_voxel(pred, gt)
    assert abs(float(val.data) - 2.0) < 1e-9


def test_chamfer_permutation_invariant():
    rng = np.random.default_rng(0)
    pred = rng.normal(size=(6, 3))
    gt = rng.normal(size=(9, 3))
    base = float(chamfer_voxel(pred, gt).data)
    for _ in range(5):
        pv = float(chamfer_voxel(pred[rng.permutation(6)], gt[rng.permutation(9)]).data)
        assert abs(pv - base) < 1e-12


def test_chamfer_nonnegative_zero_iff_same_locations():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(5, 3))
    assert float(chamfer_voxel(pts, pts.copy()).data) == 0.0
    other = pts + 0.1
    assert float(chamfer_voxel(pts, other).data) > 0.0


def test_chamfer_rejects_empty_gt():
    with pytest.raises(ValueError, match="empty ground-truth"):
        chamfer_voxel(np.zeros((1, 3)), np.empty((0, 3)))


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(20):
        pred = rng.normal(size=(rng.integers(1, 8), 3))
        gt = rng.normal(size=(rng.integers(1, 12), 3))
        lib = float(chamfer_voxel(pred, gt).data)
        ref = brute_chamfer(pred, gt)
        assert abs(lib - ref) < 1e-10


def test_chamfer_many_matches_per_voxel():
    rng = np.random.default_rng(3)
    v, n, m = 4, 5, 7
    pred = rng.normal(size=(v, n, 3))
    gt = rng.normal(size=(v, m, 3))
    counts = np.array([7, 3, 1, 5])
    out = chamfer_many(ad.Tensor(pred), gt, counts)
    for i in range(v):
        ref = brute_chamfer(pred[i], gt[i, : counts[i]])
        assert abs(float(out.data[i]) - ref) < 1e-10


def test_chamfer_grad_matches_fd():
    rng = np.random.default_rng(4)
    pred = ad.Tensor(rng.normal(size=(3, 4, 3)), requires_grad=True)
    gt = rng.normal(size=(3, 6, 3))  # generic positions, no ties
    counts = np.array([6, 2, 4])

    def fn(p):
        return ad.sum_all(chamfer_many(p, gt, counts))

    report = ad.grad_check(fn, [pred])
    assert report.passed, str(report)


def test_chamfer_total_empty_is_zero():
    out = chamfer_total(ad.Tensor(np.zeros((0, 10, 3), dtype=np.float32)), np.zeros((0, 1, 3)), np.zeros(0, dtype=int))
    assert float(out.data) == 0.0


def test_chamfer_total_sum_and_mean():
    # voxel values 2 and 4 by construction
    pred = ad.Tensor(np.zeros((2, 3, 3)))
    gt = np.zeros((2, 1, 3))
    gt[0, 0, 0] = 1.0
    gt[1, 0, 0] = np.sqrt(2.0)
    counts = np.array([1, 1])
    assert abs(float(chamfer_total(pred, gt, counts, "sum").data) - 6.0) < 1e-9
    assert abs(float(chamfer_total(pred, gt, counts, "mean").data) - 3.0) < 1e-9


def test_subsample_cap_deterministic():
    rng_pts = np.random.default_rng(5)
    pts = rng_pts.normal(size=(150, 3))
    a = subsample_gt(pts, 100, np.random.default_rng(7))
    b = subsample_gt(pts, 100, np.random.default_rng(7))
    c = subsample_gt(pts, 100, np.random.default_rng(8))
    assert a.shape == (100, 3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    small = subsample_gt(pts[:50], 100, np.random.default_rng(9))
    assert small.shape == (50, 3)


def test_count_loss_unit_values():
    assert float(count_loss(np.array([5.0]), np.array([5])).data) == 0.0
    assert abs(float(count_loss(np.array([7.0]), np.array([10])).data) - 2.5) < 1e-9
    assert abs(float(count_loss(np.array([5.5]), np.array([5])).data) - 0.125) < 1e-9


def test_count_loss_mean_over_voxels():
    out = count_loss(np.array([7.0, 5.5]), np.array([10, 5]))
    assert abs(float(out.data) - (2.5 + 0.125) / 2) < 1e-9


def test_count_loss_rejects_bad_targets():
    with pytest.raises(ValueError, match=">= 1"):
        count_loss(np.array([1.0]), np.array([0]))
    with pytest.raises(ValueError, match="no masked voxels"):
        count_loss(np.empty(0), np.empty(0))


def test_count_loss_grad_both_branches():
    # away from the |delta| = 1 kink
    n_hat = ad.Tensor(np.array([7.0, 5.3, 2.2, 9.9]), requires_grad=True)
    n_true = np.array([10, 5, 2, 4])

    def fn(x):
        return count_loss(x, n_true)

    report = ad.grad_check(fn, [n_hat])
    assert report.passed, str(report)


def test_occupancy_confident_correct():
    val = float(occupancy_loss(np.array([40.0]), np.array([1.0])).data)
    assert val < 1e-9


def test_occupancy_maximal_uncertainty():
    for label in (0.0, 1.0):
        val = float(occupancy_loss(np.array([0.0]), np.array([label])).data)
        assert abs(val - np.log(2.0)) < 1e-12


def test_occupancy_hand_value():
    val = float(occupancy_loss(np.array([2.0, -2.0]), np.array([1.0, 0.0])).data)
    assert abs(val - 0.12693) < 1e-5


def test_occupancy_stable_at_large_logits():
    val = occupancy_loss(np.array([80.0, -80.0]), np.array([0.0, 1.0]))
    assert np.isfinite(val.data)
    assert abs(float(val.data) - 80.0) < 1e-9


def test_occupancy_rejects_empty_and_bad_labels():
    with pytest.raises(ValueError, match="no labeled tokens"):
        occupancy_loss(np.empty(0), np.empty(0))
    with pytest.raises(ValueError, match="0 or 1"):
        occupancy_loss(np.array([1.0]), np.array([0.5]))


def test_occupancy_grad():
    logits = ad.Tensor(np.array([2.0, -2.0, 0.3, 8.0]), requires_grad=True)
    labels = np.array([1.0, 0.0, 0.0, 1.0])
    report = ad.grad_check(lambda x: occupancy_loss(x, labels), [logits])
    assert report.passed, str(report)


def scalar(v):
    return ad.Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)


def test_total_loss_default_weights():
    rep = total_loss(scalar(2.0), scalar(1.0), scalar(0.5), LossWeights(), LossToggles())
    assert abs(rep.total - 2.6) < 1e-9
    assert rep.chamfer == 2.0 and rep.count == 1.0 and rep.occupancy == 0.5


def test_total_loss_single_term():
    rep = total_loss(scalar(3.0), None, None, LossWeights(), LossToggles(chamfer=True, count=False, occupancy=False))
    assert rep.total == 3.0
    rep2 = total_loss(None, None, scalar(0.7), LossWeights(alpha_c=0.0, alpha_np=0.0, alpha_occ=1.0),
                      LossToggles(chamfer=False, count=False, occupancy=True))
    assert rep2.total == 0.7


def test_total_loss_all_disabled_rejected():
    with pytest.raises(ValueError, match="disabled"):
        total_loss(None, None, None, LossWeights(), LossToggles(False, False, False))


def test_total_loss_disabled_term_gets_no_gradient():
    c, n, o = scalar(2.0), scalar(1.0), scalar(0.5)
    rep = total_loss(c, None, o, LossWeights(), LossToggles(count=False))
    rep.tensor.backward()
    assert c.grad is not None and o.grad is not None
    assert n.grad is None


def test_total_loss_linear_in_terms():
    w = LossWeights(alpha_c=2.0, alpha_np=0.5, alpha_occ=1.5)
    rep = total_loss(scalar(1.0), scalar(2.0), scalar(3.0), w, LossToggles())
    assert abs(rep.total - (2.0 * 1.0 + 0.5 * 2.0 + 1.5 * 3.0)) < 1e-12


def test_weights_validation():
    with pytest.raises(ValueError, match="non-negative"):
        LossWeights(alpha_c=-1.0)
    with pytest.raises(ValueError, match="positive"):
        LossWeights(alpha_c=0.0, alpha_np=0.0, alpha_occ=0.0)
