"""Model tests: voxel embedding, positions, windowing, blocks, heads."""

import itertools

import numpy as np
import pytest

from voxmask import autodiff as ad
from voxmask import model as M
from voxmask.masking import plan_mask
from voxmask.pointcloud import PointCloud, SceneSpec, generate_scene
from voxmask.voxelgrid import GridConfig, voxel_center, voxelize

TINY = M.ModelConfig(d_model=32, n_enc=2, n_dec=1, n_heads=2, ffn_hidden=64)


def tiny_params(seed=0, dtype=np.float32, cfg=TINY):
    return M.ModelParams(cfg, GridConfig(), seed=seed, dtype=dtype)


# -- voxel feature embedding -------------------------------------------


def manual_vfe(feats, params):
    h = np.maximum(feats @ params.vfe_w1.data + params.vfe_b1.data, 0)
    h = np.maximum(h @ params.vfe_w2.data + params.vfe_b2.data, 0)
    return h.max(axis=0)


def test_embed_voxel_singleton_equals_pointwise_output():
    params = tiny_params()
    p = np.array([0.2, 0.1, 1.5])
    center = np.array([0.25, 0.25, 1.0])
    out = M.embed_voxel([p], center, params)
    feats = np.concatenate([p - p, p - center])[None, :].astype(np.float32)
    np.testing.assert_allclose(out.data, manual_vfe(feats, params), rtol=1e-6)


def test_embed_voxel_duplicates_match_singleton():
    params = tiny_params()
    p = np.array([0.2, 0.1, 1.5])
    center = np.array([0.25, 0.25, 1.0])
    one = M.embed_voxel([p], center, params)
    three = M.embed_voxel([p, p, p], center, params)
    np.testing.assert_array_equal(one.data, three.data)


def test_embed_voxel_permutation_invariant_exhaustive():
    params = tiny_params()
    center = np.array([0.25, 0.25, 1.0])
    rng = np.random.default_rng(0)
    for k in (2, 3, 4):
        pts = rng.uniform(-0.2, 0.2, (k, 3)) + center
        base = M.embed_voxel(pts, center, params).data
        for perm in itertools.permutations(range(k)):
            out = M.embed_voxel(pts[list(perm)], center, params).data
            np.testing.assert_array_equal(out, base)


def test_embed_voxel_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        M.embed_voxel(np.empty((0, 3)), np.zeros(3), tiny_params())


def test_embed_voxels_batch_matches_singletons():
    params = tiny_params()
    grid = GridConfig()
    vc = voxelize(generate_scene(SceneSpec(seed=1, ring_count=2, object_count=1)), grid)
    rows = np.arange(min(8, vc.n_occupied))
    batch = M.embed_voxels(vc, rows, params)
    for j, r in enumerate(rows):
        single = M.embed_voxel(vc.points_of(r), voxel_center(vc.indices[r], grid), params)
        np.testing.assert_allclose(batch.data[j], single.data, rtol=1e-5, atol=1e-6)


def test_embed_voxels_grad():
    cfg = TINY
    grid = GridConfig()
    params = M.ModelParams(cfg, grid, seed=2, dtype=np.float64)
    vc = voxelize(generate_scene(SceneSpec(seed=3, ring_count=2, object_count=1)), grid)
    rows = np.arange(min(4, vc.n_occupied))
    targets = [params.vfe_w1, params.vfe_b1, params.vfe_w2, params.vfe_b2]

    def fn(*_):
        return ad.mean_all(M.embed_voxels(vc, rows, params))

    report = ad.grad_check(fn, targets, sample_per_tensor=60)
    assert report.passed, str(report)


# -- positional embedding ----------------------------------------------


def test_positional_embedding_deterministic():
    grid = GridConfig()
    a = M.positional_embedding((3, 7, 0), grid, 128)
    b = M.positional_embedding((3, 7, 0), grid, 128)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (128,)


def test_positional_embedding_neighbors_differ():
    grid = GridConfig()
    a = M.positional_embedding((0, 0, 0), grid, 128)
    b = M.positional_embedding((1, 0, 0), grid, 128)
    assert not np.array_equal(a, b)


def test_positional_embedding_rejects_outside():
    with pytest.raises(ValueError, match="outside grid"):
        M.positional_embedding((200, 0, 0), GridConfig(), 128)


def test_positional_embeddings_all_distinct_on_default_grid():
    grid = GridConfig()
    gx, gy, _ = grid.grid_shape
    ij = np.stack(np.meshgrid(np.arange(gx), np.arange(gy), indexing="ij"), axis=-1).reshape(-1, 2)
    table = M.sinusoidal_table(ij, 128, dtype=np.float64)
    assert np.unique(table, axis=0).shape[0] == 40000


# -- window partitioning -----------------------------------------------


def full_grid_tokens(nx, ny):
    return np.stack(
        [np.repeat(np.arange(nx), ny), np.tile(np.arange(ny), nx), np.zeros(nx * ny, dtype=np.int64)],
        axis=1,
    )


def test_partition_full_32x32():
    tokens = full_grid_tokens(32, 32)
    part = M.partition(tokens, (16, 16), shifted=False)
    assert len(part.groups) == 4
    assert all(g.size == 256 for g in part.groups.values())
    shifted = M.partition(tokens, (16, 16), shifted=True)
    assert len(shifted.groups) == 9


def test_partition_shift_hand_case():
    cx, cy = M.window_coords(np.array([[15, 15, 0]]), (16, 16), shifted=False)
    assert (cx[0], cy[0]) == (0, 0)
    cx, cy = M.window_coords(np.array([[15, 15, 0]]), (16, 16), shifted=True)
    assert (cx[0], cy[0]) == (1, 1)


def brute_force_windows(tokens, shifted):
    """Independent double-loop grouping oracle."""
    groups = {}
    for pos, (ix, iy, _) in enumerate(tokens):
        if shifted:
            wid = ((ix + 8) // 16, (iy + 8) // 16)
        else:
            wid = (ix // 16, iy // 16)
        groups.setdefault(wid, []).append(pos)
    return groups


def test_partition_matches_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(25):
        n = rng.integers(1, 300)
        flat = rng.choice(64 * 64, size=n, replace=False)
        tokens = np.stack([flat // 64, flat % 64, np.zeros(n, dtype=np.int64)], axis=1)
        for shifted in (False, True):
            part = M.partition(tokens, (16, 16), shifted=shifted)
            lib = sorted(tuple(g.tolist()) for g in part.groups.values())
            ref = sorted(tuple(v) for v in brute_force_windows(tokens, shifted).values())
            assert lib == ref


def test_bucket_and_pad_levels():
    levels = (30, 60, 100, 200, 250)
    tokens = full_grid_tokens(16, 16)[:45]
    part = M.partition(tokens, (16, 16), shifted=False)
    padded = M.bucket_and_pad(part, levels, train_mode=False)
    # eval levels differ but 45 fits both ladders the same way
    (lv, idx), = padded.levels
    assert lv == 60
    assert idx.shape == (1, 60)
    assert (idx >= 0).sum() == 45

    tokens30 = full_grid_tokens(16, 16)[:30]
    padded30 = M.bucket_and_pad(M.partition(tokens30, (16, 16), False), levels, train_mode=False)
    (lv30, idx30), = padded30.levels
    assert lv30 == 30 and (idx30 >= 0).all()


def test_bucket_and_pad_overflow_drop():
    tokens = full_grid_tokens(16, 16)  # one full window, 256 tokens
    part = M.partition(tokens, (16, 16), shifted=False)
    rng = np.random.default_rng(5)
    train = M.bucket_and_pad(part, (30, 60, 100, 200, 250), train_mode=True, rng=rng)
    (lv, idx), = train.levels
    assert lv == 250
    assert (idx >= 0).sum() == 250
    assert train.dropped.size == 6
    kept = set(idx[idx >= 0].tolist()) | set(train.dropped.tolist())
    assert kept == set(range(256))

    ev = M.bucket_and_pad(part, (30, 60, 100, 200, 256), train_mode=False)
    (lv_e, idx_e), = ev.levels
    assert lv_e == 256 and (idx_e >= 0).all() and ev.dropped.size == 0


# -- encoder / decoder blocks ------------------------------------------


def test_singleton_token_attends_to_itself():
    cfg = TINY
    params = tiny_params(seed=6)
    x = np.random.default_rng(7).normal(0, 1, (1, cfg.d_model)).astype(np.float32)
    out = M.encoder_forward(ad.Tensor(x.copy()), np.array([[5, 5, 0]]), params)
    assert np.isfinite(out.data).all()
    # manual single-token block: attention output is exactly proj(v_self)
    d = cfg.d_model

    def manual_layer(xrow, lp):
        mu = xrow.mean(-1, keepdims=True)
        var = ((xrow - mu) ** 2).mean(-1, keepdims=True)
        xn = (xrow - mu) / np.sqrt(var + cfg.ln_eps) * lp.ln1_g.data + lp.ln1_b.data
        qkv = xn @ lp.w_qkv.data + lp.b_qkv.data
        v = qkv[:, 2 * d :]
        xrow = xrow + v @ lp.w_proj.data + lp.b_proj.data
        mu = xrow.mean(-1, keepdims=True)
        var = ((xrow - mu) ** 2).mean(-1, keepdims=True)
        yn = (xrow - mu) / np.sqrt(var + cfg.ln_eps) * lp.ln2_g.data + lp.ln2_b.data
        u = yn @ lp.w_ff1.data + lp.b_ff1.data
        g = 0.5 * u * (1 + np.tanh(0.7978845608028654 * (u + 0.044715 * u**3)))
        return xrow + g @ lp.w_ff2.data + lp.b_ff2.data

    ref = x.copy()
    for lp in params.enc_layers:
        ref = manual_layer(ref, lp)
    np.testing.assert_allclose(out.data, ref, rtol=1e-4, atol=1e-5)


def test_unshifted_layer_locality():
    cfg = M.ModelConfig(d_model=32, n_enc=1, n_dec=1, n_heads=2, ffn_hidden=64)
    params = M.ModelParams(cfg, GridConfig(), seed=8)
    rng = np.random.default_rng(9)
    coords = np.array([[2, 2, 0], [40, 40, 0]])  # windows (0,0) and (2,2)
    x1 = rng.normal(0, 1, (2, 32)).astype(np.float32)
    x2 = x1.copy()
    x2[1] += 1.0  # perturb the other window's token
    out1 = M.encoder_forward(ad.Tensor(x1), coords, params)
    out2 = M.encoder_forward(ad.Tensor(x2), coords, params)
    np.testing.assert_array_equal(out1.data[0], out2.data[0])
    assert not np.array_equal(out1.data[1], out2.data[1])


def test_encoder_deterministic_with_drops():
    cfg = TINY
    params = tiny_params(seed=10)
    tokens = full_grid_tokens(16, 16)  # forces a train-mode drop
    rng = np.random.default_rng(11)
    x = rng.normal(0, 1, (256, cfg.d_model)).astype(np.float32)
    a = M.encoder_forward(ad.Tensor(x.copy()), tokens, params, train_mode=True, drop_key=(0, 1))
    b = M.encoder_forward(ad.Tensor(x.copy()), tokens, params, train_mode=True, drop_key=(0, 1))
    assert a.data.tobytes() == b.data.tobytes()


def test_encoder_grad_on_64_tokens():
    cfg = M.ModelConfig(d_model=16, n_enc=2, n_dec=1, n_heads=2, ffn_hidden=24)
    grid = GridConfig()
    params = M.ModelParams(cfg, grid, seed=12, dtype=np.float64)
    rng = np.random.default_rng(13)
    flat = rng.choice(40 * 40, size=64, replace=False)
    coords = np.stack([flat // 40, flat % 40, np.zeros(64, dtype=np.int64)], axis=1)
    x = ad.Tensor(rng.normal(0, 1, (64, cfg.d_model)), requires_grad=True)
    w = rng.normal(0, 1, (64, cfg.d_model))
    targets = [x] + [p for lp in params.enc_layers for p in lp.all()]

    def fn(*_):
        out = M.encoder_forward(x, coords, params)
        return ad.mean_all(ad.mul(out, ad.Tensor(w)))

    report = ad.grad_check(fn, targets, sample_per_tensor=12, seed=0)
    assert report.passed, str(report)


def test_decoder_zero_layers_is_identity():
    cfg = M.ModelConfig(d_model=32, n_enc=1, n_dec=0, n_heads=2, ffn_hidden=64)
    params = M.ModelParams(cfg, GridConfig(), seed=14)
    x = ad.Tensor(np.random.default_rng(15).normal(0, 1, (5, 32)).astype(np.float32))
    out = M.decoder_forward(x, np.zeros((5, 3), dtype=np.int64) + np.arange(5)[:, None] % 3, params)
    assert out is x


# -- decoder assembly ---------------------------------------------------


def scene_plan(seed=16, ratio=0.7, empty_fraction=0.002):
    grid = GridConfig()
    vc = voxelize(generate_scene(SceneSpec(seed=seed, ring_count=2, object_count=1)), grid)
    return vc, plan_mask(vc, ratio, empty_fraction, seed=seed)


def test_assemble_counts_and_kinds():
    params = tiny_params(seed=17)
    vc, plan = scene_plan()
    rows = vc.positions_of_flat(vc.grid.flatten_index(plan.visible))
    enc = M.embed_voxels(vc, rows, params)
    feats, coords, kinds = M.assemble_decoder_input(enc, plan.visible, plan, params)
    total = plan.n_visible + plan.n_masked + plan.n_empty
    assert feats.data.shape == (total, 32)
    assert coords.shape == (total, 3)
    assert (kinds == M.KIND_VISIBLE).sum() == plan.n_visible
    assert (kinds == M.KIND_MASKED).sum() == plan.n_masked
    assert (kinds == M.KIND_EMPTY).sum() == plan.n_empty


def test_assemble_shared_mask_token():
    params = tiny_params(seed=18)
    vc, plan = scene_plan(seed=19)
    rows = vc.positions_of_flat(vc.grid.flatten_index(plan.visible))
    enc = M.embed_voxels(vc, rows, params)
    feats, coords, kinds = M.assemble_decoder_input(enc, plan.visible, plan, params)
    hidden = np.flatnonzero(kinds != M.KIND_VISIBLE)[:2]
    for h in hidden:
        pos = M.positional_embedding(coords[h], vc.grid, 32)
        np.testing.assert_allclose(feats.data[h] - pos, params.mask_token.data, rtol=1e-5, atol=1e-6)


def test_assemble_empty_plan_returns_encoded():
    params = tiny_params(seed=20)
    vc, plan = scene_plan(seed=21, ratio=0.0, empty_fraction=0.0)
    rows = np.arange(vc.n_occupied)
    enc = M.embed_voxels(vc, rows, params)
    feats, coords, kinds = M.assemble_decoder_input(enc, plan.visible, plan, params)
    assert feats is enc
    assert (kinds == M.KIND_VISIBLE).all()


def test_assemble_rejects_wrong_visible_set():
    params = tiny_params(seed=22)
    vc, plan = scene_plan(seed=23)
    rows = vc.positions_of_flat(vc.grid.flatten_index(plan.visible))
    enc = M.embed_voxels(vc, rows, params)
    wrong = plan.visible.copy()
    wrong[0] = [199, 199, 0]
    with pytest.raises(ValueError, match="does not match"):
        M.assemble_decoder_input(enc, wrong, plan, params)


# -- heads ---------------------------------------------------------------


def test_heads_shapes():
    params = tiny_params(seed=24)
    x = ad.Tensor(np.random.default_rng(25).normal(0, 1, (6, 32)).astype(np.float32))
    pts, cnt, occ = M.heads(x, params)
    assert pts.data.shape == (6, 10, 3)
    assert cnt.data.shape == (6,)
    assert occ.data.shape == (6,)


def test_heads_zero_feature_zero_bias():
    params = tiny_params(seed=26)
    x = ad.Tensor(np.zeros((2, 32), dtype=np.float32))
    pts, cnt, occ = M.heads(x, params)
    assert np.all(pts.data == 0) and np.all(cnt.data == 0) and np.all(occ.data == 0)


def test_heads_grad():
    grid = GridConfig()
    params = M.ModelParams(TINY, grid, seed=27, dtype=np.float64)
    rng = np.random.default_rng(28)
    x = ad.Tensor(rng.normal(0, 1, (4, 32)), requires_grad=True)
    w = rng.normal(0, 1, (4, 10, 3))
    targets = [x, params.head_pts_w, params.head_pts_b, params.head_cnt_w,
               params.head_cnt_b, params.head_occ_w, params.head_occ_b]

    def fn(*_):
        pts, cnt, occ = M.heads(x, params)
        return ad.add(ad.mean_all(ad.mul(pts, ad.Tensor(w))), ad.add(ad.mean_all(ad.tanh(cnt)), ad.mean_all(ad.tanh(occ))))

    report = ad.grad_check(fn, targets, sample_per_tensor=40)
    assert report.passed, str(report)


def test_learned_positions_differentiable():
    cfg = M.ModelConfig(d_model=32, n_enc=1, n_dec=1, n_heads=2, ffn_hidden=64, pos_embed="learned")
    params = M.ModelParams(cfg, GridConfig(), seed=29, dtype=np.float64)
    idx = np.array([[0, 0, 0], [3, 5, 0], [10, 2, 0]])

    def fn(*_):
        return ad.mean_all(ad.tanh(M.embed_positions(idx, params)))

    report = ad.grad_check(fn, [params.pos_x, params.pos_y], sample_per_tensor=40)
    assert report.passed, str(report)


# -- coordinate frame ----------------------------------------------------


def test_denormalize_center_example():
    grid = GridConfig()
    out = M.denormalize_points(np.zeros((1, 3)), voxel_center((100, 100, 0), grid), grid)
    np.testing.assert_allclose(out[0], [0.25, 0.25, 1.0], atol=1e-6)


def test_denormalized_points_stay_in_voxel():
    grid = GridConfig()
    rng = np.random.default_rng(30)
    center = voxel_center((42, 17, 0), grid)
    offsets = rng.normal(0, 5, (1000, 3))  # wildly out of range before squash
    pts = M.denormalize_points(offsets, center, grid)
    half = np.array(grid.voxel_size) / 2
    assert np.all(np.abs(pts - center) <= half + 1e-5)


def test_normalize_points_inverse_frame():
    grid = GridConfig()
    center = voxel_center((10, 20, 0), grid)
    rng = np.random.default_rng(31)
    local = rng.uniform(-0.99, 0.99, (50, 3))
    world = center + local * (np.array(grid.voxel_size) / 2)
    back = M.normalize_points(world, np.tile(center, (50, 1)), grid)
    np.testing.assert_allclose(back, local, atol=1e-4)
