"""Sparse-window transformer over voxel tokens.

Pipeline pieces: dynamic per-voxel feature embedding (shared point MLP +
symmetric pooling), fixed sinusoidal positional embedding over grid indices,
non-overlapping 16x16 attention windows with a half-window shift on odd
layers, padding-level bucketing so variable-occupancy windows batch cleanly,
pre-norm transformer blocks, decoder input assembly with a shared learned
mask token, and three linear prediction heads (points, count, occupancy).

Only non-empty voxels become encoder tokens; masked and empty cells enter the
decoder as mask tokens distinguished by their positional embedding.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import seeds
from .voxelgrid import voxel_centers

KIND_VISIBLE = 0
KIND_MASKED = 1
KIND_EMPTY = 2


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_enc: int = 8
    n_dec: int = 2
    n_heads: int = 8
    ffn_hidden: int = 256
    window_extent: tuple = (16, 16)
    levels_train: tuple = (30, 60, 100, 200, 250)
    levels_eval: tuple = (30, 60, 100, 200, 256)
    n_points: int = 10
    use_intensity: bool = False
    pooling: str = "max"
    pos_embed: str = "sinusoidal"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % 4 != 0:
            raise ValueError(f"d_model must be divisible by 4, got {self.d_model}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for levels in (self.levels_train, self.levels_eval):
            if list(levels) != sorted(set(levels)):
                raise ValueError(f"padding levels must be strictly ascending, got {levels}")
        area = self.window_extent[0] * self.window_extent[1]
        if self.levels_eval[-1] != area:
            raise ValueError(f"top eval level {self.levels_eval[-1]} must equal window area {area}")
        if self.pooling not in ("max", "mean"):
            raise ValueError(f"pooling must be max or mean, got {self.pooling!r}")
        if self.pos_embed not in ("sinusoidal", "learned"):
            raise ValueError(f"pos_embed must be sinusoidal or learned, got {self.pos_embed!r}")

    @property
    def point_feature_dim(self):
        # offset from point-mean (3) + offset from voxel center (3) [+ intensity]
        return 6 + (1 if self.use_intensity else 0)

    @property
    def vfe_hidden(self):
        return self.d_model // 2


class LayerParams:
    """One pre-norm transformer block's parameters."""

    def __init__(self, prefix, cfg, rng, dtype):
        d, f = cfg.d_model, cfg.ffn_hidden

        def lin(name, nin, nout):
            w = ad.Parameter(f"{prefix}.{name}.w", rng.normal(0.0, 0.02, (nin, nout)).astype(dtype))
            b = ad.Parameter(f"{prefix}.{name}.b", np.zeros(nout, dtype=dtype))
            return w, b

        self.ln1_g = ad.Parameter(f"{prefix}.ln1.g", np.ones(d, dtype=dtype))
        self.ln1_b = ad.Parameter(f"{prefix}.ln1.b", np.zeros(d, dtype=dtype))
        self.w_qkv, self.b_qkv = lin("qkv", d, 3 * d)
        self.w_proj, self.b_proj = lin("proj", d, d)
        self.ln2_g = ad.Parameter(f"{prefix}.ln2.g", np.ones(d, dtype=dtype))
        self.ln2_b = ad.Parameter(f"{prefix}.ln2.b", np.zeros(d, dtype=dtype))
        self.w_ff1, self.b_ff1 = lin("ff1", d, f)
        self.w_ff2, self.b_ff2 = lin("ff2", f, d)

    def all(self):
        return [
            self.ln1_g, self.ln1_b, self.w_qkv, self.b_qkv, self.w_proj, self.b_proj,
            self.ln2_g, self.ln2_b, self.w_ff1, self.b_ff1, self.w_ff2, self.b_ff2,
        ]


class ModelParams:
    """All trainable tensors, with stable names for checkpointing."""

    def __init__(self, cfg, grid, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.grid = grid
        rng = seeds.rng_for(seed, seeds.TAG_INIT)
        d = cfg.d_model
        fin = cfg.point_feature_dim
        # small random biases keep ReLU pre-activations off the exact kink,
        # where finite differences and subgradients legitimately disagree
        self.vfe_w1 = ad.Parameter("vfe.w1", rng.normal(0.0, 0.02, (fin, cfg.vfe_hidden)).astype(dtype))
        self.vfe_b1 = ad.Parameter("vfe.b1", rng.normal(0.0, 0.02, cfg.vfe_hidden).astype(dtype))
        self.vfe_w2 = ad.Parameter("vfe.w2", rng.normal(0.0, 0.02, (cfg.vfe_hidden, d)).astype(dtype))
        self.vfe_b2 = ad.Parameter("vfe.b2", rng.normal(0.0, 0.02, d).astype(dtype))
        self.enc_layers = [LayerParams(f"enc.{i}", cfg, rng, dtype) for i in range(cfg.n_enc)]
        self.dec_layers = [LayerParams(f"dec.{i}", cfg, rng, dtype) for i in range(cfg.n_dec)]
        self.mask_token = ad.Parameter("mask_token", rng.normal(0.0, 0.02, d).astype(dtype))
        n = cfg.n_points
        self.head_pts_w = ad.Parameter("head.points.w", rng.normal(0.0, 0.02, (d, 3 * n)).astype(dtype))
        self.head_pts_b = ad.Parameter("head.points.b", np.zeros(3 * n, dtype=dtype))
        self.head_cnt_w = ad.Parameter("head.count.w", rng.normal(0.0, 0.02, (d, 1)).astype(dtype))
        self.head_cnt_b = ad.Parameter("head.count.b", np.zeros(1, dtype=dtype))
        self.head_occ_w = ad.Parameter("head.occ.w", rng.normal(0.0, 0.02, (d, 1)).astype(dtype))
        self.head_occ_b = ad.Parameter("head.occ.b", np.zeros(1, dtype=dtype))
        if cfg.pos_embed == "learned":
            gx, gy, _ = grid.grid_shape
            self.pos_x = ad.Parameter("pos.x", rng.normal(0.0, 0.02, (gx, d // 2)).astype(dtype))
            self.pos_y = ad.Parameter("pos.y", rng.normal(0.0, 0.02, (gy, d // 2)).astype(dtype))
        else:
            self.pos_x = self.pos_y = None

    @property
    def dtype(self):
        return self.vfe_w1.data.dtype

    def all(self):
        out = [self.vfe_w1, self.vfe_b1, self.vfe_w2, self.vfe_b2]
        for layer in self.enc_layers + self.dec_layers:
            out.extend(layer.all())
        out.append(self.mask_token)
        out.extend([self.head_pts_w, self.head_pts_b, self.head_cnt_w, self.head_cnt_b,
                    self.head_occ_w, self.head_occ_b])
        if self.pos_x is not None:
            out.extend([self.pos_x, self.pos_y])
        return out

    def by_name(self):
        return {p.name: p for p in self.all()}


# -- positional embedding ----------------------------------------------


def sinusoidal_table(indices_xy, d, dtype=np.float32):
    """[N, d] encoding of integer (ix, iy): d/4 geometric frequency pairs per axis."""
    idx = np.asarray(indices_xy, dtype=np.float64).reshape(-1, 2)
    n_pairs = d // 4
    freqs = 10000.0 ** (-np.arange(n_pairs) / n_pairs)
    chunks = []
    for axis in (0, 1):
        ang = idx[:, axis : axis + 1] * freqs[None, :]
        chunks.append(np.sin(ang))
        chunks.append(np.cos(ang))
    return np.concatenate(chunks, axis=1).astype(dtype)


def positional_embedding(grid_index, grid, d):
    """Fixed d-vector for one in-grid index; shared by encoder and decoder."""
    idx = np.asarray(grid_index, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= np.asarray(grid.grid_shape)):
        raise ValueError(f"index {tuple(idx.tolist())} outside grid shape {grid.grid_shape}")
    return sinusoidal_table(idx[None, :2], d)[0]


def embed_positions(indices, params):
    """[K, d] positional features as a graph tensor (constant or learned rows)."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    cfg = params.cfg
    if cfg.pos_embed == "learned":
        ex = ad.take_rows(params.pos_x.value, idx[:, 0])  # [K, d/2]
        ey = ad.take_rows(params.pos_y.value, idx[:, 1])
        cols = ad.concat_rows([ad.transpose(ex, (1, 0)), ad.transpose(ey, (1, 0))])
        return ad.transpose(cols, (1, 0))
    return ad.Tensor(sinusoidal_table(idx[:, :2], cfg.d_model, params.dtype))


# -- voxel feature embedding -------------------------------------------


def _segment_rows(starts, counts):
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    ends = np.cumsum(counts)
    offsets = np.repeat(starts - np.concatenate(([0], ends[:-1])), counts)
    return offsets + np.arange(total)


def point_features(vc, rows, cfg, dtype=np.float32):
    """Per-point input features for the selected voxels, plus segment starts.

    Features: offset from the voxel's point mean, offset from the voxel
    center, optional intensity. Returns (features [P, F], seg_starts [K]).
    """
    rows = np.asarray(rows, dtype=np.int64)
    counts = vc.counts[rows]
    pt_rows = _segment_rows(vc.starts[rows], counts)
    pts = vc.xyz[pt_rows].astype(np.float64)
    seg_starts = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64)
    seg_of = np.repeat(np.arange(rows.size), counts)
    means = np.add.reduceat(pts, seg_starts, axis=0) / counts[:, None]
    centers = voxel_centers(vc.indices[rows], vc.grid).astype(np.float64)
    cols = [pts - means[seg_of], pts - centers[seg_of]]
    if cfg.use_intensity:
        if vc.intensity is None:
            raise ValueError("use_intensity is on but the cloud has no intensity channel")
        cols.append(vc.intensity[pt_rows].astype(np.float64)[:, None])
    return np.concatenate(cols, axis=1).astype(dtype), seg_starts


def embed_voxels(vc, rows, params):
    """[K, d] pooled features for the voxels at the given rows of vc.indices."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return ad.Tensor(np.zeros((0, params.cfg.d_model), dtype=params.dtype))
    feats, seg_starts = point_features(vc, rows, params.cfg, params.dtype)
    x = ad.Tensor(feats)
    h = ad.relu(ad.add(ad.matmul(x, params.vfe_w1.value), params.vfe_b1.value))
    h = ad.relu(ad.add(ad.matmul(h, params.vfe_w2.value), params.vfe_b2.value))
    pool = ad.segment_max if params.cfg.pooling == "max" else ad.segment_mean
    return pool(h, seg_starts)


def embed_voxel(points, center, params, intensity=None):
    """d-vector for a single voxel's point list (order-invariant)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("embed_voxel: empty point list (empty voxels are never embedded)")
    cols = [pts - pts.mean(axis=0), pts - np.asarray(center, dtype=np.float64)]
    if params.cfg.use_intensity:
        if intensity is None:
            raise ValueError("use_intensity is on but no intensity given")
        cols.append(np.asarray(intensity, dtype=np.float64).reshape(-1, 1))
    x = ad.Tensor(np.concatenate(cols, axis=1).astype(params.dtype))
    h = ad.relu(ad.add(ad.matmul(x, params.vfe_w1.value), params.vfe_b1.value))
    h = ad.relu(ad.add(ad.matmul(h, params.vfe_w2.value), params.vfe_b2.value))
    pool = ad.segment_max if params.cfg.pooling == "max" else ad.segment_mean
    return ad.reshape(pool(h, np.array([0])), (params.cfg.d_model,))


# -- window partitioning -----------------------------------------------


@dataclass
class WindowPartition:
    window_extent: tuple
    shifted: bool
    keys: np.ndarray  # [N] composite window id per token
    groups: dict = field(repr=False, default=None)  # key -> token positions, input order


def window_coords(coords, window_extent, shifted):
    """(cx, cy) window lattice coordinates per token; shift is half a window."""
    idx = np.asarray(coords, dtype=np.int64)
    wx, wy = window_extent
    sx, sy = (wx // 2, wy // 2) if shifted else (0, 0)
    return (idx[:, 0] + sx) // wx, (idx[:, 1] + sy) // wy


def partition(coords, window_extent, shifted, scene_ids=None):
    """Assign every token to exactly one window; order within a window follows input."""
    cx, cy = window_coords(coords, window_extent, shifted)
    # composite key: (scene, cx, cy) packed into one int
    span = cy.max() + 2 if cy.size else 1
    key = cx * span + cy
    if scene_ids is not None:
        sid = np.asarray(scene_ids, dtype=np.int64)
        key = sid * (key.max() + 2 if key.size else 1) + key
    groups = {}
    order = np.argsort(key, kind="stable")
    if order.size:
        sorted_keys = key[order]
        cuts = np.flatnonzero(np.diff(sorted_keys)) + 1
        for chunk in np.split(order, cuts):
            groups[int(key[chunk[0]])] = chunk
    return WindowPartition(tuple(window_extent), bool(shifted), key, groups)


@dataclass
class PaddedGroups:
    levels: list  # (level, idx [W, level] with -1 padding)
    dropped: np.ndarray  # token positions excluded this layer (train-mode overflow)
    n_tokens: int


def bucket_and_pad(part, levels, train_mode, rng=None):
    """Pad each window to the smallest level >= its count; drop overflow in train mode."""
    levels = np.asarray(levels, dtype=np.int64)
    top = int(levels[-1])
    by_level = {int(lv): [] for lv in levels}
    dropped = []
    for key in sorted(part.groups):
        pos = part.groups[key]
        n = pos.size
        if n > top:
            if not train_mode:
                raise ValueError(f"window with {n} tokens exceeds top eval level {top}")
            if rng is None:
                raise ValueError("train-mode bucket_and_pad needs an rng for overflow drops")
            keep = np.sort(rng.choice(n, size=top, replace=False))
            drop_mask = np.ones(n, dtype=bool)
            drop_mask[keep] = False
            dropped.append(pos[drop_mask])
            pos = pos[keep]
            n = top
        level = int(levels[np.searchsorted(levels, n)])
        row = np.full(level, -1, dtype=np.int64)
        row[:n] = pos
        by_level[level].append(row)
    packed = [(lv, np.stack(rows)) for lv, rows in by_level.items() if rows]
    dropped = np.concatenate(dropped) if dropped else np.empty(0, dtype=np.int64)
    return PaddedGroups(packed, dropped, int(part.keys.size))


# -- transformer blocks ------------------------------------------------


def _windowed_attention(x, lp, padded, cfg):
    n, d = x.data.shape
    h = cfg.n_heads
    dh = d // h
    xn = ad.layer_norm(x, lp.ln1_g.value, lp.ln1_b.value, cfg.ln_eps)
    qkv = ad.add(ad.matmul(xn, lp.w_qkv.value), lp.b_qkv.value)  # [N, 3d]
    chunks = []
    position = np.full(n, -1, dtype=np.int64)
    offset = 0
    for level, idx in padded.levels:
        w = idx.shape[0]
        safe = np.where(idx >= 0, idx, 0)
        g = ad.take_rows(qkv, safe.ravel())  # [W*L, 3d]
        heads = []
        for a in range(3):
            part = ad.slice_cols(g, a * d, (a + 1) * d)
            part = ad.reshape(part, (w, level, h, dh))
            heads.append(ad.reshape(ad.transpose(part, (0, 2, 1, 3)), (w * h, level, dh)))
        q, k, v = heads
        scores = ad.matmul(ad.scale(q, 1.0 / np.sqrt(dh)), ad.transpose(k, (0, 2, 1)))
        pad_cols = idx < 0  # [W, L]
        mask = np.broadcast_to(pad_cols[:, None, None, :], (w, h, level, level)).reshape(w * h, level, level)
        att = ad.softmax_masked(scores, mask)
        out = ad.matmul(att, v)  # [W*h, L, dh]
        out = ad.reshape(ad.transpose(ad.reshape(out, (w, h, level, dh)), (0, 2, 1, 3)), (w * level, d))
        chunks.append(out)
        valid = idx >= 0
        position[idx[valid]] = offset + np.flatnonzero(valid.ravel())
        offset += w * level
    # dropped tokens take a zero attention update through a constant row
    chunks.append(ad.Tensor(np.zeros((1, d), dtype=x.dtype)))
    position[position < 0] = offset
    merged = ad.concat_rows(chunks)
    att_out = ad.take_rows(merged, position)
    return ad.add(ad.matmul(att_out, lp.w_proj.value), lp.b_proj.value)


def transformer_layer(x, lp, padded, cfg):
    x = ad.add(x, _windowed_attention(x, lp, padded, cfg))
    yn = ad.layer_norm(x, lp.ln2_g.value, lp.ln2_b.value, cfg.ln_eps)
    hghost = ad.gelu(ad.add(ad.matmul(yn, lp.w_ff1.value), lp.b_ff1.value))
    ff = ad.add(ad.matmul(hghost, lp.w_ff2.value), lp.b_ff2.value)
    return ad.add(x, ff)


def run_layers(x, coords, layers, cfg, train_mode, drop_key=(), scene_ids=None):
    """Stack of windowed blocks; layer i shifts the window lattice iff i is odd."""
    if x.data.shape[0] == 0:
        return x
    levels = cfg.levels_train if train_mode else cfg.levels_eval
    for i, lp in enumerate(layers):
        part = partition(coords, cfg.window_extent, shifted=(i % 2 == 1), scene_ids=scene_ids)
        rng = seeds.rng_for(*drop_key, seeds.TAG_DROP, i) if train_mode else None
        padded = bucket_and_pad(part, levels, train_mode, rng)
        x = transformer_layer(x, lp, padded, cfg)
    return x


def encoder_forward(feats, coords, params, train_mode=False, drop_key=(), scene_ids=None):
    return run_layers(feats, coords, params.enc_layers, params.cfg, train_mode, drop_key, scene_ids)


def decoder_forward(feats, coords, params, train_mode=False, drop_key=(), scene_ids=None):
    return run_layers(feats, coords, params.dec_layers, params.cfg, train_mode, drop_key, scene_ids)


# -- decoder assembly and heads -----------------------------------------


def _lexsorted(a):
    a = np.ascontiguousarray(a, dtype=np.int64)
    return a[np.lexsort((a[:, 2], a[:, 1], a[:, 0]))]


def assemble_decoder_input(encoded_visible, visible_indices, plan, params):
    """visible tokens ++ mask tokens for masked cells ++ mask tokens for decoys.

    The mask token is one shared vector; position alone tells tokens apart.
    Returns (features [Nt, d], coords [Nt, 3], kinds [Nt]).
    """
    vis_idx = np.asarray(visible_indices, dtype=np.int64).reshape(-1, 3)
    if vis_idx.shape[0] != encoded_visible.data.shape[0]:
        raise ValueError(f"{encoded_visible.data.shape[0]} encoded tokens vs {vis_idx.shape[0]} visible indices")
    if vis_idx.shape != plan.visible.shape or not np.array_equal(
        _lexsorted(vis_idx), _lexsorted(plan.visible)
    ):
        raise ValueError("encoded visible set does not match the mask plan")
    hidden = np.concatenate([plan.masked_nonempty, plan.sampled_empty], axis=0)
    parts = [encoded_visible]
    if hidden.shape[0]:
        tok = ad.repeat_rows(params.mask_token.value, hidden.shape[0])
        parts.append(ad.add(tok, embed_positions(hidden, params)))
    feats = ad.concat_rows(parts) if len(parts) > 1 else parts[0]
    coords = np.concatenate([vis_idx, hidden], axis=0)
    kinds = np.concatenate([
        np.full(vis_idx.shape[0], KIND_VISIBLE, dtype=np.int8),
        np.full(plan.masked_nonempty.shape[0], KIND_MASKED, dtype=np.int8),
        np.full(plan.sampled_empty.shape[0], KIND_EMPTY, dtype=np.int8),
    ])
    return feats, coords, kinds


def heads(decoder_out, params):
    """Linear heads: (points [M, n, 3] normalized offsets, count [M], occupancy logit [M])."""
    m = decoder_out.data.shape[0]
    n = params.cfg.n_points
    pts = ad.add(ad.matmul(decoder_out, params.head_pts_w.value), params.head_pts_b.value)
    cnt = ad.add(ad.matmul(decoder_out, params.head_cnt_w.value), params.head_cnt_b.value)
    occ = ad.add(ad.matmul(decoder_out, params.head_occ_w.value), params.head_occ_b.value)
    return ad.reshape(pts, (m, n, 3)), ad.reshape(cnt, (m,)), ad.reshape(occ, (m,))


# -- voxel-local coordinate frame ---------------------------------------


def normalize_points(pts, centers, grid):
    """World points -> voxel-local offsets in [-1, 1] per axis."""
    half = np.asarray(grid.voxel_size, dtype=np.float64) / 2.0
    return ((np.asarray(pts, np.float64) - np.asarray(centers, np.float64)) / half).astype(np.float32)


def denormalize_points(offsets, center, grid):
    """Inverse frame map; offsets are squashed by tanh so outputs stay in-voxel."""
    half = np.asarray(grid.voxel_size, dtype=np.float64) / 2.0
    out = np.asarray(center, np.float64) + np.tanh(np.asarray(offsets, np.float64)) * half
    return out.astype(np.float32)
