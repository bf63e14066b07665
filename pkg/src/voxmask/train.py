"""Pre-training: LR schedule, AdamW, binary checkpoints, the step loop,
and masked-scene reconstruction.

Determinism contract: a run is a pure function of the config plus the data,
so two runs with the same inputs produce bitwise-identical metrics and
checkpoints, and a resumed run continues exactly where the checkpoint's
iteration counter says.
"""

import csv
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses, masking, model, seeds
from .config import RunConfig
from .pointcloud import PointCloud, SceneSpec, generate_scene, load_bin
from .voxelgrid import voxel_centers, voxelize


class TrainError(RuntimeError):
    pass


# -- learning-rate schedule ----------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to the peak, then cosine decay to the final value."""

    warmup_start: float
    peak: float
    final: float
    warmup_iters: int
    total_iters: int

    def __post_init__(self):
        if self.warmup_iters < 0 or self.total_iters < 0:
            raise ValueError("schedule iteration counts must be >= 0")


def lr_at(it, sched):
    """Learning rate used for iteration `it` (0-based, before the update)."""
    if it < 0 or it > sched.total_iters:
        raise ValueError(f"iteration {it} outside [0, {sched.total_iters}]")
    if sched.warmup_iters > 0 and it <= sched.warmup_iters:
        return sched.warmup_start + (sched.peak - sched.warmup_start) * (it / sched.warmup_iters)
    denom = max(sched.total_iters - sched.warmup_iters, 1)
    progress = (it - sched.warmup_iters) / denom
    return sched.final + (sched.peak - sched.final) * (1.0 + math.cos(math.pi * progress)) / 2.0


# -- optimizer ------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; first/second moments keyed by name."""

    def __init__(self, params, beta1=0.95, beta2=0.99, weight_decay=0.01, eps=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.weight_decay = float(weight_decay)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr):
        """One update from the gradients currently held by the parameters."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainError(f"non-finite gradient for parameter {p.name!r} at optimizer step {t}")
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data -= lr * update


# -- checkpoints -----------------------------------------------------------

_MAGIC = b"VXMK"
_VERSION = 1


@dataclass
class CheckpointData:
    config_text: str
    iteration: int
    opt_step: int
    tensors: dict


def _named_tensors(params, opt):
    out = {p.name: p.data for p in params.all()}
    for p in params.all():
        out[f"optim.m.{p.name}"] = opt.m[p.name]
    for p in params.all():
        out[f"optim.v.{p.name}"] = opt.v[p.name]
    return out


def save_checkpoint(path, config_text, iteration, opt_step, tensors):
    """Binary container: magic, version, config text, counters, named float32 tensors."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    cfg_bytes = config_text.encode("utf-8")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<QQ", iteration, opt_step))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", data.ndim))
            if data.ndim:
                fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
    os.replace(tmp, path)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config_text = _read_exact(fh, cfg_len, "config text").decode("utf-8")
        iteration, opt_step = struct.unpack("<QQ", _read_exact(fh, 16, "counters"))
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "tensor shape")) if ndim else ()
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(fh, 4 * count, f"tensor {name!r} data")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        return CheckpointData(config_text, iteration, opt_step, tensors)


def apply_checkpoint(params, opt, ck):
    """Load tensors into an existing model + optimizer; names must match exactly."""
    expected = _named_tensors(params, opt)
    missing = sorted(set(expected) - set(ck.tensors))
    extra = sorted(set(ck.tensors) - set(expected))
    if missing or extra:
        raise ValueError(f"checkpoint tensor mismatch: missing {missing}, unexpected {extra}")
    for name, arr in ck.tensors.items():
        if arr.shape != expected[name].shape:
            raise ValueError(f"checkpoint tensor {name!r}: shape {arr.shape} != {expected[name].shape}")
    for p in params.all():
        p.data[...] = ck.tensors[p.name]
        opt.m[p.name][...] = ck.tensors[f"optim.m.{p.name}"]
        opt.v[p.name][...] = ck.tensors[f"optim.v.{p.name}"]
    opt.step_count = ck.opt_step


# -- scene preparation -----------------------------------------------------


@dataclass
class ScenePack:
    """A voxelized scene plus per-point offsets pre-normalized to the voxel frame."""

    vc: object
    norm_xyz: np.ndarray


def _pack_scene(cloud, grid, index):
    vc = voxelize(cloud, grid)
    if vc.n_occupied == 0:
        raise TrainError(f"scene {index} has no points inside the grid range")
    centers = voxel_centers(vc.indices, grid)
    per_point_center = np.repeat(centers, vc.counts, axis=0)
    norm = model.normalize_points(vc.xyz, per_point_center, grid)
    return ScenePack(vc=vc, norm_xyz=norm)


def build_scene_packs(cfg):
    """Generate or load the training scenes and voxelize them once."""
    d = cfg.values["data"]
    grid = cfg.grid()
    packs = []
    if d["source"] == "synthetic":
        for i in range(d["n_scenes"]):
            spec = cfg.scene_spec(seeds.mix(d["scene_seed"], seeds.TAG_SCENE, i))
            packs.append(_pack_scene(generate_scene(spec), grid, i))
    else:
        files = sorted(Path(d["dir"]).glob("*.bin"))
        want = d["n_scenes"] if d["n_scenes"] > 0 else len(files)
        if len(files) < want:
            raise TrainError(f"data.dir has {len(files)} .bin files, need {want}")
        for i, f in enumerate(files[:want]):
            packs.append(_pack_scene(load_bin(f, d["stride"]), grid, i))
    return packs


# -- one training step ------------------------------------------------------


def _rows_of(vc, indices):
    if indices.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    return vc.positions_of_flat(vc.grid.flatten_index(indices))


def _stable_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class StepResult:
    report: losses.LossReport
    occ_accuracy: float  # over all labeled tokens (masked + decoys)
    occ_accuracy_masked: float  # over masked tokens only
    count_mae: float
    n_masked: int


def forward_batch(packs, chosen, params, cfg, epoch_idx, global_it, train_mode=True):
    """Forward pass over a batch of scenes; returns the loss report and metrics.

    Scenes are merged into one token set with scene-tagged window keys, so
    attention never crosses scene boundaries but the big matmuls are shared.
    """
    mk = cfg.values["mask"]
    lo = cfg.values["loss"]
    run_seed = cfg.values["optim"]["seed"]
    n_scenes_total = len(packs)
    weights = cfg.loss_weights()
    toggles = cfg.loss_toggles()

    plans = []
    enc_feats, enc_coords, enc_sid = [], [], []
    for j, si in enumerate(chosen):
        pack = packs[si]
        mask_seed = seeds.mix(run_seed, epoch_idx * n_scenes_total + int(si))
        plan = masking.plan_mask(pack.vc, mk["ratio"], mk["empty_fraction"], mask_seed)
        if mk["empty_cap"] > 0:
            plan = masking.plan_cap(plan, mk["empty_cap"])
        plans.append(plan)
        rows = _rows_of(pack.vc, plan.visible)
        emb = model.embed_voxels(pack.vc, rows, params)
        if rows.size:
            emb = ad.add(emb, model.embed_positions(plan.visible, params))
        enc_feats.append(emb)
        enc_coords.append(plan.visible)
        enc_sid.append(np.full(plan.n_visible, j, dtype=np.int64))

    feats = ad.concat_rows(enc_feats) if len(enc_feats) > 1 else enc_feats[0]
    coords = np.concatenate(enc_coords, axis=0)
    sid = np.concatenate(enc_sid)
    encoded = model.encoder_forward(
        feats, coords, params, train_mode=train_mode,
        drop_key=(run_seed, global_it, 0), scene_ids=sid,
    )

    dec_feats, dec_coords, dec_sid, dec_kinds = [], [], [], []
    off = 0
    for j, plan in enumerate(plans):
        enc_j = ad.take_rows(encoded, np.arange(off, off + plan.n_visible))
        off += plan.n_visible
        f, c, k = model.assemble_decoder_input(enc_j, plan.visible, plan, params)
        dec_feats.append(f)
        dec_coords.append(c)
        dec_kinds.append(k)
        dec_sid.append(np.full(c.shape[0], j, dtype=np.int64))
    dfeats = ad.concat_rows(dec_feats) if len(dec_feats) > 1 else dec_feats[0]
    dcoords = np.concatenate(dec_coords, axis=0)
    dkinds = np.concatenate(dec_kinds)
    dsid = np.concatenate(dec_sid)
    decoded = model.decoder_forward(
        dfeats, dcoords, params, train_mode=train_mode,
        drop_key=(run_seed, global_it, 1), scene_ids=dsid,
    )

    sup_rows = np.flatnonzero(dkinds != model.KIND_VISIBLE)
    if sup_rows.size == 0:
        raise TrainError("step has no supervised tokens (mask ratio and empty fraction both select nothing)")
    sup = ad.take_rows(decoded, sup_rows)
    pts, cnt, occ = model.heads(sup, params)
    sup_kinds = dkinds[sup_rows]
    masked_sel = np.flatnonzero(sup_kinds == model.KIND_MASKED)

    # ground truth for masked voxels, in the same order they appear above
    chamfer_term = count_term = None
    count_mae = 0.0
    if masked_sel.size:
        gt_list, true_counts = [], []
        cap = lo["gt_cap"]
        for j, (si, plan) in enumerate(zip(chosen, plans)):
            pack = packs[si]
            for r in _rows_of(pack.vc, plan.masked_nonempty):
                p = pack.norm_xyz[pack.vc.starts[r] : pack.vc.starts[r] + pack.vc.counts[r]]
                if p.shape[0] > cap:
                    rng = seeds.rng_for(run_seed, seeds.TAG_GT_SUBSAMPLE, global_it, j, int(r))
                    p = losses.subsample_gt(p, cap, rng)
                gt_list.append(p)
                true_counts.append(int(pack.vc.counts[r]))
        mmax = max(p.shape[0] for p in gt_list)
        gt_pad = np.zeros((len(gt_list), mmax, 3), dtype=np.float32)
        for i, p in enumerate(gt_list):
            gt_pad[i, : p.shape[0]] = p
        counts_arr = np.asarray([p.shape[0] for p in gt_list], dtype=np.int64)
        true_arr = np.asarray(true_counts, dtype=np.float32)
        if toggles.chamfer:
            pred_masked = ad.take_rows(pts, masked_sel)
            chamfer_term = losses.chamfer_total(pred_masked, gt_pad, counts_arr, lo["chamfer_aggregate"])
            if lo["chamfer_aggregate"] == "sum":
                chamfer_term = ad.scale(chamfer_term, 1.0 / len(chosen))
        n_hat = ad.take_rows(cnt, masked_sel)
        if toggles.count:
            count_term = losses.count_loss(n_hat, true_arr)
        count_mae = float(np.mean(np.abs(n_hat.data.astype(np.float64) - true_arr)))

    occ_labels = (sup_kinds == model.KIND_MASKED).astype(np.float32)
    occ_term = losses.occupancy_loss(occ, occ_labels) if toggles.occupancy else None
    hits = (occ.data > 0) == (occ_labels > 0.5)
    occ_accuracy = float(np.mean(hits))
    occ_accuracy_masked = float(np.mean(hits[masked_sel])) if masked_sel.size else 0.0

    effective = losses.LossToggles(
        chamfer=toggles.chamfer and chamfer_term is not None,
        count=toggles.count and count_term is not None,
        occupancy=toggles.occupancy,
    )
    if not effective.any_enabled:
        raise TrainError("no enabled loss term has supervised tokens this step")
    report = losses.total_loss(chamfer_term, count_term, occ_term, weights, effective)
    return StepResult(report, occ_accuracy, occ_accuracy_masked, count_mae, int(masked_sel.size))


# -- gradient verification ----------------------------------------------------


def grad_suite(cfg, sample_per_tensor=6, seed=0):
    """Finite-difference check of the full graph in float64.

    One compact scene is pushed through the voxel encoder, both transformer
    stacks, all three heads, and all three losses; every parameter tensor is
    then checked against central differences. Returns a GradCheckReport.
    """
    grid = cfg.grid()
    params = model.ModelParams(cfg.model_config(), grid, seed=cfg.values["optim"]["seed"], dtype=np.float64)
    # a sparse low-density scene keeps the finite-difference loop cheap while
    # still exercising multi-window attention and the decoy path
    spec = SceneSpec(ring_count=2, max_range=18.0, object_count=2, object_min_size=0.6,
                     object_max_size=2.0, ground_noise_sigma=0.02, points_per_ring=40,
                     points_per_object=20, seed=seeds.mix(seed, seeds.TAG_SCENE, 0))
    vc = voxelize(generate_scene(spec), grid)
    plan = masking.plan_cap(masking.plan_mask(vc, 0.7, 0.001, seeds.mix(seed, seeds.TAG_MASK)), 16)
    vis_rows = _rows_of(vc, plan.visible)
    masked_rows = _rows_of(vc, plan.masked_nonempty)

    centers = voxel_centers(vc.indices, grid)
    per_point_center = np.repeat(centers, vc.counts, axis=0)
    norm = model.normalize_points(vc.xyz, per_point_center, grid).astype(np.float64)
    gt_list = [norm[vc.starts[r] : vc.starts[r] + vc.counts[r]] for r in masked_rows]
    mmax = max(p.shape[0] for p in gt_list)
    gt_pad = np.zeros((len(gt_list), mmax, 3), dtype=np.float64)
    for i, p in enumerate(gt_list):
        gt_pad[i, : p.shape[0]] = p
    counts_arr = np.asarray([p.shape[0] for p in gt_list], dtype=np.int64)
    true_arr = vc.counts[masked_rows].astype(np.float64)

    def fn(*_):
        emb = ad.add(model.embed_voxels(vc, vis_rows, params), model.embed_positions(plan.visible, params))
        encoded = model.encoder_forward(emb, plan.visible, params, train_mode=False)
        feats, coords, kinds = model.assemble_decoder_input(encoded, plan.visible, plan, params)
        decoded = model.decoder_forward(feats, coords, params, train_mode=False)
        sup_rows = np.flatnonzero(kinds != model.KIND_VISIBLE)
        pts, cnt, occ = model.heads(ad.take_rows(decoded, sup_rows), params)
        sup_kinds = kinds[sup_rows]
        masked_sel = np.flatnonzero(sup_kinds == model.KIND_MASKED)
        # mean aggregation keeps the forward value O(1): the absolute
        # roundoff of central differences scales with it, and the relative
        # error of near-zero gradient entries would otherwise drown in noise
        chamfer = losses.chamfer_total(ad.take_rows(pts, masked_sel), gt_pad, counts_arr, "mean")
        count = losses.count_loss(ad.take_rows(cnt, masked_sel), true_arr)
        occ_term = losses.occupancy_loss(occ, (sup_kinds == model.KIND_MASKED).astype(np.float64))
        report = losses.total_loss(chamfer, count, occ_term, losses.LossWeights(), losses.LossToggles())
        return report.tensor

    return ad.grad_check(fn, params.all(), tol=1e-4, step=1e-5,
                         sample_per_tensor=sample_per_tensor, seed=seed)


# -- the training loop -------------------------------------------------------

METRIC_COLUMNS = ["epoch", "step", "lr", "loss_total", "loss_chamfer", "loss_count", "loss_occ", "occ_accuracy"]


@dataclass
class EpochStats:
    epoch: int
    loss_total: float
    loss_chamfer: float
    loss_count: float
    loss_occ: float
    occ_accuracy: float
    occ_accuracy_masked: float
    count_mae: float


@dataclass
class PretrainResult:
    metrics_path: Path
    checkpoint_path: Path
    epochs: list
    iterations: int
    params: object = field(repr=False, default=None)


def _fmt(x):
    return f"{x:.10g}"


def pretrain(cfg, out_dir, resume_from=None, log=None):
    """Run masked pre-training per the config; writes metrics.csv and checkpoints."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    o = cfg.values["optim"]

    packs = build_scene_packs(cfg)
    n_scenes = len(packs)
    batch = o["batch_size"]
    steps_per_epoch = n_scenes // batch
    if steps_per_epoch == 0:
        raise TrainError(f"batch size {batch} exceeds scene count {n_scenes}")
    epochs = o["epochs"]
    total_iters = epochs * steps_per_epoch
    sched = Schedule(o["lr_start"], o["lr_peak"], o["lr_final"], o["warmup_iters"], total_iters)

    params = model.ModelParams(cfg.model_config(), cfg.grid(), seed=o["seed"])
    opt = AdamW(params.all(), o["beta1"], o["beta2"], o["weight_decay"], o["eps"])

    start_it = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        ck_digest = RunConfig.from_text(ck.config_text).digest()
        if ck_digest != cfg.digest():
            raise TrainError(
                f"checkpoint architecture does not match the config: checkpoint digest {ck_digest}, config digest {cfg.digest()}"
            )
        apply_checkpoint(params, opt, ck)
        start_it = ck.iteration
        if start_it > total_iters:
            raise TrainError(f"checkpoint iteration {start_it} exceeds schedule total {total_iters}")

    stop_at = total_iters
    if o["max_steps"] > 0:
        stop_at = min(stop_at, o["max_steps"])

    metrics_path = out_dir / "metrics.csv"
    append = resume_from is not None and metrics_path.exists()
    epoch_stats = []
    it = 0
    with open(metrics_path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(METRIC_COLUMNS)
        for epoch_idx in range(epochs):
            if (epoch_idx + 1) * steps_per_epoch <= start_it:
                it += steps_per_epoch
                continue
            if it >= stop_at:
                break
            order = seeds.rng_for(o["seed"], seeds.TAG_SHUFFLE, epoch_idx).permutation(n_scenes)
            ep = []
            for b in range(steps_per_epoch):
                if it < start_it:
                    it += 1
                    continue
                if it >= stop_at:
                    break
                lr = lr_at(it, sched)
                chosen = order[b * batch : (b + 1) * batch]
                step = forward_batch(packs, chosen, params, cfg, epoch_idx, it, train_mode=True)
                rep = step.report
                if not math.isfinite(rep.total):
                    raise TrainError(
                        f"non-finite loss at step {it + 1}: total={rep.total} "
                        f"chamfer={rep.chamfer} count={rep.count} occupancy={rep.occupancy}"
                    )
                ad.zero_grads(params.all())
                rep.tensor.backward()
                opt.step(lr)
                # the graph behind the loss tensor is hundreds of MB per step;
                # epoch stats only need the scalar fields, so release it now
                rep.tensor = None
                it += 1
                writer.writerow([epoch_idx + 1, it, _fmt(lr), _fmt(rep.total), _fmt(rep.chamfer),
                                 _fmt(rep.count), _fmt(rep.occupancy), _fmt(step.occ_accuracy)])
                ep.append(step)
            fh.flush()
            if ep:
                stats = EpochStats(
                    epoch=epoch_idx + 1,
                    loss_total=float(np.mean([s.report.total for s in ep])),
                    loss_chamfer=float(np.mean([s.report.chamfer for s in ep])),
                    loss_count=float(np.mean([s.report.count for s in ep])),
                    loss_occ=float(np.mean([s.report.occupancy for s in ep])),
                    occ_accuracy=float(np.mean([s.occ_accuracy for s in ep])),
                    occ_accuracy_masked=float(np.mean([s.occ_accuracy_masked for s in ep])),
                    count_mae=float(np.mean([s.count_mae for s in ep])),
                )
                epoch_stats.append(stats)
                if log:
                    log(f"epoch {stats.epoch}/{epochs} loss {stats.loss_total:.4f} "
                        f"occ_acc {stats.occ_accuracy:.3f} count_mae {stats.count_mae:.3f}")
            every = o["checkpoint_every"]
            if every > 0 and (epoch_idx + 1) % every == 0 and it < stop_at:
                save_checkpoint(out_dir / f"checkpoint_epoch{epoch_idx + 1:04d}.bin",
                                cfg.to_text(), it, opt.step_count, _named_tensors(params, opt))

    ckpt_path = out_dir / "checkpoint.bin"
    save_checkpoint(ckpt_path, cfg.to_text(), it, opt.step_count, _named_tensors(params, opt))
    return PretrainResult(metrics_path, ckpt_path, epoch_stats, it, params)


def load_model(checkpoint_path):
    """Rebuild a model (and its config) from a checkpoint file."""
    ck = load_checkpoint(checkpoint_path)
    cfg = RunConfig.from_text(ck.config_text)
    params = model.ModelParams(cfg.model_config(), cfg.grid(), seed=cfg.values["optim"]["seed"])
    opt = AdamW(params.all(), cfg.values["optim"]["beta1"], cfg.values["optim"]["beta2"],
                cfg.values["optim"]["weight_decay"], cfg.values["optim"]["eps"])
    apply_checkpoint(params, opt, ck)
    return params, cfg, ck


# -- reconstruction -----------------------------------------------------------

KIND_NAMES = {model.KIND_VISIBLE: "visible", model.KIND_MASKED: "masked", model.KIND_EMPTY: "empty"}


@dataclass
class VoxelRecord:
    ix: int
    iy: int
    iz: int
    kind: str
    true_count: int
    pred_count: float
    occ_prob: float


@dataclass
class ReconstructionBundle:
    masked_input: PointCloud
    reconstruction: PointCloud
    truth: PointCloud
    records: list
    plan: masking.MaskPlan


def reconstruct(params, cfg, cloud, mask_seed):
    """Mask a scene, run the model in eval mode, and decode predicted points.

    The reconstruction holds predicted points for every non-empty voxel
    (masked and visible); offsets are squashed by tanh so each predicted
    point stays inside its voxel.
    """
    grid = params.grid
    mk = cfg.values["mask"]
    vc = voxelize(cloud, grid)
    if vc.n_occupied == 0:
        raise ValueError("scene has no points inside the grid range")
    plan = masking.plan_mask(vc, mk["ratio"], mk["empty_fraction"], mask_seed)
    if mk["empty_cap"] > 0:
        plan = masking.plan_cap(plan, mk["empty_cap"])

    vis_rows = _rows_of(vc, plan.visible)
    emb = model.embed_voxels(vc, vis_rows, params)
    if vis_rows.size:
        emb = ad.add(emb, model.embed_positions(plan.visible, params))
    encoded = model.encoder_forward(emb, plan.visible, params, train_mode=False)
    feats, coords, kinds = model.assemble_decoder_input(encoded, plan.visible, plan, params)
    decoded = model.decoder_forward(feats, coords, params, train_mode=False)
    pts, cnt, occ = model.heads(decoded, params)

    occ_prob = _stable_sigmoid(occ.data)
    centers = voxel_centers(coords, grid)
    nonempty = kinds != model.KIND_EMPTY
    offsets = pts.data[nonempty]
    world = np.tanh(offsets.astype(np.float64)) * (np.asarray(grid.voxel_size, np.float64) / 2.0)
    world = (world + centers[nonempty][:, None, :]).astype(np.float32)
    reconstruction = PointCloud(world.reshape(-1, 3), source="reconstruction")

    point_rows = model._segment_rows(vc.starts[vis_rows], vc.counts[vis_rows])
    masked_input = PointCloud(
        vc.xyz[point_rows],
        intensity=None if vc.intensity is None else vc.intensity[point_rows],
        source="masked input",
    )
    truth = PointCloud(vc.xyz, intensity=vc.intensity, source="truth")

    true_counts = np.zeros(coords.shape[0], dtype=np.int64)
    occ_rows = kinds != model.KIND_EMPTY
    true_counts[occ_rows] = vc.counts[_rows_of(vc, coords[occ_rows])]
    records = [
        VoxelRecord(
            ix=int(coords[i, 0]), iy=int(coords[i, 1]), iz=int(coords[i, 2]),
            kind=KIND_NAMES[int(kinds[i])],
            true_count=int(true_counts[i]),
            pred_count=float(cnt.data[i]),
            occ_prob=float(occ_prob[i]),
        )
        for i in range(coords.shape[0])
    ]
    return ReconstructionBundle(masked_input, reconstruction, truth, records, plan)
