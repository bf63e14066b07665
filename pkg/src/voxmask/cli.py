"""Command-line surface: data generation, voxel statistics, pre-training,
gradient verification, and reconstruction export.

Report-producing commands write a delimited file plus matplotlib figures
rendered alongside it (suppressed by --no-figures). Every command exits
nonzero on any validation failure.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import seeds, train
from .config import DEFAULTS, ConfigError, RunConfig, file_overrides
from .pointcloud import SceneSpec, generate_scene, load_bin, save_bin, save_ply
from .voxelgrid import voxelize

# points-per-voxel buckets for the stats report; each cell holds the number
# of points living in voxels of that size, so a row sums to points_in_range
_BUCKETS = [(1, 1), (2, 2), (3, 4), (5, 8), (9, 16), (17, 32), (33, None)]


def _bucket_name(lo, hi):
    if hi is None:
        return f"pts_cnt_{lo}_up"
    if lo == hi:
        return f"pts_cnt_{lo}"
    return f"pts_cnt_{lo}_{hi}"


def _config_reference():
    lines = ["configuration keys (defaults):"]
    for section, kv in DEFAULTS.items():
        for key, val in kv.items():
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"  {section}.{key} = {val}")
    return "\n".join(lines)


def _base_config(args):
    """Defaults, then preset, then config file, then flags (applied by callers)."""
    cfg = RunConfig()
    if getattr(args, "preset", None):
        cfg = cfg.with_preset(args.preset)
    if getattr(args, "config", None):
        cfg = cfg.with_overrides(file_overrides(args.config))
    return cfg


def _scene_spec_from_flags(args, index):
    return SceneSpec(
        ring_count=args.ring_count,
        max_range=args.max_range,
        object_count=args.object_count,
        object_min_size=args.object_min_size,
        object_max_size=args.object_max_size,
        ground_z=args.ground_z,
        ground_noise_sigma=args.ground_noise_sigma,
        points_per_ring=args.points_per_ring,
        points_per_object=args.points_per_object,
        seed=seeds.mix(args.seed, seeds.TAG_SCENE, index),
    )


# -- gen-data ----------------------------------------------------------------


def cmd_gen_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.scenes):
        spec = _scene_spec_from_flags(args, i)
        cloud = generate_scene(spec)
        name = f"scene_{i:04d}.bin"
        save_bin(cloud, out / name)
        rows.append([i, name, len(cloud), spec.seed])
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "file", "points", "seed"])
        writer.writerows(rows)
    print(f"wrote {args.scenes} scene(s) and manifest.csv to {out}")
    return 0


# -- voxelize-stats ------------------------------------------------------------


def cmd_voxelize_stats(args):
    cfg = _base_config(args)
    grid = cfg.grid()
    files = sorted(Path(args.indir).glob("*.bin"))
    if not files:
        print(f"error: no .bin scene files in {args.indir}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bucket_cols = [_bucket_name(lo, hi) for lo, hi in _BUCKETS]
    columns = ["scene", "points_total", "points_in_range", "points_dropped",
               "occupied_voxels", "empty_voxels", "empty_fraction",
               "max_points_per_voxel", "mean_points_per_voxel"] + bucket_cols
    rows = []
    all_counts = []
    skipped = 0
    for f in files:
        try:
            cloud = load_bin(f, args.stride)
        except ValueError as exc:
            print(f"error: {f}: {exc}", file=sys.stderr)
            skipped += 1
            continue
        vc = voxelize(cloud, grid)
        counts = vc.counts
        all_counts.append(counts)
        row = {
            "scene": f.name,
            "points_total": len(cloud),
            "points_in_range": vc.n_points,
            "points_dropped": vc.out_of_range,
            "occupied_voxels": vc.n_occupied,
            "empty_voxels": grid.n_cells - vc.n_occupied,
            "empty_fraction": f"{(grid.n_cells - vc.n_occupied) / grid.n_cells:.6f}",
            "max_points_per_voxel": int(counts.max()) if counts.size else 0,
            "mean_points_per_voxel": f"{counts.mean():.4f}" if counts.size else "0",
        }
        for (lo, hi), col in zip(_BUCKETS, bucket_cols):
            sel = (counts >= lo) if hi is None else (counts >= lo) & (counts <= hi)
            row[col] = int(counts[sel].sum())
        rows.append(row)
    stats_path = out / "stats.csv"
    with open(stats_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    if not args.no_figures:
        from . import report

        merged = np.concatenate(all_counts) if all_counts else np.empty(0, dtype=np.int64)
        report.save_voxel_stats_figure(rows, merged, out / "voxel_stats.png")
    print(f"wrote {stats_path} ({len(rows)} scene(s), {skipped} skipped)")
    return 0


# -- pretrain -------------------------------------------------------------------


def cmd_pretrain(args):
    cfg = _base_config(args)
    overrides = {}
    if args.no_chamfer:
        overrides[("loss", "use_chamfer")] = False
    if args.no_count:
        overrides[("loss", "use_count")] = False
    if args.no_occupancy:
        overrides[("loss", "use_occupancy")] = False
    if args.alpha_c is not None:
        overrides[("loss", "alpha_c")] = args.alpha_c
    if args.alpha_np is not None:
        overrides[("loss", "alpha_np")] = args.alpha_np
    if args.alpha_occ is not None:
        overrides[("loss", "alpha_occ")] = args.alpha_occ
    if args.use_intensity:
        overrides[("model", "use_intensity")] = True
    if args.seed is not None:
        overrides[("optim", "seed")] = args.seed
    if args.max_steps is not None:
        overrides[("optim", "max_steps")] = args.max_steps
    cfg = cfg.with_overrides(overrides)
    cfg.validate()  # every problem is listed before any compute happens
    res = train.pretrain(cfg, args.out, resume_from=args.resume, log=print)
    if not args.no_figures:
        with open(res.metrics_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            from . import report

            report.save_training_curves(rows, Path(args.out) / "training_curves.png")
    print(f"checkpoint: {res.checkpoint_path}")
    print(f"metrics: {res.metrics_path}")
    return 0


# -- grad-check -------------------------------------------------------------------


def cmd_grad_check(args):
    cfg = _base_config(args).with_preset("tiny")  # tiny model forced for speed
    rep = train.grad_suite(cfg, sample_per_tensor=args.sample_per_tensor, seed=args.seed)
    print(rep)
    if not rep.passed:
        worst = max(rep.entries, key=lambda e: e.max_rel, default=None)
        if worst is not None:
            print(f"worst parameter: {worst.name} (relative error {worst.max_rel:.3e})", file=sys.stderr)
        return 1
    return 0


# -- reconstruct ---------------------------------------------------------------------


def cmd_reconstruct(args):
    params, cfg, _ = train.load_model(args.checkpoint)
    if args.config:
        file_cfg = RunConfig.from_file(args.config)
        if file_cfg.digest() != cfg.digest():
            print(
                f"error: config digest {file_cfg.digest()} does not match "
                f"checkpoint digest {cfg.digest()}",
                file=sys.stderr,
            )
            return 2
        cfg = file_cfg
    if args.scene is not None:
        cloud = load_bin(args.scene, args.stride)
    else:
        cloud = generate_scene(cfg.scene_spec(seeds.mix(args.scene_seed, seeds.TAG_SCENE, 0)))
    bundle = train.reconstruct(params, cfg, cloud, args.mask_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(bundle.masked_input, out / "masked.ply")
    save_ply(bundle.reconstruction, out / "reconstructed.ply")
    save_ply(bundle.truth, out / "truth.ply")
    with open(out / "voxels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ix", "iy", "iz", "kind", "true_count", "pred_count", "occ_prob"])
        for r in bundle.records:
            writer.writerow([r.ix, r.iy, r.iz, r.kind, r.true_count,
                             f"{r.pred_count:.6g}", f"{r.occ_prob:.6g}"])
    if not args.no_figures:
        from . import report

        report.save_reconstruction_figure(bundle, out / "reconstruction.png")
    print(f"wrote masked.ply, reconstructed.ply, truth.ply, voxels.csv to {out}")
    return 0


# -- parser ------------------------------------------------------------------------


def _add_scene_flags(p):
    d = DEFAULTS["data"]
    p.add_argument("--ring-count", type=int, default=d["ring_count"])
    p.add_argument("--max-range", type=float, default=d["max_range"])
    p.add_argument("--object-count", type=int, default=d["object_count"])
    p.add_argument("--object-min-size", type=float, default=d["object_min_size"])
    p.add_argument("--object-max-size", type=float, default=d["object_max_size"])
    p.add_argument("--ground-z", type=float, default=d["ground_z"])
    p.add_argument("--ground-noise-sigma", type=float, default=d["ground_noise_sigma"])
    p.add_argument("--points-per-ring", type=int, default=d["points_per_ring"])
    p.add_argument("--points-per-object", type=int, default=d["points_per_object"])


def build_parser():
    parser = argparse.ArgumentParser(
        prog="voxmask",
        description="Masked pre-training for sparse voxelized point clouds.",
        epilog=_config_reference(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic scene files plus a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_scene_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("voxelize-stats", help="per-scene voxel occupancy report")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=4, choices=(3, 4, 5))
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_voxelize_stats)

    p = sub.add_parser("pretrain", help="run masked pre-training")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("tiny", "paper"), default=None)
    p.add_argument("--no-chamfer", action="store_true")
    p.add_argument("--no-count", action="store_true")
    p.add_argument("--no-occupancy", action="store_true")
    p.add_argument("--alpha-c", type=float, default=None)
    p.add_argument("--alpha-np", type=float, default=None)
    p.add_argument("--alpha-occ", type=float, default=None)
    p.add_argument("--use-intensity", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--config", default=None)
    p.add_argument("--sample-per-tensor", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("reconstruct", help="export masked/reconstructed/truth clouds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", default=None, help=".bin scene file; omit to synthesize one")
    p.add_argument("--scene-seed", type=int, default=0, help="seed for the synthesized scene")
    p.add_argument("--stride", type=int, default=4, choices=(3, 4, 5))
    p.add_argument("--mask-seed", type=int, required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_reconstruct)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except train.TrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
