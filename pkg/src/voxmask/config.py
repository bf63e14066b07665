"""Run configuration: INI-style sections with every default set to the
published hyperparameter value where one exists.

Unknown sections or keys are rejected, not ignored, and all validation
problems are collected and reported together. The [grid] + [model] sections
define the architecture digest used to match checkpoints to configs.
"""

import configparser
import hashlib
import io

from .losses import LossToggles, LossWeights
from .model import ModelConfig
from .pointcloud import SceneSpec
from .voxelgrid import GridConfig

# section -> key -> default; value types drive parsing
DEFAULTS = {
    "grid": {
        "voxel_size_x": 0.5,
        "voxel_size_y": 0.5,
        "voxel_size_z": 8.0,
        "range_min_x": -50.0,
        "range_min_y": -50.0,
        "range_min_z": -3.0,
        "range_max_x": 50.0,
        "range_max_y": 50.0,
        "range_max_z": 5.0,
    },
    "model": {
        "d_model": 128,
        "n_enc_layers": 8,
        "n_dec_layers": 2,
        "n_heads": 8,
        "ffn_hidden": 256,
        "window_x": 16,
        "window_y": 16,
        "levels_train": (30, 60, 100, 200, 250),
        "levels_eval": (30, 60, 100, 200, 256),
        "n_points_predicted": 10,
        "use_intensity": False,
        "pooling": "max",
        "pos_embed": "sinusoidal",
    },
    "mask": {
        "ratio": 0.7,
        "empty_fraction": 0.1,
        "empty_cap": 0,  # 0 = no cap
    },
    "loss": {
        "alpha_c": 1.0,
        "alpha_np": 0.1,
        "alpha_occ": 1.0,
        "use_chamfer": True,
        "use_count": True,
        "use_occupancy": True,
        "chamfer_aggregate": "sum",
        "gt_cap": 100,
    },
    "optim": {
        "lr_start": 5e-5,
        "lr_peak": 5e-4,
        "lr_final": 1e-7,
        "warmup_iters": 1000,
        "beta1": 0.95,
        "beta2": 0.99,
        "weight_decay": 0.01,
        "eps": 1e-8,
        "batch_size": 4,
        "epochs": 200,
        "seed": 0,
        "checkpoint_every": 0,  # epochs between checkpoints; 0 = final only
        "max_steps": 0,  # 0 = run all epochs
    },
    "data": {
        "source": "synthetic",  # synthetic | dir
        "dir": "",
        "stride": 4,
        "n_scenes": 256,
        "scene_seed": 0,
        "ring_count": 3,
        "max_range": 18.0,
        "object_count": 4,
        "object_min_size": 0.6,
        "object_max_size": 2.0,
        "ground_z": -1.7,
        "ground_noise_sigma": 0.02,
        "points_per_ring": 384,
        "points_per_object": 120,
    },
}

PRESETS = {
    "paper": {},
    "tiny": {
        ("model", "d_model"): 32,
        ("model", "n_enc_layers"): 2,
        ("model", "n_dec_layers"): 1,
        ("model", "n_heads"): 2,
        ("model", "ffn_hidden"): 64,
        ("optim", "epochs"): 20,
        # about one decoy per masked voxel at desk scale, so the occupancy
        # head sees balanced labels instead of an all-empty shortcut
        ("mask", "empty_cap"): 256,
    },
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


def _parse_value(raw, default, where, problems):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        problems.append(f"{where}: expected a boolean, got {raw!r}")
        return default
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            problems.append(f"{where}: expected an integer, got {raw!r}")
            return default
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            problems.append(f"{where}: expected a number, got {raw!r}")
            return default
    if isinstance(default, tuple):
        try:
            return tuple(int(tok) for tok in raw.replace(",", " ").split())
        except ValueError:
            problems.append(f"{where}: expected a list of integers, got {raw!r}")
            return default
    return raw.strip()


def file_overrides(path):
    """Parse a config file into {(section, key): value} for the keys it sets."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    return _parser_overrides(parser, str(path))


def text_overrides(text, origin="<config>"):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"{origin}: {exc}"]) from exc
    return _parser_overrides(parser, origin)


def _parser_overrides(parser, origin):
    problems = []
    values = {}
    for section in parser.sections():
        if section not in DEFAULTS:
            problems.append(f"{origin}: unknown section [{section}]")
            continue
        for key, raw in parser.items(section):
            if key not in DEFAULTS[section]:
                problems.append(f"{origin}: unknown key {section}.{key}")
                continue
            values[(section, key)] = _parse_value(raw, DEFAULTS[section][key], f"{origin}: {section}.{key}", problems)
    if problems:
        raise ConfigError(problems)
    return values


class RunConfig:
    """Typed view over the section/key table; immutable by convention."""

    def __init__(self, values=None):
        self.values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        if values:
            for s, kv in values.items():
                self.values[s].update(kv)

    # -- construction ---------------------------------------------------

    @classmethod
    def from_file(cls, path):
        return cls().with_overrides(file_overrides(path))

    @classmethod
    def from_text(cls, text, origin="<config>"):
        return cls().with_overrides(text_overrides(text, origin))

    def with_overrides(self, overrides):
        """New config with {(section, key): value} applied."""
        merged = {s: dict(kv) for s, kv in self.values.items()}
        for (section, key), value in overrides.items():
            if section not in DEFAULTS or key not in DEFAULTS[section]:
                raise ConfigError([f"unknown key {section}.{key}"])
            merged[section][key] = value
        return RunConfig(merged)

    def with_preset(self, name):
        if name not in PRESETS:
            raise ConfigError([f"unknown preset {name!r} (choose from {sorted(PRESETS)})"])
        return self.with_overrides(PRESETS[name])

    # -- access ----------------------------------------------------------

    def get(self, section, key):
        return self.values[section][key]

    def to_text(self):
        out = io.StringIO()
        for section, kv in self.values.items():
            out.write(f"[{section}]\n")
            for key in DEFAULTS[section]:
                val = kv[key]
                if isinstance(val, tuple):
                    val = ",".join(str(v) for v in val)
                elif isinstance(val, bool):
                    val = "true" if val else "false"
                out.write(f"{key} = {val}\n")
            out.write("\n")
        return out.getvalue()

    def digest(self):
        """Architecture fingerprint over [grid] and [model]."""
        h = hashlib.sha256()
        for section in ("grid", "model"):
            for key in DEFAULTS[section]:
                h.update(f"{section}.{key}={self.values[section][key]!r};".encode())
        return h.hexdigest()[:12]

    # -- typed builders ---------------------------------------------------

    def grid(self):
        g = self.values["grid"]
        return GridConfig(
            voxel_size=(g["voxel_size_x"], g["voxel_size_y"], g["voxel_size_z"]),
            range_min=(g["range_min_x"], g["range_min_y"], g["range_min_z"]),
            range_max=(g["range_max_x"], g["range_max_y"], g["range_max_z"]),
        )

    def model_config(self):
        m = self.values["model"]
        return ModelConfig(
            d_model=m["d_model"],
            n_enc=m["n_enc_layers"],
            n_dec=m["n_dec_layers"],
            n_heads=m["n_heads"],
            ffn_hidden=m["ffn_hidden"],
            window_extent=(m["window_x"], m["window_y"]),
            levels_train=tuple(m["levels_train"]),
            levels_eval=tuple(m["levels_eval"]),
            n_points=m["n_points_predicted"],
            use_intensity=m["use_intensity"],
            pooling=m["pooling"],
            pos_embed=m["pos_embed"],
        )

    def loss_weights(self):
        lo = self.values["loss"]
        return LossWeights(alpha_c=lo["alpha_c"], alpha_np=lo["alpha_np"], alpha_occ=lo["alpha_occ"])

    def loss_toggles(self):
        lo = self.values["loss"]
        return LossToggles(chamfer=lo["use_chamfer"], count=lo["use_count"], occupancy=lo["use_occupancy"])

    def scene_spec(self, seed):
        d = self.values["data"]
        return SceneSpec(
            ring_count=d["ring_count"],
            max_range=d["max_range"],
            object_count=d["object_count"],
            object_min_size=d["object_min_size"],
            object_max_size=d["object_max_size"],
            ground_z=d["ground_z"],
            ground_noise_sigma=d["ground_noise_sigma"],
            points_per_ring=d["points_per_ring"],
            points_per_object=d["points_per_object"],
            seed=seed,
        )

    def validate(self):
        """Collect every structural problem; raise one ConfigError if any."""
        problems = []
        for build in (self.grid, self.model_config, self.loss_weights):
            try:
                build()
            except ConfigError as exc:
                problems.extend(exc.problems)
            except ValueError as exc:
                problems.append(str(exc))
        if not self.loss_toggles().any_enabled:
            problems.append("all loss terms disabled; enable at least one")
        mask = self.values["mask"]
        if not 0.0 <= mask["ratio"] <= 1.0:
            problems.append(f"mask.ratio must be in [0, 1], got {mask['ratio']}")
        if not 0.0 <= mask["empty_fraction"] <= 1.0:
            problems.append(f"mask.empty_fraction must be in [0, 1], got {mask['empty_fraction']}")
        if mask["empty_cap"] < 0:
            problems.append(f"mask.empty_cap must be >= 0, got {mask['empty_cap']}")
        o = self.values["optim"]
        if o["batch_size"] < 1:
            problems.append(f"optim.batch_size must be >= 1, got {o['batch_size']}")
        if o["epochs"] < 0:
            problems.append(f"optim.epochs must be >= 0, got {o['epochs']}")
        if not 0 < o["lr_peak"]:
            problems.append(f"optim.lr_peak must be > 0, got {o['lr_peak']}")
        d = self.values["data"]
        if d["source"] not in ("synthetic", "dir"):
            problems.append(f"data.source must be synthetic or dir, got {d['source']!r}")
        if d["source"] == "dir" and not d["dir"]:
            problems.append("data.source = dir requires data.dir")
        if d["source"] == "synthetic":
            try:
                self.scene_spec(0)
            except ValueError as exc:
                problems.append(str(exc))
        if d["n_scenes"] < o["batch_size"]:
            problems.append(f"data.n_scenes ({d['n_scenes']}) smaller than batch size ({o['batch_size']})")
        lo = self.values["loss"]
        if lo["chamfer_aggregate"] not in ("sum", "mean"):
            problems.append(f"loss.chamfer_aggregate must be sum or mean, got {lo['chamfer_aggregate']!r}")
        if lo["gt_cap"] < 1:
            problems.append(f"loss.gt_cap must be >= 1, got {lo['gt_cap']}")
        if problems:
            raise ConfigError(problems)
        return self
