"""Point cloud model, raw binary I/O, and a synthetic lidar-scene generator.

File format: headerless little-endian float32 records with stride 3, 4, or 5
(x, y, z[, intensity[, ring]]); the ring field is read and discarded. The
generator builds desk-scale stand-ins for automotive scans: concentric ground
rings plus box-shaped objects with surface-sampled points.
"""

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


class PointCloud:
    """Ordered points with optional per-point intensity."""

    def __init__(self, xyz, intensity=None, source=""):
        xyz = np.ascontiguousarray(xyz, dtype=np.float32).reshape(-1, 3)
        if not np.isfinite(xyz).all():
            bad = int(np.argmin(np.isfinite(xyz).all(axis=1)))
            raise ValueError(f"non-finite coordinate at record {bad}")
        self.xyz = xyz
        if intensity is not None:
            intensity = np.ascontiguousarray(intensity, dtype=np.float32).reshape(-1)
            if intensity.shape[0] != xyz.shape[0]:
                raise ValueError(f"intensity length {intensity.shape[0]} != point count {xyz.shape[0]}")
        self.intensity = intensity
        self.source = source

    @property
    def has_intensity(self):
        return self.intensity is not None

    def __len__(self):
        return self.xyz.shape[0]

    def __repr__(self):
        return f"PointCloud(n={len(self)}, intensity={self.has_intensity}, source={self.source!r})"


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for one synthetic scene; a pure function of these plus the seed."""

    ring_count: int = 12
    max_range: float = 50.0
    object_count: int = 8
    object_min_size: float = 0.6
    object_max_size: float = 3.0
    ground_z: float = 0.0
    ground_noise_sigma: float = 0.02
    points_per_ring: int = 256
    points_per_object: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.ring_count < 1:
            raise ValueError(f"ring_count must be >= 1, got {self.ring_count}")
        if self.max_range <= 0:
            raise ValueError(f"max_range must be > 0, got {self.max_range}")
        if not 0 < self.object_min_size <= self.object_max_size:
            raise ValueError("object size range must satisfy 0 < min <= max")


def load_bin(path, floats_per_point):
    """Decode a headerless little-endian float32 point file."""
    if floats_per_point not in (3, 4, 5):
        raise ValueError(f"floats_per_point must be 3, 4, or 5, got {floats_per_point}")
    with open(path, "rb") as fh:
        raw = fh.read()
    stride_bytes = floats_per_point * 4
    if len(raw) % stride_bytes != 0:
        offset = len(raw) - len(raw) % stride_bytes
        raise ValueError(f"truncated point file {path}: trailing partial record at byte offset {offset}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(-1, floats_per_point)
    xyz = arr[:, :3]
    if xyz.size and not np.isfinite(xyz).all():
        bad = int(np.argmin(np.isfinite(xyz).all(axis=1)))
        raise ValueError(f"non-finite coordinate at record {bad} in {path}")
    intensity = arr[:, 3].copy() if floats_per_point >= 4 else None
    return PointCloud(xyz.copy(), intensity, source=str(path))


def save_bin(cloud, path):
    """Inverse of load_bin; stride is 4 with intensity, 3 without."""
    n = len(cloud)
    stride = 4 if cloud.has_intensity else 3
    arr = np.empty((n, stride), dtype="<f4")
    arr[:, :3] = cloud.xyz
    if cloud.has_intensity:
        arr[:, 3] = cloud.intensity
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())


def generate_scene(spec):
    """Deterministic synthetic scan: ground rings plus boxes, all inside max_range."""
    rng = np.random.default_rng(spec.seed & _MASK64)
    xs, ys, zs, its = [], [], [], []

    for i in range(spec.ring_count):
        radius = (i + 1) * spec.max_range / spec.ring_count
        n = spec.points_per_ring
        phase = rng.uniform(0.0, 2.0 * np.pi)
        theta = phase + np.arange(n) * (2.0 * np.pi / n)
        xs.append(radius * np.cos(theta))
        ys.append(radius * np.sin(theta))
        if spec.ground_noise_sigma > 0:
            zs.append(spec.ground_z + rng.normal(0.0, spec.ground_noise_sigma, n))
        else:
            zs.append(np.full(n, spec.ground_z))
        its.append(rng.uniform(0.05, 0.4, n))

    for _ in range(spec.object_count):
        w, l, h = rng.uniform(spec.object_min_size, spec.object_max_size, 3)
        margin = np.hypot(w, l) / 2.0 + 0.5
        r_hi = max(spec.max_range - margin, 2.0)
        rc = rng.uniform(min(2.0, r_hi), r_hi)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        cx, cy = rc * np.cos(ang), rc * np.sin(ang)
        n = spec.points_per_object
        # visible faces only: top plus four sides, picked by area
        areas = np.array([w * l, w * h, w * h, l * h, l * h])
        face = rng.choice(5, size=n, p=areas / areas.sum())
        u = rng.uniform(-0.5, 0.5, n)
        v = rng.uniform(0.0, 1.0, n)
        px = np.empty(n)
        py = np.empty(n)
        pz = np.empty(n)
        top = face == 0
        px[top] = u[top] * w
        py[top] = (v[top] - 0.5) * l
        pz[top] = spec.ground_z + h
        for f, (sx, sy) in ((1, (0, -0.5)), (2, (0, 0.5)), (3, (-0.5, 0)), (4, (0.5, 0))):
            m = face == f
            if sx == 0:
                px[m] = u[m] * w
                py[m] = sy * l
            else:
                px[m] = sx * w
                py[m] = u[m] * l
            pz[m] = spec.ground_z + v[m] * h
        xs.append(cx + px)
        ys.append(cy + py)
        zs.append(pz)
        its.append(rng.uniform(0.4, 0.9, n))

    xyz = np.stack([np.concatenate(xs), np.concatenate(ys), np.concatenate(zs)], axis=1).astype(np.float32)
    intensity = np.concatenate(its).astype(np.float32)
    # range guard on the stored float32 values, so the bound holds exactly
    r2 = xyz[:, 0].astype(np.float64) ** 2 + xyz[:, 1].astype(np.float64) ** 2
    keep = r2 <= float(spec.max_range) ** 2
    return PointCloud(xyz[keep], intensity[keep], source=f"synthetic:{spec.seed}")


def crop_to_range(cloud, range_min, range_max):
    """Keep points with range_min <= p < range_max per axis (half-open)."""
    lo = np.asarray(range_min, dtype=np.float32)
    hi = np.asarray(range_max, dtype=np.float32)
    if not np.all(lo < hi):
        raise ValueError(f"invalid crop range: min {lo.tolist()} not < max {hi.tolist()}")
    keep = np.all((cloud.xyz >= lo) & (cloud.xyz < hi), axis=1)
    intensity = cloud.intensity[keep] if cloud.has_intensity else None
    return PointCloud(cloud.xyz[keep], intensity, source=cloud.source)


def save_ply(cloud, path):
    """ASCII PLY with x y z and, when present, intensity."""
    n = len(cloud)
    props = ["property float x", "property float y", "property float z"]
    if cloud.has_intensity:
        props.append("property float intensity")
    header = "\n".join(
        ["ply", "format ascii 1.0", f"element vertex {n}"] + props + ["end_header"]
    )
    if cloud.has_intensity:
        body = np.column_stack([cloud.xyz, cloud.intensity])
    else:
        body = cloud.xyz
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in body:
            fh.write(" ".join(f"{v:.6g}" for v in row) + "\n")


def load_ply(path):
    """Read back the ASCII PLY subset written by save_ply."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    props = []
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property"):
            props.append(line.split()[-1])
        elif line == "end_header":
            body = lines[i + 1 : i + 1 + n]
            break
    else:
        raise ValueError(f"{path}: missing end_header")
    data = np.array([[float(v) for v in row.split()] for row in body], dtype=np.float32)
    data = data.reshape(n, len(props))
    cols = {p: data[:, j] for j, p in enumerate(props)}
    xyz = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    return PointCloud(xyz, cols.get("intensity"), source=str(path))
