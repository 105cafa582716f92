"""Procedural labelled scenes and the scene / PLY file formats."""
from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, GenerationError
from .geometry import NO_INSTANCE, PointCloud

PRIMITIVES = ("box", "cylinder", "sphere", "lshape")
CLASS_COLORS = {
    "box": (0.80, 0.25, 0.20),
    "cylinder": (0.20, 0.60, 0.85),
    "sphere": (0.90, 0.75, 0.15),
    "lshape": (0.35, 0.75, 0.30),
}
FLOOR_COLOR = (0.45, 0.42, 0.40)


@dataclass
class SceneSpec:
    seed: int = 0
    extent: float = 7.0
    palette: tuple = PRIMITIVES
    instance_count: tuple = (3, 5)
    points_per_instance: tuple = (150, 300)
    floor_density: float = 25.0  # points per square metre
    color_noise: float = 0.03
    label_noise: float = 0.0
    min_gap: float = 1.0
    max_retries: int = 200

    def __post_init__(self):
        self.palette = tuple(self.palette)
        self.instance_count = tuple(self.instance_count)
        self.points_per_instance = tuple(self.points_per_instance)
        if self.extent <= 0:
            raise ConfigError("scene extent must be positive")
        lo, hi = self.instance_count
        if lo < 0 or hi < lo:
            raise ConfigError("instance count range is empty")
        plo, phi = self.points_per_instance
        if plo < 30 or phi < plo:
            raise ConfigError("points per instance must be a range with minimum >= 30")
        unknown = set(self.palette) - set(PRIMITIVES)
        if unknown or not self.palette:
            raise ConfigError(f"unknown primitives {sorted(unknown)}")
        if not 0 <= self.label_noise < 1:
            raise ConfigError("label_noise must be in [0, 1)")

    @property
    def num_classes(self) -> int:
        return len(self.palette)


# ------------------------------------------------------------------ primitive surfaces


def _box_surface(rng, n, half):
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=(n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    u[np.arange(n), axis] = sign * half[axis]
    return u


def _cylinder_surface(rng, n, radius, half_h):
    side = 2 * np.pi * radius * 2 * half_h
    cap = np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(part == 0, rng.uniform(-half_h, half_h, size=n), np.where(part == 1, -half_h, half_h))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _sphere_surface(rng, n, radius):
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _inside_box(p, centre, half):
    return np.all(np.abs(p - centre) < half - 1e-9, axis=1)


def _lshape_surface(rng, n, half):
    # two boxes sharing a corner region; keep only points on the union's surface
    a_half = half.copy()
    b_half = np.array([half[0] / 2, half[1], half[2] * 2])
    a_c = np.zeros(3)
    b_c = np.array([-half[0] + b_half[0], 0.0, -half[2] + b_half[2]])
    out = np.zeros((0, 3))
    while len(out) < n:
        pa = _box_surface(rng, n, a_half) + a_c
        pb = _box_surface(rng, n, b_half) + b_c
        pa = pa[~_inside_box(pa, b_c, b_half)]
        pb = pb[~_inside_box(pb, a_c, a_half)]
        out = np.concatenate([out, pa, pb])
    return out[rng.permutation(len(out))[:n]]


def _make_instance(rng, kind, n):
    """Surface samples resting on z = 0 and the footprint radius."""
    if kind == "box":
        half = rng.uniform(0.3, 0.6, size=3)
        pts = _box_surface(rng, n, half) + [0, 0, half[2]]
        radius = np.hypot(half[0], half[1])
    elif kind == "cylinder":
        radius = rng.uniform(0.25, 0.45)
        hh = rng.uniform(0.3, 0.6)
        pts = _cylinder_surface(rng, n, radius, hh) + [0, 0, hh]
    elif kind == "sphere":
        radius = rng.uniform(0.3, 0.5)
        pts = _sphere_surface(rng, n, radius) + [0, 0, radius]
    elif kind == "lshape":
        half = np.array([rng.uniform(0.35, 0.55), rng.uniform(0.2, 0.35), rng.uniform(0.15, 0.25)])
        pts = _lshape_surface(rng, n, half)
        pts[:, 2] -= pts[:, 2].min()
        radius = np.hypot(half[0], half[1])
    else:
        raise GenerationError(f"unknown primitive {kind}")
    return pts, float(radius)


def generate_scene(spec: SceneSpec, seed: int | None = None) -> PointCloud:
    """Objects on a floor plane; semantic ids index ``spec.palette``, the floor gets ``num_classes``.

    Floor points carry ``NO_INSTANCE``.  Instance ids are dense from 0.
    """
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    lo, hi = spec.instance_count
    count = int(rng.integers(lo, hi + 1))
    kinds = [int(rng.integers(len(spec.palette))) for _ in range(count)]
    if count >= 2:
        kinds[1] = kinds[0]
    shapes = []
    for k in kinds:
        n = int(rng.integers(spec.points_per_instance[0], spec.points_per_instance[1] + 1))
        pts, radius = _make_instance(rng, spec.palette[k], n)
        if 2 * (radius + 0.05) > spec.extent:
            raise GenerationError("object does not fit into the scene extent")
        shapes.append((pts, radius))
    # place largest first; restart the whole layout when an object does not fit
    by_size = sorted(range(count), key=lambda i: -shapes[i][1])
    for _ in range(spec.max_retries):
        centres = [None] * count
        for i in by_size:
            radius = shapes[i][1]
            margin = radius + 0.05
            for _ in range(50):
                c = rng.uniform(margin, spec.extent - margin, size=2)
                if all(np.hypot(*(c - centres[j])) >= radius + shapes[j][1] + spec.min_gap
                       for j in by_size if centres[j] is not None):
                    centres[i] = c
                    break
            else:
                break
        if all(c is not None for c in centres):
            break
    else:
        raise GenerationError(f"could not place {count} objects after {spec.max_retries} retries")
    radii = [r for _, r in shapes]
    clouds = [pts + [c[0], c[1], 0.0] for (pts, _), c in zip(shapes, centres)]

    n_floor = int(round(spec.floor_density * spec.extent**2))
    floor = np.column_stack([rng.uniform(0, spec.extent, size=(n_floor, 2)), np.zeros(n_floor)])
    keep = np.ones(n_floor, dtype=bool)
    for c, r in zip(centres, radii):
        keep &= np.hypot(floor[:, 0] - c[0], floor[:, 1] - c[1]) > r
    floor = floor[keep]

    positions = [floor] + clouds
    sem = [np.full(len(floor), spec.num_classes)] + [np.full(len(p), k) for p, k in zip(clouds, kinds)]
    inst = [np.full(len(floor), NO_INSTANCE)] + [np.full(len(p), i) for i, p in enumerate(clouds)]
    base = [np.tile(FLOOR_COLOR, (len(floor), 1))] + [np.tile(CLASS_COLORS[spec.palette[k]], (len(p), 1))
                                                       for p, k in zip(clouds, kinds)]
    positions = np.concatenate(positions)
    colors = np.clip(np.concatenate(base) + rng.normal(0, spec.color_noise, size=(len(positions), 3)), 0, 1)
    sem = np.concatenate(sem).astype(np.int64)
    inst = np.concatenate(inst).astype(np.int64)
    if spec.label_noise > 0:
        flip = (inst != NO_INSTANCE) & (rng.uniform(size=len(inst)) < spec.label_noise)
        inst[flip] = NO_INSTANCE
        sem[flip] = spec.num_classes
    return PointCloud(positions, colors, sem, inst)


# ------------------------------------------------------------------ scene file

SCENE_MAGIC = b"M3DSCENE"
SCENE_VERSION = 1
SCENE_FIELDS = ("x", "y", "z", "r", "g", "b", "semantic_id", "instance_id")
RECORD = np.dtype([("pos", "<f8", 3), ("col", "<f8", 3), ("sem", "<i4"), ("inst", "<i4")])
_HEADER = struct.Struct("<8sHHQI")  # magic, version, flags, N, C


@dataclass
class SceneFile:
    cloud: PointCloud
    num_classes: int
    version: int = SCENE_VERSION
    fields: tuple = field(default=SCENE_FIELDS)


def save_scene(path, cloud: PointCloud, num_classes: int) -> None:
    """Little-endian binary: fixed header, field-name list, then one 56-byte record per point."""
    flags = (cloud.semantic_id is not None) | (cloud.instance_id is not None) << 1
    names = ",".join(SCENE_FIELDS).encode("ascii")
    rec = np.zeros(len(cloud), dtype=RECORD)
    rec["pos"] = cloud.positions
    rec["col"] = cloud.colors
    if cloud.semantic_id is not None:
        rec["sem"] = cloud.semantic_id
    if cloud.instance_id is not None:
        rec["inst"] = cloud.instance_id
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, flags, len(cloud), num_classes))
        fh.write(struct.pack("<H", len(names)))
        fh.write(names)
        fh.write(rec.tobytes())


def load_scene(path) -> SceneFile:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 2:
        raise FormatError(f"{path}: truncated header")
    magic, version, flags, n, c = _HEADER.unpack_from(raw)
    if magic != SCENE_MAGIC:
        raise FormatError(f"{path}: not a scene file")
    if version != SCENE_VERSION:
        raise FormatError(f"{path}: scene format version {version}, expected {SCENE_VERSION}")
    (nlen,) = struct.unpack_from("<H", raw, _HEADER.size)
    start = _HEADER.size + 2
    names = tuple(raw[start : start + nlen].decode("ascii").split(","))
    if names != SCENE_FIELDS:
        raise FormatError(f"{path}: unexpected field list {names}")
    body = start + nlen
    if len(raw) != body + n * RECORD.itemsize:
        raise FormatError(f"{path}: expected {n} records, file size does not match")
    rec = np.frombuffer(raw, dtype=RECORD, count=n, offset=body)
    cloud = PointCloud(
        rec["pos"].astype(np.float64),
        rec["col"].astype(np.float64),
        rec["sem"].astype(np.int64) if flags & 1 else None,
        rec["inst"].astype(np.int64) if flags & 2 else None,
    )
    return SceneFile(cloud, int(c), version, names)


# ------------------------------------------------------------------ PLY export

UNASSIGNED_COLOR = (128, 128, 128)


def instance_color(index: int) -> tuple:
    """Deterministic saturated color for an instance index (never gray)."""
    hue = (index * 0.6180339887498949) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def export_ply(path, cloud: PointCloud, instances: list, comments: tuple = ()) -> None:
    """ASCII PLY; each instance gets its palette color, uncovered points stay gray."""
    colors = np.tile(np.array(UNASSIGNED_COLOR, dtype=np.int64), (len(cloud), 1))
    for i, inst in enumerate(instances):
        colors[np.asarray(inst.point_mask, dtype=bool)] = instance_color(i)
    header = (
        "ply\nformat ascii 1.0\n"
        + "".join(f"comment {c}\n" for c in comments)
        + f"element vertex {len(cloud)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    body = "\n".join(
        f"{x!r} {y!r} {z!r} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(cloud.positions.tolist(), colors.tolist())
    )
    try:
        Path(path).write_text(header + body + "\n")
    except OSError as exc:
        raise OSError(f"cannot write PLY to {path}: {exc.strerror or exc}") from exc


def read_ply(path) -> tuple:
    """Parse an ASCII PLY written by ``export_ply``; returns (positions, colors uint8)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n = None
    end = None
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line == "end_header":
            end = i
            break
    if n is None or end is None:
        raise FormatError(f"{path}: incomplete PLY header")
    rows = [line.split() for line in lines[end + 1 : end + 1 + n]]
    if len(rows) != n:
        raise FormatError(f"{path}: expected {n} vertices, found {len(rows)}")
    pos = np.array([[float(v) for v in r[:3]] for r in rows]).reshape(-1, 3)
    col = np.array([[int(v) for v in r[3:6]] for r in rows], dtype=np.uint8).reshape(-1, 3)
    return pos, col
