"""Procedural shapes, view-based occlusion, dataset splits and point-cloud I/O.

Shapes are sampled uniformly on the surface of simple primitives, centered
and scaled into the unit ball. A partial view keeps the points closest to a
viewpoint, so the visible ratio is exact up to rounding.

All randomness flows from numpy's PCG64 generator seeded with
``SeedSequence([master_seed, instance_id])``; the output is therefore
reproducible per instance regardless of generation order.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import PointCloudParseError
from .geom import as_points

KINDS = ("sphere", "cuboid", "cylinder", "composite")


@dataclass
class ShapeSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    n_points: int = 2048

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.n_points < 64:
            raise ValueError("n_points must be >= 64")
        for k, v in self.params.items():
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"shape parameter {k}={v!r} must be a positive number")


@dataclass
class SamplePair:
    partial: np.ndarray
    complete: np.ndarray
    category: str
    visible_ratio: float
    instance_id: int
    frame_id: int = 0
    seed: int = 0


def random_spec(kind: str, seed: int, n_points: int = 2048) -> ShapeSpec:
    """Draw per-instance dimensions for a primitive of the given kind."""
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        params = {"radius": 1.0}
    elif kind == "cuboid":
        sx, sy, sz = rng.uniform(0.3, 1.0, size=3)
        params = {"sx": sx, "sy": sy, "sz": sz}
    elif kind == "cylinder":
        params = {"radius": rng.uniform(0.2, 0.6), "height": rng.uniform(0.6, 2.0)}
    elif kind == "composite":
        # a flat slab (table top) on a central post
        params = {"top_w": rng.uniform(0.6, 1.0), "top_d": rng.uniform(0.6, 1.0),
                  "top_h": rng.uniform(0.05, 0.15), "post_r": rng.uniform(0.05, 0.15),
                  "post_h": rng.uniform(0.5, 1.0)}
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return ShapeSpec(kind, {k: float(v) for k, v in params.items()}, seed, n_points)


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box_surface(rng, n, half):
    """Uniform samples on the surface of an axis-aligned box with half-extents ``half``."""
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * np.asarray(half)
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * np.asarray(half)[axis]
    return pts


def _cylinder_surface(rng, n, radius, height, center=(0.0, 0.0, 0.0)):
    """Closed cylinder with its axis along y."""
    side = 2 * math.pi * radius * height
    cap = math.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * math.pi, size=n)
    # sqrt for area-uniform radius on the caps
    r = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, size=n)))
    y = np.where(part == 0, rng.uniform(-height / 2, height / 2, size=n),
                 np.where(part == 1, height / 2, -height / 2))
    pts = np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)
    return pts + np.asarray(center)


def gen_shape(spec: ShapeSpec) -> np.ndarray:
    """``spec.n_points`` surface samples, centered, scaled to max radius 1."""
    rng = np.random.default_rng(spec.seed)
    n, p = spec.n_points, spec.params
    if spec.kind == "sphere":
        pts = _unit_vectors(rng, n) * p.get("radius", 1.0)
        center = np.zeros(3)
    elif spec.kind == "cuboid":
        pts = _box_surface(rng, n, (p["sx"], p["sy"], p["sz"]))
        center = np.zeros(3)
    elif spec.kind == "cylinder":
        pts = _cylinder_surface(rng, n, p["radius"], p["height"])
        center = np.zeros(3)
    else:
        top_half = (p["top_w"], p["top_h"] / 2, p["top_d"])
        top_area = 8 * (top_half[0] * top_half[1] + top_half[1] * top_half[2] + top_half[0] * top_half[2])
        post_area = 2 * math.pi * p["post_r"] * p["post_h"] + 2 * math.pi * p["post_r"] ** 2
        n_top = int(round(n * top_area / (top_area + post_area)))
        n_top = min(max(n_top, 1), n - 1)
        top = _box_surface(rng, n_top, top_half) + np.array([0.0, p["post_h"] + top_half[1], 0.0])
        post = _cylinder_surface(rng, n - n_top, p["post_r"], p["post_h"], (0.0, p["post_h"] / 2, 0.0))
        pts = np.concatenate([top, post])
        # analytic bounding-box center
        center = np.array([0.0, (p["post_h"] + p["top_h"]) / 2, 0.0])
    pts = pts - center
    return pts / np.max(np.linalg.norm(pts, axis=1))


def occlude(complete, visible_ratio: float, viewpoint) -> np.ndarray:
    """Keep the ``round(visible_ratio * N)`` points nearest to ``viewpoint``.

    Equivalent to growing a visibility ball around the viewpoint until it
    holds the requested count; ties are broken by point index. The kept
    points are returned in their original order.
    """
    pts = as_points(complete)
    if not 0 < visible_ratio <= 1:
        raise ValueError(f"visible_ratio must be in (0, 1], got {visible_ratio}")
    n_keep = max(1, int(round(visible_ratio * len(pts))))
    d2 = np.sum((pts - np.asarray(viewpoint, dtype=np.float64)) ** 2, axis=1)
    keep = np.sort(np.argsort(d2, kind="stable")[:n_keep])
    return pts[keep]


def pcn_viewpoints(distance: float = 2.0) -> np.ndarray:
    """The eight cube-corner directions, scaled to ``distance``."""
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    return corners / math.sqrt(3.0) * distance


def random_viewpoint(rng, distance: float = 2.0) -> np.ndarray:
    return _unit_vectors(rng, 1)[0] * distance


def frame_viewpoints(n_frames: int, start_deg: float = 0.0, step_deg: float = 10.0,
                     elevation_deg: float = 30.0, distance: float = 2.0) -> np.ndarray:
    """Viewpoints rotating about the vertical (y) axis in ``step_deg`` steps."""
    az = np.deg2rad(start_deg + step_deg * np.arange(n_frames))
    el = math.radians(elevation_deg)
    return distance * np.stack([math.cos(el) * np.cos(az), np.full(n_frames, math.sin(el)),
                                math.cos(el) * np.sin(az)], axis=1)


def make_frames(complete, visible_ratio: float, n_frames: int, instance_id: int = 0, category: str = "",
                start_deg: float = 0.0, step_deg: float = 10.0) -> list[SamplePair]:
    """Consecutive partial scans of one instance from a rotating viewpoint."""
    return [SamplePair(occlude(complete, visible_ratio, vp), np.asarray(complete), category,
                       visible_ratio, instance_id, f)
            for f, vp in enumerate(frame_viewpoints(n_frames, start_deg, step_deg))]


@dataclass
class DatasetConfig:
    mode: str = "c3d"  # "c3d": one partial per shape; "pcn": eight
    categories: tuple = KINDS
    shapes: int = 128  # total instances, spread round-robin over categories
    n_points: int = 2048
    visible_ratio: Union[float, tuple] = 0.5  # a number, or (lo, hi) drawn uniformly per pair
    seed: int = 0
    val_frac: float = 0.125
    test_frac: float = 0.125

    def __post_init__(self):
        self.categories = tuple(self.categories)
        if self.mode not in ("c3d", "pcn"):
            raise ValueError(f"mode must be 'c3d' or 'pcn', got {self.mode!r}")
        self.visible_ratio = check_ratio(self.visible_ratio)
        if self.shapes < 1:
            raise ValueError("shapes must be >= 1")
        for c in self.categories:
            if c not in KINDS:
                raise ValueError(f"unknown category {c!r}")
        if self.val_frac < 0 or self.test_frac < 0 or self.val_frac + self.test_frac >= 1:
            raise ValueError("val_frac and test_frac must be >= 0 and sum below 1")


    def ratio_for(self, seed: int, frame_id: int) -> float:
        if isinstance(self.visible_ratio, tuple):
            lo, hi = self.visible_ratio
            return float(np.random.default_rng([seed, 2, frame_id]).uniform(lo, hi))
        return self.visible_ratio


def check_ratio(value):
    """Validate a visible ratio: a number in (0, 1] or an increasing (lo, hi) pair inside it."""
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ValueError(f"visible_ratio range must be (lo, hi), got {value!r}")
        lo, hi = (check_ratio(v) for v in value)
        if lo > hi:
            raise ValueError(f"visible_ratio range must have lo <= hi, got {value!r}")
        return (lo, hi) if lo < hi else lo
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0 < value <= 1:
        raise ValueError(f"visible_ratio must be in (0, 1], got {value!r}")
    return float(value)


def instance_seed(master: int, instance_id: int) -> int:
    return int(np.random.SeedSequence([master, instance_id]).generate_state(1, np.uint32)[0])


def make_instance(config: DatasetConfig, instance_id: int) -> list[SamplePair]:
    category = config.categories[instance_id % len(config.categories)]
    seed = instance_seed(config.seed, instance_id)
    complete = gen_shape(random_spec(category, seed, config.n_points))
    if config.mode == "pcn":
        views = pcn_viewpoints()
    else:
        views = [random_viewpoint(np.random.default_rng([seed, 1]))]
    pairs = []
    for f, vp in enumerate(views):
        ratio = config.ratio_for(seed, f)
        pairs.append(SamplePair(occlude(complete, ratio, vp), complete, category, ratio, instance_id, f, seed))
    return pairs


def _split_count(frac: float, n: int) -> int:
    """Half-up rounding, but at least one held-out instance when a category has three or more."""
    k = math.floor(frac * n + 0.5)
    return max(k, 1) if frac > 0 and n >= 3 else k


def split_ids(config: DatasetConfig) -> dict[str, list[int]]:
    """Assign instance ids to train/val/test, stratified by category."""
    rng = np.random.default_rng([config.seed, 7])
    out = {"train": [], "val": [], "test": []}
    n_cat = len(config.categories)
    for c in range(n_cat):
        ids = np.arange(c, config.shapes, n_cat)
        ids = ids[rng.permutation(len(ids))]
        n_val = _split_count(config.val_frac, len(ids))
        n_test = _split_count(config.test_frac, len(ids))
        out["val"] += ids[:n_val].tolist()
        out["test"] += ids[n_val:n_val + n_test].tolist()
        out["train"] += ids[n_val + n_test:].tolist()
    return {k: sorted(v) for k, v in out.items()}


def make_dataset(config: DatasetConfig) -> dict[str, list[SamplePair]]:
    """Build disjoint train/val/test splits of sample pairs."""
    return {split: [p for i in ids for p in make_instance(config, i)]
            for split, ids in split_ids(config).items()}


def unique_completes(pairs: Sequence[SamplePair]) -> list[SamplePair]:
    seen = {}
    for p in pairs:
        seen.setdefault(p.instance_id, p)
    return list(seen.values())


# Point-cloud files.
#   text (.xyz): one "x y z" line per point, 9 significant digits
#   binary (.xyzb): 16-byte header - magic b"XYZB", u32 version (1),
#   u64 point count - then count * 3 little-endian float32 values
BIN_MAGIC = b"XYZB"
BIN_VERSION = 1


def write_xyz(path, cloud, binary: Optional[bool] = None):
    path = Path(path)
    pts = as_points(cloud)
    if binary is None:
        binary = path.suffix == ".xyzb"
    if binary:
        with open(path, "wb") as f:
            f.write(BIN_MAGIC + struct.pack("<IQ", BIN_VERSION, len(pts)))
            f.write(np.ascontiguousarray(pts, dtype="<f4").tobytes())
    else:
        with open(path, "w", newline="\n") as f:
            for x, y, z in pts.tolist():
                f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_xyz(path, binary: Optional[bool] = None) -> np.ndarray:
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".xyzb"
    if binary:
        buf = path.read_bytes()
        if len(buf) < 16 or buf[:4] != BIN_MAGIC:
            raise PointCloudParseError(path, 0, "missing binary header")
        version, count = struct.unpack_from("<IQ", buf, 4)
        if version != BIN_VERSION:
            raise PointCloudParseError(path, 0, f"unsupported version {version}")
        if count == 0 or len(buf) != 16 + 12 * count:
            raise PointCloudParseError(path, 0, f"record count {count} does not match file size")
        pts = np.frombuffer(buf, dtype="<f4", offset=16).reshape(count, 3).astype(np.float64)
        bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
        if len(bad):
            raise PointCloudParseError(path, int(bad[0]) + 1, "non-finite coordinate in record")
        return pts
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            tok = line.split()
            if len(tok) != 3:
                raise PointCloudParseError(path, lineno, f"expected 3 values, got {len(tok)}")
            try:
                vals = [float(t) for t in tok]
            except ValueError:
                raise PointCloudParseError(path, lineno, f"not a number in {line.strip()!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise PointCloudParseError(path, lineno, "non-finite coordinate")
            rows.append(vals)
    if not rows:
        raise PointCloudParseError(path, 0, "file contains no points")
    return np.array(rows, dtype=np.float64)


# Dataset directory layout:
#   <root>/<split>/<category>/<instance>_<frame>.partial.xyz
#   <root>/<split>/<category>/<instance>_<frame>.complete.xyz
#   <root>/manifest.csv with MANIFEST_FIELDS; paths relative to <root>
MANIFEST_FIELDS = ("split", "category", "instance_id", "frame_id", "visible_ratio", "seed",
                   "n_partial", "n_complete", "partial", "complete")


def write_dataset(root, dataset: dict[str, list[SamplePair]]):
    root = Path(root)
    rows = []
    for split in ("train", "val", "test"):
        for p in dataset.get(split, []):
            stem = Path(split) / p.category / f"{p.instance_id:05d}_{p.frame_id:02d}"
            part_rel = stem.with_name(stem.name + ".partial.xyz")
            comp_rel = stem.with_name(stem.name + ".complete.xyz")
            (root / stem).parent.mkdir(parents=True, exist_ok=True)
            write_xyz(root / part_rel, p.partial)
            write_xyz(root / comp_rel, p.complete)
            rows.append({"split": split, "category": p.category, "instance_id": p.instance_id,
                         "frame_id": p.frame_id, "visible_ratio": repr(p.visible_ratio), "seed": p.seed,
                         "n_partial": len(p.partial), "n_complete": len(p.complete),
                         "partial": part_rel.as_posix(), "complete": comp_rel.as_posix()})
    with open(root / "manifest.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def load_dataset(root) -> dict[str, list[SamplePair]]:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv in {root}")
    out: dict[str, list[SamplePair]] = {"train": [], "val": [], "test": []}
    completes: dict[str, np.ndarray] = {}
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            comp = completes.get(row["complete"])
            if comp is None:
                comp = completes[row["complete"]] = read_xyz(root / row["complete"])
            out.setdefault(row["split"], []).append(SamplePair(
                read_xyz(root / row["partial"]), comp, row["category"], float(row["visible_ratio"]),
                int(row["instance_id"]), int(row["frame_id"]), int(row["seed"])))
    return out
