"""Synthetic 4D radar frames with ground-truth vehicle boxes.

Vehicles are Sedan-sized boxes resting on the ground plane. Their returns
sit on or inside the box with high lognormal power; clutter is spread
uniformly over the region of interest with a lower-mean lognormal power,
so that strongest-return filtering removes clutter first but not
perfectly.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import Box3D, rotated_iou_bev
from .points import RadarPointCloud, load_point_cloud, save_point_cloud

MANIFEST_HEADER = ("frame_file", "cx", "cy", "cz", "l", "w", "h", "yaw")


@dataclass(frozen=True)
class SceneConfig:
    x_range: tuple[float, float] = (0.0, 51.2)
    y_range: tuple[float, float] = (-25.6, 25.6)
    z_range: tuple[float, float] = (-2.0, 6.0)
    ground_z: float = 0.0
    vehicles: tuple[int, int] = (1, 4)
    length: tuple[float, float] = (4.5, 0.25)  # mean, std
    width: tuple[float, float] = (1.9, 0.1)
    height: tuple[float, float] = (1.6, 0.1)
    points_per_vehicle: tuple[int, int] = (60, 160)
    noise_fraction: float = 0.5
    noise_points_empty: int = 200
    surface_fraction: float = 0.7
    target_power: tuple[float, float] = (2.0, 0.7)  # lognormal mu, sigma
    noise_power: tuple[float, float] = (0.3, 0.9)
    doppler_range: float = 15.0
    edge_margin: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ValueError("noise_fraction must be in [0, 1)")
        if not 0.0 <= self.surface_fraction <= 1.0:
            raise ValueError("surface_fraction must be in [0, 1]")
        lo, hi = self.vehicles
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid vehicle count range {self.vehicles}")
        lo, hi = self.points_per_vehicle
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid points-per-vehicle range {self.points_per_vehicle}")
        for name in ("x_range", "y_range", "z_range"):
            a, b = getattr(self, name)
            if not b > a:
                raise ValueError(f"{name}: max must exceed min")

    def check_inside(self, grid) -> None:
        """Raise unless the scene ROI lies within a voxel grid's bounds."""
        for name in ("x_range", "y_range", "z_range"):
            a, b = getattr(self, name)
            ga, gb = getattr(grid, name)
            if a < ga or b > gb:
                raise ValueError(f"scene {name} {(a, b)} exceeds voxel grid {(ga, gb)}")


@dataclass
class LabeledFrame:
    cloud: RadarPointCloud
    gts: list[Box3D]
    is_noise: np.ndarray = field(repr=False, default=None)  # bool per point
    owner: np.ndarray = field(repr=False, default=None)  # gt index per point, -1 for clutter

    @property
    def noise_fraction(self) -> float:
        return float(self.is_noise.mean()) if len(self.is_noise) else 0.0


def frame_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF, int(index)])


def _place_boxes(cfg: SceneConfig, rng, count: int) -> list[Box3D]:
    boxes: list[Box3D] = []
    m = cfg.edge_margin
    attempts = 0
    while len(boxes) < count and attempts < 200 * max(count, 1):
        attempts += 1
        l = max(rng.normal(*cfg.length), 2.5)
        w = max(rng.normal(*cfg.width), 1.2)
        h = max(rng.normal(*cfg.height), 1.0)
        r = 0.5 * math.hypot(l, w)
        x_lo, x_hi = cfg.x_range[0] + r + m, cfg.x_range[1] - r - m
        y_lo, y_hi = cfg.y_range[0] + r + m, cfg.y_range[1] - r - m
        if x_hi <= x_lo or y_hi <= y_lo:
            break
        yaw = math.pi - rng.uniform(0.0, 2 * math.pi)  # (-pi, pi]
        box = Box3D(rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi), cfg.ground_z + h / 2, l, w, h, yaw)
        grown = Box3D(box.cx, box.cy, box.cz, l + 1.0, w + 1.0, h, yaw)
        if all(rotated_iou_bev(grown, b) == 0.0 for b in boxes):
            boxes.append(box)
    return boxes


def _sample_on_box(rng, box: Box3D, n: int, surface_fraction: float) -> np.ndarray:
    """Points in box-local coordinates, then rotated into the world frame."""
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([box.l, box.w, box.h])
    on_surface = rng.random(n) < surface_fraction
    k = int(on_surface.sum())
    if k:
        # snap one coordinate to a face: sides and roof, no floor
        face = rng.integers(0, 5, size=k)
        sub = local[on_surface]
        half = np.array([box.l, box.w, box.h]) / 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        axis = np.minimum(face // 2, 2)
        sign[face == 4] = 1.0
        sub[np.arange(k), axis] = sign * half[axis]
        local[on_surface] = sub
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xy = np.stack([c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1]], axis=1)
    return np.column_stack([xy[:, 0] + box.cx, xy[:, 1] + box.cy, local[:, 2] + box.cz])


def generate_frame(cfg: SceneConfig, seed, frame_id: str = "") -> LabeledFrame:
    """One labeled frame, fully determined by ``(cfg, seed)``."""
    rng = np.random.default_rng(seed)
    n_vehicles = int(rng.integers(cfg.vehicles[0], cfg.vehicles[1] + 1))
    boxes = _place_boxes(cfg, rng, n_vehicles)

    chunks, noise_flags, owners = [], [], []
    n_target = 0
    for j, box in enumerate(boxes):
        n = int(rng.integers(cfg.points_per_vehicle[0], cfg.points_per_vehicle[1] + 1))
        xyz = _sample_on_box(rng, box, n, cfg.surface_fraction)
        power = rng.lognormal(*cfg.target_power, size=n)
        speed = rng.uniform(-cfg.doppler_range, cfg.doppler_range)
        bearing = np.arctan2(xyz[:, 1], xyz[:, 0])
        doppler = speed * np.cos(box.yaw - bearing) + rng.normal(0.0, 0.2, size=n)
        chunks.append(np.column_stack([xyz, power, doppler]))
        noise_flags.append(np.zeros(n, dtype=bool))
        owners.append(np.full(n, j))
        n_target += n

    if boxes:
        f = cfg.noise_fraction
        n_noise = int(round(n_target * f / (1.0 - f)))
    else:
        n_noise = cfg.noise_points_empty
    noise = np.column_stack([
        rng.uniform(*cfg.x_range, size=n_noise),
        rng.uniform(*cfg.y_range, size=n_noise),
        rng.uniform(*cfg.z_range, size=n_noise),
        rng.lognormal(*cfg.noise_power, size=n_noise),
        rng.uniform(-cfg.doppler_range, cfg.doppler_range, size=n_noise),
    ])
    chunks.append(noise)
    noise_flags.append(np.ones(n_noise, dtype=bool))
    owners.append(np.full(n_noise, -1))

    pts = np.concatenate(chunks) if chunks else np.zeros((0, 5))
    is_noise = np.concatenate(noise_flags)
    owner = np.concatenate(owners)
    # interleave target and clutter returns
    perm = rng.permutation(len(pts))
    pts, is_noise, owner = pts[perm], is_noise[perm], owner[perm]
    # keep strictly inside the ROI after float32 rounding
    for axis, (lo, hi) in enumerate((cfg.x_range, cfg.y_range, cfg.z_range)):
        pts[:, axis] = np.clip(pts[:, axis], lo, np.nextafter(np.float32(hi), np.float32(lo)))
    cloud = RadarPointCloud(pts.astype(np.float32), frame_id)
    return LabeledFrame(cloud, boxes, is_noise, owner)


# --------------------------------------------------------------------------
# Datasets on disk
# --------------------------------------------------------------------------


@dataclass
class Manifest:
    path: Path
    frames: list[str]  # frame files relative to the manifest directory
    boxes: dict[str, list[Box3D]]

    def __len__(self):
        return len(self.frames)

    def load_frames(self):
        """``(frame_file, cloud, gts)`` for each frame, in manifest order."""
        root = self.path.parent
        for name in self.frames:
            yield name, load_point_cloud(root / name, frame_id=frame_name(name)), self.boxes[name]


def frame_name(frame_file: str) -> str:
    return Path(frame_file).stem


def write_manifest(path, frames: list[str], boxes: dict[str, list[Box3D]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for name in frames:
            if not boxes[name]:
                w.writerow([name] + [""] * 7)
            for b in boxes[name]:
                w.writerow([name] + [repr(float(v)) for v in b.to_array()])


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    frames: list[str] = []
    boxes: dict[str, list[Box3D]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise ValueError(f"{path}: expected header {','.join(MANIFEST_HEADER)}")
        for row in reader:
            name = row["frame_file"]
            if name not in boxes:
                frames.append(name)
                boxes[name] = []
            if row["cx"]:
                boxes[name].append(Box3D(*(float(row[k]) for k in MANIFEST_HEADER[1:])))
    return Manifest(path, frames, boxes)


def generate_dataset(cfg: SceneConfig, count: int, base_seed: int, out_dir) -> Manifest:
    """Write ``count`` frames as RPC5 files plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    frames, boxes = [], {}
    for i in range(count):
        name = f"frames/frame_{i:05d}.rpc5"
        frame = generate_frame(cfg, frame_seed(base_seed, i), frame_name(name))
        save_point_cloud(frame.cloud, out_dir / name)
        frames.append(name)
        boxes[name] = frame.gts
    write_manifest(out_dir / "manifest.csv", frames, boxes)
    return Manifest(out_dir / "manifest.csv", frames, boxes)


def frame_digest(cloud: RadarPointCloud) -> str:
    return hashlib.sha256(cloud.points.tobytes()).hexdigest()
