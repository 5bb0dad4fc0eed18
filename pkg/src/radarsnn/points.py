"""Radar point clouds, power-percentile density filtering and voxelization.

A cloud is held as an ``(N, 5)`` float32 array with columns
``x, y, z, power, doppler`` so that the on-disk RPC5 format round-trips
without loss.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

COLUMNS = ("x", "y", "z", "power", "doppler")
X, Y, Z, POWER, DOPPLER = range(5)

RPC5_MAGIC = b"RPC5"
_HEADER = struct.Struct("<4sI")
_RECORD_DTYPE = np.dtype("<f4")


class PointCloudError(ValueError):
    """Raised for invalid point-cloud contents or arguments."""


class PointCloudFormatError(PointCloudError):
    """Malformed point-cloud file header."""


class PointCloudTruncatedError(PointCloudError):
    """Point-cloud file payload shorter than its declared count."""


class RadarPoint(NamedTuple):
    x: float
    y: float
    z: float
    power: float
    doppler: float


@dataclass(frozen=True)
class RadarPointCloud:
    """Ordered set of radar returns for one frame."""

    points: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 5:
            if pts.size == 0:
                pts = pts.reshape(0, 5)
            else:
                raise PointCloudError(f"points must have shape (N, 5), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise PointCloudError("point fields must be finite")
        if np.any(pts[:, POWER] < 0):
            raise PointCloudError("point power must be non-negative")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_points(cls, points: Iterable[RadarPoint], frame_id: str = "") -> "RadarPointCloud":
        rows = [tuple(p) for p in points]
        return cls(np.array(rows, dtype=np.float32).reshape(-1, 5), frame_id)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, i: int) -> RadarPoint:
        return RadarPoint(*(float(v) for v in self.points[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, RadarPointCloud):
            return NotImplemented
        return self.frame_id == other.frame_id and np.array_equal(self.points, other.points)

    __hash__ = None

    @property
    def power(self) -> np.ndarray:
        return self.points[:, POWER]

    def subset(self, index: np.ndarray) -> "RadarPointCloud":
        return RadarPointCloud(self.points[index], self.frame_id)


# --------------------------------------------------------------------------
# Density cascade
# --------------------------------------------------------------------------


def _keep_count(n: int, r: float) -> int:
    if not 0 < r <= 100:
        raise PointCloudError(f"density ratio r must be in (0, 100], got {r}")
    return math.ceil(Fraction(r) * n / 100)


def _top_k_index(power: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -power: equal powers keep ascending original index
    order = np.argsort(-power.astype(np.float64), kind="stable")
    return np.sort(order[:k])


def bti_threshold(cloud: RadarPointCloud, r: float) -> float:
    """Power threshold that keeps the top ``r`` percent of ``cloud``.

    Nearest-rank convention: with ``k = ceil(r * N / 100)`` this is the
    k-th largest power of the current cloud.
    """
    n = len(cloud)
    if n == 0:
        raise PointCloudError("empty point cloud")
    k = _keep_count(n, r)
    return float(np.sort(cloud.power)[n - k])


def bti_filter(cloud: RadarPointCloud, r: float) -> RadarPointCloud:
    """Keep the ``ceil(r * N / 100)`` highest-power points.

    Ties at the threshold are resolved in favour of the lower original
    index; surviving points keep their input order.
    """
    n = len(cloud)
    if n == 0:
        raise PointCloudError("empty point cloud")
    k = _keep_count(n, r)
    if k == n:
        return cloud
    return cloud.subset(_top_k_index(cloud.power, k))


def bti_cascade(cloud: RadarPointCloud, r: float, steps: int) -> list[RadarPointCloud]:
    """Clouds fed to each inference step, from densest to sparsest."""
    if steps < 1:
        raise PointCloudError(f"number of steps must be >= 1, got {steps}")
    clouds = [cloud]
    for _ in range(steps - 1):
        clouds.append(bti_filter(clouds[-1], r))
    return clouds


# --------------------------------------------------------------------------
# Voxelization
# --------------------------------------------------------------------------

ENCODINGS = {"occupancy_power_doppler": 3, "occupancy": 1}


@dataclass(frozen=True)
class VoxelGridSpec:
    """Axis-aligned region of interest and voxel counts ``(Z, Y, X)``."""

    x_range: tuple[float, float] = (0.0, 51.2)
    y_range: tuple[float, float] = (-25.6, 25.6)
    z_range: tuple[float, float] = (-2.0, 6.0)
    shape: tuple[int, int, int] = (16, 128, 128)
    encoding: str = "occupancy_power_doppler"

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise PointCloudError(f"{name}: max must exceed min, got {(lo, hi)}")
        if len(self.shape) != 3 or any(int(c) < 1 for c in self.shape):
            raise PointCloudError(f"voxel counts must be positive, got {self.shape}")
        if self.encoding not in ENCODINGS:
            raise PointCloudError(f"unknown voxel encoding {self.encoding!r}")

    @property
    def channels(self) -> int:
        return ENCODINGS[self.encoding]

    @property
    def voxel_size(self) -> tuple[float, float, float]:
        """Voxel edge lengths ``(dz, dy, dx)`` in meters."""
        nz, ny, nx = self.shape
        return (
            (self.z_range[1] - self.z_range[0]) / nz,
            (self.y_range[1] - self.y_range[0]) / ny,
            (self.x_range[1] - self.x_range[0]) / nx,
        )

    def cell_centers_bev(self, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """BEV cell-center coordinates ``(xs, ys)`` at a given downsampling."""
        _, ny, nx = self.shape
        _, dy, dx = self.voxel_size
        xs = self.x_range[0] + (np.arange(nx // stride) + 0.5) * dx * stride
        ys = self.y_range[0] + (np.arange(ny // stride) + 0.5) * dy * stride
        return xs, ys


@dataclass
class VoxelFeatureGrid:
    values: np.ndarray  # (C, Z, Y, X) float32
    binned: int = 0
    dropped: int = 0
    occupied: np.ndarray = field(default=None, repr=False)  # flat voxel ids, sorted


def voxelize(cloud: RadarPointCloud, spec: VoxelGridSpec) -> VoxelFeatureGrid:
    """Bin points into the grid and encode per-voxel features.

    Default encoding has three channels: occupancy in {0, 1}, mean power
    divided by the cloud's maximum power, and mean doppler. Points outside
    ``[min, max)`` on any axis are dropped and counted.
    """
    nz, ny, nx = spec.shape
    values = np.zeros((spec.channels, nz, ny, nx), dtype=np.float32)
    n = len(cloud)
    if n == 0:
        return VoxelFeatureGrid(values, 0, 0, np.zeros(0, dtype=np.int64))

    pts = cloud.points.astype(np.float64)
    dz, dy, dx = spec.voxel_size
    iz = np.floor((pts[:, Z] - spec.z_range[0]) / dz).astype(np.int64)
    iy = np.floor((pts[:, Y] - spec.y_range[0]) / dy).astype(np.int64)
    ix = np.floor((pts[:, X] - spec.x_range[0]) / dx).astype(np.int64)
    inside = (
        (pts[:, Z] >= spec.z_range[0]) & (pts[:, Z] < spec.z_range[1])
        & (pts[:, Y] >= spec.y_range[0]) & (pts[:, Y] < spec.y_range[1])
        & (pts[:, X] >= spec.x_range[0]) & (pts[:, X] < spec.x_range[1])
        & (iz >= 0) & (iz < nz) & (iy >= 0) & (iy < ny) & (ix >= 0) & (ix < nx)
    )
    binned = int(inside.sum())
    flat = (iz * ny + iy) * nx + ix
    flat = flat[inside]
    size = nz * ny * nx
    counts = np.bincount(flat, minlength=size)
    occupied = np.flatnonzero(counts)
    view = values.reshape(spec.channels, size)
    view[0, occupied] = 1.0
    if spec.encoding == "occupancy_power_doppler":
        max_power = float(pts[:, POWER].max())
        power_sum = np.bincount(flat, weights=pts[inside, POWER], minlength=size)
        dop_sum = np.bincount(flat, weights=pts[inside, DOPPLER], minlength=size)
        c = counts[occupied]
        if max_power > 0:
            view[1, occupied] = power_sum[occupied] / c / max_power
        view[2, occupied] = dop_sum[occupied] / c
    return VoxelFeatureGrid(values, binned, n - binned, occupied)


# --------------------------------------------------------------------------
# File IO
# --------------------------------------------------------------------------


def save_point_cloud(cloud: RadarPointCloud, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(COLUMNS)
            for row in cloud.points:
                writer.writerow([repr(float(v)) for v in row])
        return
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RPC5_MAGIC, len(cloud)))
        fh.write(cloud.points.astype(_RECORD_DTYPE).tobytes())


def load_point_cloud(path, frame_id: str | None = None) -> RadarPointCloud:
    """Read an RPC5 binary file or an ``x,y,z,power,doppler`` CSV."""
    path = Path(path)
    if frame_id is None:
        frame_id = path.stem
    if path.suffix.lower() == ".csv":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != COLUMNS:
                raise PointCloudFormatError(f"{path}: expected CSV header {','.join(COLUMNS)}")
            rows = [[float(v) for v in row] for row in reader if row]
        return RadarPointCloud(np.array(rows, dtype=np.float32).reshape(-1, 5), frame_id)

    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise PointCloudFormatError(f"{path}: file too short for RPC5 header")
    magic, count = _HEADER.unpack_from(data)
    if magic != RPC5_MAGIC:
        raise PointCloudFormatError(f"{path}: bad magic {magic!r}, expected {RPC5_MAGIC!r}")
    need = count * 5 * _RECORD_DTYPE.itemsize
    payload = data[_HEADER.size:]
    if len(payload) < need:
        got = len(payload) // (5 * _RECORD_DTYPE.itemsize)
        raise PointCloudTruncatedError(f"{path}: header declares {count} points, payload holds {got}")
    pts = np.frombuffer(payload, dtype=_RECORD_DTYPE, count=count * 5).reshape(count, 5)
    return RadarPointCloud(pts.astype(np.float32), frame_id)
