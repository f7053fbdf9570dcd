"""Binocular renderer and dataset generator for a randomly placed ball.

Two orthographic cameras look at the scene centre from the directions
(-4,-5,5) and (-5,-4,5). The ball (diameter 10) is drawn as a bright disc
on black with exact pixel-area antialiasing, which stands in for "blue
channel minus background". Positions are uniform on (-45, 45)^3.

Dataset files (little-endian)::

    header  "PIDB" u32 version=1 u32 n_records u32 views=2 u32 height
            u32 width u64 seed
    record  3 x f32 position, then views*height*width bytes (left, right)

Random numbers come from numpy's PCG64 bit generator seeded with the
dataset seed, so files are byte-identical across runs and platforms.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

BALL_DIAMETER = 10.0
BALL_RADIUS = BALL_DIAMETER / 2
COORD_LIMIT = 50.0
SPAWN_LIMIT = 45.0
DEFAULT_DIRECTIONS = ((-4.0, -5.0, 5.0), (-5.0, -4.0, 5.0))
DEFAULT_HALF_EXTENT = 80.0

# std of uniform(-45, 45); used for every target component
TARGET_SIGMA = 2 * SPAWN_LIMIT / math.sqrt(12.0)

MAGIC = b"PIDB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")


class DatasetFormatError(ValueError):
    """A dataset file is malformed, truncated or of the wrong version."""


@dataclass(frozen=True)
class Camera:
    view: np.ndarray   # unit vector from scene centre toward the observer
    up: np.ndarray
    right: np.ndarray


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, Camera]
    half_extent: float
    image_size: int

    @property
    def pixels_per_unit(self) -> float:
        return self.image_size / (2 * self.half_extent)

    @property
    def radius_px(self) -> float:
        return BALL_RADIUS * self.pixels_per_unit

    def line_of_sight_angle(self) -> float:
        """Angle between the two view directions in degrees."""
        c = float(np.clip(self.cameras[0].view @ self.cameras[1].view, -1, 1))
        return math.degrees(math.acos(c))


def _camera(direction: Sequence[float]) -> Camera:
    v = np.asarray(direction, dtype=np.float64)
    v = v / np.linalg.norm(v)
    z = np.array([0.0, 0.0, 1.0])
    up = z - (z @ v) * v
    up /= np.linalg.norm(up)
    right = np.cross(up, v)
    return Camera(v, up, right)


def build_rig(image_size: int = 256, half_extent: float = DEFAULT_HALF_EXTENT,
              directions=DEFAULT_DIRECTIONS) -> CameraRig:
    if image_size < 8:
        raise ValueError(f"image_size must be >= 8, got {image_size}")
    if half_extent <= 0:
        raise ValueError(f"half_extent must be positive, got {half_extent}")
    return CameraRig(tuple(_camera(d) for d in directions), float(half_extent), int(image_size))


def project(p, camera: Camera, rig: CameraRig) -> tuple[float, float]:
    """Continuous (row, col) pixel coordinates of a world point."""
    p = np.asarray(p, dtype=np.float64)
    size = rig.image_size
    span = 2 * rig.half_extent
    col = (p @ camera.right + rig.half_extent) / span * size
    row = (rig.half_extent - p @ camera.up) / span * size
    return float(row), float(col)


# ---------------------------------------------------------------------------
# rasterization


def _arc_antiderivative(x, r):
    # F(x) with F' = sqrt(r^2 - x^2) on [-r, r]
    x = np.clip(x, -r, r)
    return 0.5 * (x * np.sqrt(np.maximum(r * r - x * x, 0.0)) + r * r * np.arcsin(x / r))


def _clipped_column_integral(y, a, b, r):
    """Integral over x in [a, b] of clip(y, -h(x), h(x)), h = half chord of the disc.

    ``y`` broadcasts against ``a``/``b``. Outside |x| <= r the integrand is 0.
    """
    xc = np.sqrt(np.maximum(r * r - y * y, 0.0))

    def arc(lo, hi):
        return _arc_antiderivative(np.clip(b, lo, hi), r) - _arc_antiderivative(np.clip(a, lo, hi), r)

    flat = np.maximum(np.minimum(b, xc) - np.maximum(a, -xc), 0.0)
    curved = arc(-r, -xc) + arc(xc, r)
    return y * flat + np.sign(y) * curved


def disc_coverage(center_row: float, center_col: float, radius: float,
                  height: int, width: int) -> np.ndarray:
    """Exact fraction of each pixel covered by a disc.

    Pixel (i, j) spans rows [i, i+1] and columns [j, j+1].
    """
    cov = np.zeros((height, width), dtype=np.float64)
    r0 = max(int(math.floor(center_row - radius)) - 1, 0)
    r1 = min(int(math.ceil(center_row + radius)) + 1, height)
    c0 = max(int(math.floor(center_col - radius)) - 1, 0)
    c1 = min(int(math.ceil(center_col + radius)) + 1, width)
    if r0 >= r1 or c0 >= c1:
        return cov
    ys = np.arange(r0, r1 + 1, dtype=np.float64)[:, None] - center_row
    xs = np.arange(c0, c1 + 1, dtype=np.float64) - center_col
    a, b = xs[None, :-1], xs[None, 1:]
    strip = _clipped_column_integral(ys, a, b, radius)
    cov[r0:r1, c0:c1] = np.clip(strip[1:] - strip[:-1], 0.0, 1.0)
    return cov


def render_view(position, camera: Camera, rig: CameraRig) -> np.ndarray:
    row, col = project(position, camera, rig)
    cov = disc_coverage(row, col, rig.radius_px, rig.image_size, rig.image_size)
    return np.rint(cov * 255.0).astype(np.uint8)


@dataclass
class FrameRecord:
    position: np.ndarray
    left: np.ndarray
    right: np.ndarray

    @property
    def views(self) -> np.ndarray:
        return np.stack([self.left, self.right])


def render_frame(position, rig: CameraRig) -> FrameRecord:
    position = np.asarray(position, dtype=np.float64)
    left, right = (render_view(position, cam, rig) for cam in rig.cameras)
    return FrameRecord(position, left, right)


# ---------------------------------------------------------------------------
# datasets


def sample_position(rng: np.random.Generator) -> np.ndarray:
    """Three independent uniforms strictly inside (-45, 45)."""
    while True:
        p = rng.uniform(-SPAWN_LIMIT, SPAWN_LIMIT, size=3)
        if np.all(np.abs(p) < SPAWN_LIMIT):
            return p


@dataclass
class Dataset:
    positions: np.ndarray   # (n, 3)
    images: np.ndarray      # (n, 2, H, W) uint8
    seed: int = 0

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])


def _record_dtype(height: int, width: int, views: int = 2) -> np.dtype:
    return np.dtype([("position", "<f4", (3,)), ("images", "u1", (views, height, width))])


def write_dataset(path, dataset: Dataset) -> None:
    n, views, h, w = dataset.images.shape
    records = np.empty(n, dtype=_record_dtype(h, w, views))
    records["position"] = dataset.positions
    records["images"] = dataset.images
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, views, h, w, dataset.seed))
        records.tofile(f)


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        size = path.stat().st_size
    if len(head) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, n, views, h, w, seed = _HEADER.unpack(head)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: version {version}, expected {VERSION}")
    dt = _record_dtype(h, w, views)
    expected = _HEADER.size + n * dt.itemsize
    if size != expected:
        raise DatasetFormatError(f"{path}: {size} bytes, expected {expected} for {n} records")
    if n == 0:
        return Dataset(np.zeros((0, 3), np.float32), np.zeros((0, views, h, w), np.uint8), seed)
    records = np.memmap(path, dtype=dt, mode="r", offset=_HEADER.size, shape=(n,))
    return Dataset(np.array(records["position"]), records["images"], seed)


def generate_records(count: int, seed: int, rig: CameraRig) -> Dataset:
    rng = np.random.Generator(np.random.PCG64(seed))
    size = rig.image_size
    positions = np.empty((count, 3), dtype=np.float32)
    images = np.empty((count, 2, size, size), dtype=np.uint8)
    for i in range(count):
        # render exactly what gets stored
        positions[i] = sample_position(rng)
        frame = render_frame(positions[i].astype(np.float64), rig)
        images[i, 0] = frame.left
        images[i, 1] = frame.right
    return Dataset(positions, images, seed)


def generate_dataset(count: int, seed: int, rig: CameraRig, path) -> Dataset:
    dataset = generate_records(count, seed, rig)
    try:
        write_dataset(path, dataset)
    except OSError as e:
        raise OSError(e.errno, f"cannot write dataset {path}: {e.strerror}") from e
    return dataset


# ---------------------------------------------------------------------------
# motion samples and targets


def target_length(frames: int) -> int:
    if not 1 <= frames <= 3:
        raise ValueError(f"frames must be 1, 2 or 3, got {frames}")
    return 3 * frames + 3 * (frames - 1) + 3 * max(frames - 2, 0)


def ground_truth(positions) -> np.ndarray:
    """[q1, q2, q3, v1, v2, a] truncated to the number of frames.

    Accepts (T, 3) or a batch (B, T, 3); computed in float64.
    """
    q = np.asarray(positions, dtype=np.float64)
    single = q.ndim == 2
    if single:
        q = q[None]
    frames = q.shape[1]
    target_length(frames)
    parts = [q.reshape(len(q), -1)]
    if frames >= 2:
        v = q[:, 1:] - q[:, :-1]
        parts.append(v.reshape(len(q), -1))
        if frames == 3:
            parts.append(v[:, 1] - v[:, 0])
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


def normalize_targets(t):
    return np.asarray(t, dtype=np.float64) / TARGET_SIGMA


def denormalize_targets(t):
    return np.asarray(t, dtype=np.float64) * TARGET_SIGMA


@dataclass
class MotionSample:
    frames: list[FrameRecord]
    targets: np.ndarray


def draw_frame_indices(n: int, indices, rng: np.random.Generator, frames: int) -> np.ndarray:
    """First column is ``indices``; the rest are uniform draws from the dataset."""
    if n == 0:
        raise ValueError("dataset is empty")
    target_length(frames)
    indices = np.asarray(indices, dtype=np.int64)
    if np.any(indices >= n) or np.any(indices < 0):
        raise IndexError(f"index out of range for dataset of {n} records")
    extra = rng.integers(0, n, size=(len(indices), frames - 1))
    return np.concatenate([indices[:, None], extra], axis=1)


def assemble_batch(dataset: Dataset, indices, rng: np.random.Generator, frames: int):
    """Images (B, 2, T, H, W) uint8 and un-normalized targets (B, K)."""
    idx = draw_frame_indices(len(dataset), indices, rng, frames)
    images = np.asarray(dataset.images[idx.ravel()])
    b = len(idx)
    images = images.reshape((b, frames) + images.shape[1:]).transpose(0, 2, 1, 3, 4)
    positions = dataset.positions[idx]
    return np.ascontiguousarray(images), ground_truth(positions)


def assemble_sample(dataset: Dataset, index: int, rng: np.random.Generator, frames: int) -> MotionSample:
    idx = draw_frame_indices(len(dataset), [index], rng, frames)[0]
    recs = [FrameRecord(np.asarray(dataset.positions[i], dtype=np.float64),
                        np.asarray(dataset.images[i, 0]), np.asarray(dataset.images[i, 1]))
            for i in idx]
    return MotionSample(recs, ground_truth([r.position for r in recs]))


def images_to_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Bytes to network input in [0, 1]."""
    return np.asarray(images, dtype=dtype) * (1.0 / 255.0)
