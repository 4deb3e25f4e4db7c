"""Ray-cast off-road scenes written in the on-disk dataset layout.

A scene, seen from a downward-pitched camera, is a flat driving corridor (traversable) flanked by rising berms,
with box obstacles standing in the corridor (both non-traversable), sky
and far terrain (unreachable).  LiDAR returns are sampled on alternate
rows/columns of the rendered depth and stored in the LiDAR frame, so the
projection pipeline recovers them exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import GRAY_LEVELS, TriClass, write_png
from .geometry import Calibration, PointCloud, back_project, write_calibration, write_point_cloud

# camera <- LiDAR axes: LiDAR x forward, y left, z up; camera x right, y down, z forward
LIDAR_ROTATION = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
LIDAR_TRANSLATION = np.array([0.0, -0.08, -0.27])
MAX_LABEL_RANGE = 40.0
MAX_LIDAR_RANGE = 60.0
PITCH_RANGE_DEG = (20.0, 28.0)  # camera looks down at the track
CORRIDOR_HALF_WIDTH = (2.5, 4.0)

_COLORS = {
    "ground": (150, 115, 80),
    "berm": (70, 120, 50),
    "obstacle": (90, 90, 95),
    "sky": (170, 200, 230),
}


def synthetic_calibration(width: int, height: int) -> Calibration:
    f = 0.75 * width
    p2 = np.array([[f, 0.0, (width - 1) / 2, 0.0], [0.0, f, (height - 1) / 2, 0.0], [0.0, 0.0, 1.0, 0.0]])
    tr = np.hstack([LIDAR_ROTATION, LIDAR_TRANSLATION[:, None]])
    return Calibration(p2, tr)


@dataclass
class Scene:
    depth: np.ndarray  # (H, W), inf where no surface
    labels: np.ndarray  # (H, W) TriClass codes
    surface: np.ndarray  # (H, W) index into _COLORS order


def render_offroad(width: int, height: int, calib: Calibration, rng: np.random.Generator) -> Scene:
    p = calib.intrinsic_projection
    f, cx, cy = p[0, 0], p[0, 2], p[1, 2]
    vv, uu = np.mgrid[0:height, 0:width].astype(np.float64)
    dx = (uu - cx) / f
    dy = (vv - cy) / f

    cam_h = rng.uniform(1.4, 1.8)
    corridor = rng.uniform(*CORRIDOR_HALF_WIDTH)
    slope = rng.uniform(0.6, 1.2)
    offset = rng.uniform(-1.0, 1.0)
    pitch = np.deg2rad(rng.uniform(*PITCH_RANGE_DEG))

    # ray (dx, dy, 1) in the camera frame, rotated into a level world frame;
    # the ray parameter is then the camera-frame depth
    c, s_ = np.cos(pitch), np.sin(pitch)
    wy = c * dy + s_
    wz = c - s_ * dy
    wx = dx

    with np.errstate(divide="ignore", invalid="ignore"):
        z_ground = np.where(wy > 0, cam_h / wy, np.inf)
        x_ground = z_ground * wx - offset
        z_right = (cam_h + slope * (corridor + offset)) / (wy + slope * wx)
        z_left = (cam_h + slope * (corridor - offset)) / (wy - slope * wx)
    on_corridor = np.abs(x_ground) <= corridor
    right = ~on_corridor & (x_ground > 0) & (z_right > 0)
    left = ~on_corridor & (x_ground < 0) & (z_left > 0)
    depth = np.where(on_corridor, z_ground, np.inf)
    depth = np.where(right, z_right, depth)
    depth = np.where(left, z_left, depth)
    surface = np.where(on_corridor, 0, np.where(right | left, 1, 3))

    for _ in range(int(rng.integers(1, 3))):
        zo = rng.uniform(6.0, 18.0)
        xc = offset + rng.uniform(-corridor, corridor)
        half_w = rng.uniform(0.4, 1.2)
        top = cam_h - rng.uniform(1.0, 2.5)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(wz > 0, zo / wz, np.inf)
        hit = (np.abs(t * wx - xc) <= half_w) & (t * wy >= top) & (t * wy <= cam_h) & (t < depth)
        depth = np.where(hit, t, depth)
        surface = np.where(hit, 2, surface)

    forward = depth * wz  # horizontal range ahead of the vehicle
    labels = np.full((height, width), TriClass.UNREACHABLE, dtype=np.uint8)
    near = forward <= MAX_LABEL_RANGE
    labels[near & (surface == 0)] = TriClass.TRAVERSABLE
    labels[near & ((surface == 1) | (surface == 2))] = TriClass.NON_TRAVERSABLE
    surface = np.where(np.isfinite(depth) & ~near, 3, surface)
    return Scene(depth, labels, surface)


def render_wall(width: int, height: int, distance: float = 10.0) -> Scene:
    """A fronto-parallel wall filling the view; every pixel traversable."""
    depth = np.full((height, width), distance)
    labels = np.full((height, width), TriClass.TRAVERSABLE, dtype=np.uint8)
    return Scene(depth, labels, np.zeros((height, width), dtype=np.int64))


def shade(scene: Scene, rng: np.random.Generator) -> np.ndarray:
    palette = np.array(list(_COLORS.values()), dtype=np.float64)
    rgb = palette[scene.surface]
    finite = np.isfinite(scene.depth)
    fade = np.where(finite, np.clip(1.15 - scene.depth / 80.0, 0.6, 1.15), 1.0)
    rgb = rgb * fade[..., None] + rng.normal(0.0, 12.0, size=rgb.shape)
    return np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)


def lidar_from_depth(depth: np.ndarray, calib: Calibration, row_step: int = 2, col_step: int = 2) -> PointCloud:
    h, w = depth.shape
    vv, uu = np.mgrid[0:h:row_step, 0:w:col_step]
    d = depth[vv, uu]
    keep = np.isfinite(d) & (d <= MAX_LIDAR_RANGE)
    if not keep.any():
        return PointCloud(np.zeros((0, 4)))
    cam = back_project(uu[keep], vv[keep], d[keep], calib)
    lidar = (cam - calib.translation) @ calib.rotation
    intensity = np.clip(1.0 - d[keep] / MAX_LIDAR_RANGE, 0.0, 1.0)
    return PointCloud(np.column_stack([lidar, intensity]))


def write_frame(seq_dir: Path, frame_id: str, rgb: np.ndarray, scene: Scene, calib: Calibration) -> None:
    for sub in ("image_data", "lidar_data", "calib", "gt_image"):
        (seq_dir / sub).mkdir(parents=True, exist_ok=True)
    write_png(seq_dir / "image_data" / f"{frame_id}.png", rgb)
    write_png(seq_dir / "gt_image" / f"{frame_id}.png", GRAY_LEVELS[scene.labels].astype(np.uint8))
    write_calibration(seq_dir / "calib" / f"{frame_id}.txt", calib)
    write_point_cloud(seq_dir / "lidar_data" / f"{frame_id}.bin", lidar_from_depth(scene.depth, calib))


def make_synthetic_dataset(
    root: str | os.PathLike,
    counts: dict[str, int] | None = None,
    width: int = 64,
    height: int = 64,
    seed: int = 0,
    scene: str = "offroad",
) -> Path:
    """Write a small dataset tree; ``counts`` maps split name to frame count."""
    root = Path(root)
    counts = counts or {"training": 4}
    calib = synthetic_calibration(width, height)
    for s_idx, (split, n) in enumerate(sorted(counts.items())):
        seq_dir = root / split / f"{split}_seq00"
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(s_idx, i)))
            sc = render_wall(width, height) if scene == "wall" else render_offroad(width, height, calib, rng)
            write_frame(seq_dir, f"{i:06d}", shade(sc, rng), sc, calib)
    return root
