"""Per-frame geometry pipeline: sparse depth -> dense depth -> surface normals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Frame, FrameRecord, load_frame
from .geometry import DepthMap, NormalMap, densify_depth, estimate_normals, project_points

NORMAL_WINDOW = 7

# per-channel RGB statistics used to standardise network input
IMAGE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def normalize_image(image: np.ndarray) -> np.ndarray:
    """[3, H, W] in [0, 1] -> zero-centred, unit-scale channels."""
    return ((image - IMAGE_MEAN[:, None, None]) / IMAGE_STD[:, None, None]).astype(np.float32)


@dataclass
class GeometryProducts:
    sparse: DepthMap
    dense: DepthMap
    normals: NormalMap


def frame_geometry(frame: Frame, window: int = NORMAL_WINDOW) -> GeometryProducts:
    h, w = frame.gt.tri_class.shape
    sparse = project_points(frame.cloud, frame.calib, w, h)
    dense = densify_depth(sparse)
    normals = estimate_normals(dense, frame.calib, window)
    return GeometryProducts(sparse, dense, normals)


@dataclass
class Sample:
    """Network-ready arrays for one frame."""

    record: FrameRecord
    image: np.ndarray  # [3, H, W] float32, standardised
    normals: np.ndarray  # [3, H, W] float32, zero where invalid
    labels: np.ndarray  # [H, W] bool, True = traversable


def prepare_sample(record: FrameRecord, width: int, height: int) -> Sample:
    frame = load_frame(record, width, height)
    geo = frame_geometry(frame)
    return Sample(record, normalize_image(frame.image.data), geo.normals.to_chw(), frame.gt.binary)


def prepare_samples(records: list[FrameRecord], width: int, height: int) -> list[Sample]:
    return [prepare_sample(r, width, height) for r in records]


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.stack([s.image for s in samples]),
        np.stack([s.normals for s in samples]),
        np.stack([s.labels for s in samples]),
    )
