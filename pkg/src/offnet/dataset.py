"""Off-road dataset sequences on disk: scanning, ground-truth decoding and frame loading.

Layout per split::

    <root>/<split>/<sequence>/image_data/<frame>.png
                             /lidar_data/<frame>.bin
                             /calib/<frame>.txt
                             /gt_image/<frame>.png
"""

from __future__ import annotations

import enum
import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Tensor
from .core.functional import resize_bilinear_array
from .geometry import Calibration, PointCloud, read_calibration, read_point_cloud

log = logging.getLogger(__name__)

SPLITS = ("training", "validation", "testing")
_SPLIT_ALIASES = {
    "train": "training",
    "training": "training",
    "val": "validation",
    "validation": "validation",
    "test": "testing",
    "testing": "testing",
}
MODALITIES = {
    "image": ("image_data", ".png"),
    "cloud": ("lidar_data", ".bin"),
    "calib": ("calib", ".txt"),
    "gt": ("gt_image", ".png"),
}
STRIDE = 32


class DatasetError(RuntimeError):
    """The dataset tree yields no usable frames or is malformed."""


class FormatError(ValueError):
    """A raster has the wrong channel layout."""


class FrameLoadError(OSError):
    """A frame file could not be read."""


class TriClass(enum.IntEnum):
    NON_TRAVERSABLE = 0
    UNREACHABLE = 1
    TRAVERSABLE = 2


GRAY_LEVELS = np.array([0, 128, 255])
_LEVEL_CLASS = np.array([TriClass.NON_TRAVERSABLE, TriClass.UNREACHABLE, TriClass.TRAVERSABLE], dtype=np.uint8)


@dataclass(frozen=True)
class FrameRecord:
    sequence_id: str
    frame_id: str
    image_path: Path
    cloud_path: Path
    calib_path: Path
    gt_path: Path

    @property
    def key(self) -> tuple[str, str]:
        return (self.sequence_id, self.frame_id)

    @property
    def name(self) -> str:
        return f"{self.sequence_id}/{self.frame_id}"


@dataclass
class SplitManifest:
    train: list[FrameRecord] = field(default_factory=list)
    val: list[FrameRecord] = field(default_factory=list)
    test: list[FrameRecord] = field(default_factory=list)
    skipped: list[tuple[str, str, tuple[str, ...]]] = field(default_factory=list)

    def split(self, name: str) -> list[FrameRecord]:
        canonical = _SPLIT_ALIASES.get(name)
        if canonical is None:
            raise KeyError(f"unknown split {name!r}")
        return {"training": self.train, "validation": self.val, "testing": self.test}[canonical]

    @property
    def skip_count(self) -> int:
        return len(self.skipped)

    def all_records(self) -> list[FrameRecord]:
        return self.train + self.val + self.test


@dataclass
class GroundTruth:
    tri_class: np.ndarray  # (H, W) uint8 TriClass codes
    warnings: int = 0

    @property
    def binary(self) -> np.ndarray:
        """True where traversable; unreachable collapses into not-traversable."""
        return self.tri_class == TriClass.TRAVERSABLE

    @property
    def height(self) -> int:
        return self.tri_class.shape[0]

    @property
    def width(self) -> int:
        return self.tri_class.shape[1]


@dataclass
class Frame:
    record: FrameRecord
    image: Tensor  # [3, H, W] in [0, 1]
    cloud: PointCloud
    calib: Calibration
    gt: GroundTruth


# -- scanning -------------------------------------------------------------------

def _scan_sequence(seq_dir: Path, manifest: SplitManifest) -> list[FrameRecord]:
    sequence_id = seq_dir.name
    stems: set[str] = set()
    for sub, ext in MODALITIES.values():
        d = seq_dir / sub
        if d.is_dir():
            stems.update(p.stem for p in d.iterdir() if p.suffix == ext)
    records = []
    for stem in sorted(stems):
        paths = {k: seq_dir / sub / f"{stem}{ext}" for k, (sub, ext) in MODALITIES.items()}
        missing = tuple(k for k, p in paths.items() if not p.is_file())
        if missing:
            manifest.skipped.append((sequence_id, stem, missing))
            log.info("skipping %s/%s: missing %s", sequence_id, stem, ", ".join(missing))
            continue
        records.append(
            FrameRecord(sequence_id, stem, paths["image"], paths["cloud"], paths["calib"], paths["gt"])
        )
    return records


def _read_split_file(path: Path) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {s: [] for s in SPLITS}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in _SPLIT_ALIASES:
            raise DatasetError(f"{path}:{lineno}: expected '<split> <sequence_id>', got {line!r}")
        groups[_SPLIT_ALIASES[parts[0]]].append(parts[1])
    return groups


def _find_sequence(root: Path, sequence_id: str) -> Path | None:
    direct = root / sequence_id
    if direct.is_dir():
        return direct
    for split in SPLITS:
        cand = root / split / sequence_id
        if cand.is_dir():
            return cand
    return None


def scan_dataset(root: str | os.PathLike, split_file: str | os.PathLike | None = None) -> SplitManifest:
    """Enumerate complete frames per split, in sorted order.

    Without ``split_file`` the ``training``/``validation``/``testing`` subtrees
    define membership; with it, each ``<split> <sequence_id>`` line assigns a
    sequence found either directly under ``root`` or under any split subtree.
    """
    root = Path(root)
    manifest = SplitManifest()
    if split_file is not None:
        groups = _read_split_file(Path(split_file))
        for split, seqs in groups.items():
            target = manifest.split(split)
            for seq in sorted(seqs):
                seq_dir = _find_sequence(root, seq)
                if seq_dir is None:
                    raise DatasetError(f"sequence {seq!r} listed in {split_file} not found under {root}")
                target.extend(_scan_sequence(seq_dir, manifest))
    else:
        for split in SPLITS:
            split_dir = root / split
            if not split_dir.is_dir():
                continue
            target = manifest.split(split)
            for seq_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                target.extend(_scan_sequence(seq_dir, manifest))

    keys = [r.key for r in manifest.all_records()]
    if len(keys) != len(set(keys)):
        raise DatasetError("splits overlap: a (sequence, frame) pair appears more than once")
    if not keys:
        raise DatasetError(f"no complete frames found under {root}")
    return manifest


# -- ground truth ---------------------------------------------------------------

def decode_ground_truth(png) -> GroundTruth:
    """Map gray levels 255/128/0 to traversable/unreachable/non-traversable.

    Off-level values snap to the nearest level (ties go to the darker one)
    and are counted in ``warnings``.  Accepts a ``PIL.Image``, an array, or
    PNG bytes.
    """
    if isinstance(png, (bytes, bytearray)):
        png = Image.open(io.BytesIO(png))
    if isinstance(png, Image.Image):
        if png.mode not in ("L", "P", "1"):
            raise FormatError(f"ground truth must be single-channel, got mode {png.mode}")
        png = np.array(png.convert("L"))
    arr = np.asarray(png)
    if arr.ndim != 2:
        raise FormatError(f"ground truth must be single-channel, got shape {arr.shape}")
    arr = arr.astype(np.int64)
    dist = np.abs(arr[..., None] - GRAY_LEVELS)
    level = np.argmin(dist, axis=-1)
    warnings = int(np.count_nonzero(~np.isin(arr, GRAY_LEVELS)))
    if warnings:
        log.debug("ground truth: %d pixel(s) off the 0/128/255 levels", warnings)
    return GroundTruth(_LEVEL_CLASS[level], warnings)


def encode_ground_truth(gt: GroundTruth) -> np.ndarray:
    return GRAY_LEVELS[gt.tri_class.astype(np.int64)].astype(np.uint8)


def encode_prediction(mask, threshold: float = 0.5) -> np.ndarray:
    """Threshold traversable probabilities to an 8-bit 255/0 image."""
    mask = np.asarray(mask)
    return np.where(mask >= threshold, 255, 0).astype(np.uint8)


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def write_png(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(png_bytes(arr))


def read_png(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.array(img)
    except (OSError, ValueError) as exc:
        raise FrameLoadError(f"cannot read image {path}: {exc}") from exc


# -- frame loading --------------------------------------------------------------

def check_target_size(width: int, height: int) -> None:
    if width <= 0 or height <= 0 or width % STRIDE or height % STRIDE:
        raise ValueError(f"target size {width}x{height} must be positive multiples of {STRIDE}")


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize sampling source pixel centres."""
    h, w = arr.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return arr[rows][:, cols]


def load_frame(record: FrameRecord, target_w: int, target_h: int) -> Frame:
    """Read all four modalities and bring image, labels and intrinsics to the target size."""
    check_target_size(target_w, target_h)
    rgb = read_png(record.image_path)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=-1)
    rgb = rgb[..., :3]
    src_h, src_w = rgb.shape[:2]
    img = rgb.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)
    img = resize_bilinear_array(img, target_h, target_w)

    try:
        cloud = read_point_cloud(record.cloud_path)
        calib = read_calibration(record.calib_path)
    except (OSError, ValueError) as exc:
        raise FrameLoadError(f"cannot read {record.name}: {exc}") from exc
    calib = calib.scaled(target_w / src_w, target_h / src_h)

    gt_raw = read_png(record.gt_path)
    gt = decode_ground_truth(gt_raw)
    if gt.tri_class.shape != (src_h, src_w):
        raise FrameLoadError(
            f"{record.gt_path}: ground truth {gt.tri_class.shape} does not match image {(src_h, src_w)}"
        )
    gt = GroundTruth(resize_nearest(gt.tri_class, target_h, target_w), gt.warnings)
    return Frame(record, Tensor(img), cloud, calib, gt)
