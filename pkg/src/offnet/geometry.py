"""LiDAR-to-image geometry: calibration, projection, depth completion, normals.

Raster formats follow the KITTI conventions: depth PNGs are 16-bit with
``round(depth_m * 256)`` and 0 meaning invalid; normal PNGs are 8-bit RGB
with ``round((n + 1) / 2 * 255)`` per channel.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

NEAR_PLANE = 0.1
DEPTH_SCALE = 256.0


class CalibrationError(ValueError):
    """Malformed calibration text."""


class DegenerateInputError(ValueError):
    """Input carries no usable measurements."""


@dataclass(frozen=True)
class Calibration:
    """Camera projection ``P2`` (3x4, pixels) and LiDAR-to-camera transform ``Tr`` (3x4, metres)."""

    intrinsic_projection: np.ndarray
    lidar_to_camera: np.ndarray

    @property
    def rotation(self) -> np.ndarray:
        return self.lidar_to_camera[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.lidar_to_camera[:, 3]

    def validate(self, tol: float = 1e-4) -> None:
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=tol):
            raise CalibrationError("rotation part of Tr_velo_to_cam is not orthonormal")
        p = self.intrinsic_projection
        if p[0, 0] <= 0 or p[1, 1] <= 0:
            raise CalibrationError("focal entries of P2 must be positive")

    def scaled(self, sx: float, sy: float) -> "Calibration":
        """Calibration for an image resized by ``sx`` horizontally and ``sy`` vertically."""
        p = self.intrinsic_projection.copy()
        p[0] *= sx
        p[1] *= sy
        return Calibration(p, self.lidar_to_camera.copy())


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 4): x, y, z, intensity in the LiDAR frame

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass
class DepthMap:
    depth: np.ndarray  # (H, W) metres, 0 where invalid
    valid: np.ndarray  # (H, W) bool

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass
class NormalMap:
    normal: np.ndarray  # (H, W, 3) unit vectors in the camera frame
    valid: np.ndarray  # (H, W) bool

    @property
    def height(self) -> int:
        return self.normal.shape[0]

    @property
    def width(self) -> int:
        return self.normal.shape[1]

    def to_chw(self) -> np.ndarray:
        """Channels-first float32 array with invalid pixels zeroed, as fed to the network."""
        n = np.where(self.valid[..., None], self.normal, 0.0)
        return np.ascontiguousarray(n.transpose(2, 0, 1), dtype=np.float32)


# -- calibration text --------------------------------------------------------

_CALIB_KEYS = ("P2", "Tr_velo_to_cam")


def parse_calibration(text: bytes | str) -> Calibration:
    """Parse ``P2:`` and ``Tr_velo_to_cam:`` lines (12 floats each, row-major).

    Other keys (``P0``, ``R0_rect`` ...) are ignored.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    found: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in _CALIB_KEYS:
            continue
        try:
            values = [float(v) for v in rest.split()]
        except ValueError as exc:
            raise CalibrationError(f"line {lineno} ({key}): non-numeric entry: {line!r}") from exc
        if len(values) != 12:
            raise CalibrationError(f"line {lineno} ({key}): expected 12 floats, got {len(values)}: {line!r}")
        found[key] = np.array(values, dtype=np.float64).reshape(3, 4)
    missing = [k for k in _CALIB_KEYS if k not in found]
    if missing:
        raise CalibrationError(f"calibration is missing key(s): {', '.join(missing)}")
    return Calibration(found["P2"], found["Tr_velo_to_cam"])


def format_calibration(calib: Calibration) -> str:
    def row(m):
        return " ".join(repr(float(v)) for v in m.reshape(-1))

    return f"P2: {row(calib.intrinsic_projection)}\nTr_velo_to_cam: {row(calib.lidar_to_camera)}\n"


def read_calibration(path: str | os.PathLike) -> Calibration:
    with open(path, "rb") as fh:
        return parse_calibration(fh.read())


def write_calibration(path: str | os.PathLike, calib: Calibration) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_calibration(calib))


# -- point clouds ------------------------------------------------------------

def read_point_cloud(path: str | os.PathLike) -> PointCloud:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise ValueError(f"{path}: byte length is not a multiple of 16")
    return PointCloud(raw.reshape(-1, 4))


def write_point_cloud(path: str | os.PathLike, cloud: PointCloud) -> None:
    cloud.points.astype("<f4").tofile(path)


# -- projection ----------------------------------------------------------------

def lidar_to_camera_frame(xyz: np.ndarray, calib: Calibration) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    return xyz @ calib.rotation.T + calib.translation


def project_camera(points_cam: np.ndarray, calib: Calibration) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous pinhole projection of camera-frame points to ``(u, v, depth)``."""
    pts = np.atleast_2d(np.asarray(points_cam, dtype=np.float64))
    p = calib.intrinsic_projection
    hom = pts @ p[:, :3].T + p[:, 3]
    return hom[:, 0] / hom[:, 2], hom[:, 1] / hom[:, 2], pts[:, 2]


def back_project(u, v, depth, calib: Calibration) -> np.ndarray:
    """Camera-frame point(s) whose projection is pixel ``(u, v)`` at camera depth ``depth``.

    Solves ``P[:, :3] X + P[:, 3] = w (u, v, 1)`` with ``X_z = depth`` for
    ``(X_x, X_y, w)``, so a non-zero fourth column of ``P2`` is honoured.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ValueError("back_project needs depth > 0")
    u, v, d = np.broadcast_arrays(u, v, d)
    shape = u.shape
    u, v, d = u.reshape(-1), v.reshape(-1), d.reshape(-1)
    p = calib.intrinsic_projection
    m = p[:, :3]
    a = np.empty((u.size, 3, 3))
    a[:, :, 0] = m[:, 0]
    a[:, :, 1] = m[:, 1]
    a[:, 0, 2] = -u
    a[:, 1, 2] = -v
    a[:, 2, 2] = -1.0
    rhs = -(m[:, 2][None, :] * d[:, None] + p[:, 3][None, :])
    sol = np.linalg.solve(a, rhs[..., None])[..., 0]
    out = np.stack([sol[:, 0], sol[:, 1], d], axis=-1)
    return out.reshape(*shape, 3)


def project_points(cloud: PointCloud, calib: Calibration, width: int, height: int) -> DepthMap:
    """Rasterise a LiDAR cloud into a sparse depth map with a min-depth z-buffer."""
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    depth = np.full((height, width), np.inf)
    if len(cloud):
        cam = lidar_to_camera_frame(cloud.xyz, calib)
        cam = cam[cam[:, 2] > NEAR_PLANE]
        if len(cam):
            u, v, z = project_camera(cam, calib)
            col = np.floor(u + 0.5)
            row = np.floor(v + 0.5)
            inside = (col >= 0) & (col < width) & (row >= 0) & (row < height) & np.isfinite(z)
            np.minimum.at(depth, (row[inside].astype(np.int64), col[inside].astype(np.int64)), z[inside])
    valid = np.isfinite(depth)
    return DepthMap(np.where(valid, depth, 0.0), valid)


# -- depth completion ----------------------------------------------------------

DIAMOND_5 = np.array(
    [
        [0, 0, 1, 0, 0],
        [0, 1, 1, 1, 0],
        [1, 1, 1, 1, 1],
        [0, 1, 1, 1, 0],
        [0, 0, 1, 0, 0],
    ],
    dtype=bool,
)


def densify_depth(sparse: DepthMap, max_iterations: int | None = None) -> DepthMap:
    """Fill every pixel by repeated min-dilation, then median-smooth the filled ones.

    Each round gives every still-empty pixel the minimum depth found inside
    a 5x5 diamond around it; rounds repeat until no pixel is empty.  A final
    3x3 median pass (edge-replicated) touches only filled pixels, so
    measured depths come through bit-exact.
    """
    if not sparse.valid.any():
        raise DegenerateInputError("densify_depth needs at least one valid pixel")
    measured = sparse.valid.copy()
    work = np.where(measured, sparse.depth, np.inf).astype(np.float64)
    limit = max_iterations or (sparse.height + sparse.width)
    for _ in range(limit):
        empty = ~np.isfinite(work)
        if not empty.any():
            break
        grown = ndimage.grey_erosion(work, footprint=DIAMOND_5, mode="constant", cval=np.inf)
        work = np.where(empty, grown, work)
    smoothed = ndimage.median_filter(work, size=3, mode="nearest")
    dense = np.where(measured, sparse.depth, smoothed)
    return DepthMap(dense, np.ones_like(measured))


# -- surface normals -----------------------------------------------------------

def _box_sum(a: np.ndarray, radius: int) -> np.ndarray:
    """Sum over a (2r+1)^2 window with zero padding, via an integral image."""
    h, w = a.shape
    pad = np.pad(a, radius + 1)
    ii = pad.cumsum(0).cumsum(1)
    k = 2 * radius + 1
    return ii[k : k + h, k : k + w] - ii[0:h, k : k + w] - ii[k : k + h, 0:w] + ii[0:h, 0:w]


def estimate_normals(dense: DepthMap, calib: Calibration, window: int = 7) -> NormalMap:
    """Windowed PCA plane fit on back-projected depth.

    The normal at a pixel is the eigenvector of the smallest eigenvalue of
    the covariance of the valid 3-D points in its window, flipped to face
    the camera (z <= 0).  Windows with fewer than 3 valid points are invalid.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    h, w = dense.depth.shape
    valid = dense.valid & (dense.depth > 0) & np.isfinite(dense.depth)
    normal = np.zeros((h, w, 3))
    out_valid = np.zeros((h, w), dtype=bool)
    if not valid.any():
        return NormalMap(normal, out_valid)

    vv, uu = np.nonzero(valid)
    pts = np.zeros((h, w, 3))
    pts[vv, uu] = back_project(uu, vv, dense.depth[vv, uu], calib)
    # centre on the mean point to keep raw second moments well conditioned
    pts[valid] -= pts[valid].mean(axis=0)
    m = valid.astype(np.float64)
    r = window // 2

    count = _box_sum(m, r)
    first = [_box_sum(pts[..., i] * m, r) for i in range(3)]
    cov = np.empty((h, w, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            s = _box_sum(pts[..., i] * pts[..., j] * m, r)
            cov[..., i, j] = cov[..., j, i] = s
    enough = count > 2.5
    n = np.where(enough, count, 1.0)
    mean = np.stack(first, axis=-1) / n[..., None]
    cov = cov / n[..., None, None] - mean[..., :, None] * mean[..., None, :]

    sel = enough & valid
    _, vecs = np.linalg.eigh(cov[sel])
    nv = vecs[:, :, 0]
    nv = np.where(nv[:, 2:3] > 0, -nv, nv)
    nv /= np.linalg.norm(nv, axis=1, keepdims=True)
    normal[sel] = nv
    out_valid[sel] = True
    return NormalMap(normal, out_valid)


# -- rasters -------------------------------------------------------------------

def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def encode_depth_png(dm: DepthMap) -> bytes:
    q = np.where(dm.valid, np.clip(np.floor(dm.depth * DEPTH_SCALE + 0.5), 1, 65535), 0)
    return _png_bytes(Image.fromarray(q.astype(np.uint16)))


def decode_depth_png(data: bytes) -> DepthMap:
    arr = np.array(Image.open(io.BytesIO(data)), dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("depth PNG must be single-channel")
    valid = arr > 0
    return DepthMap(np.where(valid, arr / DEPTH_SCALE, 0.0), valid)


def encode_normal_png(nm: NormalMap) -> bytes:
    q = np.clip(np.floor((nm.normal + 1.0) / 2.0 * 255.0 + 0.5), 0, 255).astype(np.uint8)
    q[~nm.valid] = 0
    return _png_bytes(Image.fromarray(q))


def decode_normal_png(data: bytes) -> NormalMap:
    arr = np.array(Image.open(io.BytesIO(data)).convert("RGB"))
    valid = arr.any(axis=-1)
    n = arr.astype(np.float64) / 255.0 * 2.0 - 1.0
    n[~valid] = 0.0
    return NormalMap(n, valid)


def write_bytes(path: str | os.PathLike, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)
