"""Pinhole cameras, rays, plane-sweep warps and interpolated fetches.

Conventions: pixel ``(u, v)`` is (column, row) with integer values at pixel
centers.  Cameras map world to camera frame as ``x_cam = R @ x_world + t``.
Depth always means camera-frame z, never Euclidean distance along a ray.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class GeometryError(ValueError):
    pass


class NotProjectableError(GeometryError):
    """A point lies on or behind the image plane of a camera."""


@dataclass(frozen=True)
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-8 or abs(np.linalg.det(R) - 1.0) > 1e-8:
            raise GeometryError("rotation must be orthonormal with determinant +1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError(f"focal lengths must be positive, got {K[0, 0]}, {K[1, 1]}")
        if not (0 <= K[0, 2] <= self.width and 0 <= K[1, 2] <= self.height):
            raise GeometryError(f"principal point ({K[0, 2]}, {K[1, 2]}) outside the image")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def axis(self) -> np.ndarray:
        """Optical axis in world coordinates."""
        return self.R[2]

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def scaled(self, s: float) -> "Camera":
        """Camera for an image resampled by factor ``s`` (pixel centers preserved)."""
        K = self.K.copy()
        K[0, 0] *= s
        K[1, 1] *= s
        K[0, 2] = (K[0, 2] + 0.5) * s - 0.5
        K[1, 2] = (K[1, 2] + 0.5) * s - 0.5
        return Camera(K, self.R, self.t, int(round(self.width * s)), int(round(self.height * s)))


def look_at(eye, target, up, focal: float, width: int, height: int) -> Camera:
    """Camera at ``eye`` looking at ``target``; image rows run along -up."""
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    K = np.array([[focal, 0, (width - 1) / 2], [0, focal, (height - 1) / 2], [0, 0, 1.0]])
    return Camera(K, R, -R @ eye, width, height)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple
    # camera-frame depth gained per unit length along the ray
    depth_rate: float = 1.0

    def point_at_depth(self, depth):
        depth = np.asarray(depth, dtype=np.float64)
        return self.origin + (depth / self.depth_rate)[..., None] * self.direction


@dataclass
class RaySampling:
    coarse_depth: float
    delta: float
    count: int
    depths: np.ndarray
    points: np.ndarray
    normalized: np.ndarray


# ---------------------------------------------------------------------------
# rays and projection
# ---------------------------------------------------------------------------


def _homog(uv: np.ndarray) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    return np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)


def pixel_ray(camera: Camera, pixel) -> Ray:
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u <= camera.width - 1 and 0 <= v <= camera.height - 1):
        raise GeometryError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    d_cam = camera.K_inv @ np.array([u, v, 1.0])
    d = camera.R.T @ d_cam
    n = np.linalg.norm(d)
    return Ray(camera.center, d / n, (u, v), depth_rate=1.0 / n)


def backproject(camera: Camera, uv, depth) -> np.ndarray:
    """World points at camera-frame ``depth`` behind pixels ``uv`` (vectorized)."""
    d_cam = _homog(uv) @ camera.K_inv.T
    x_cam = d_cam * np.asarray(depth, dtype=np.float64)[..., None]
    return (x_cam - camera.t) @ camera.R


def project_points(camera: Camera, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns ``(uv, depth)`` without validity checks."""
    x_cam = np.asarray(points, dtype=np.float64) @ camera.R.T + camera.t
    z = x_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = x_cam @ camera.K.T
        uv = pix[..., :2] / z[..., None]
    return uv, z


def project(camera: Camera, point) -> tuple[np.ndarray, float]:
    uv, z = project_points(camera, np.asarray(point, dtype=np.float64).reshape(3))
    if not z > 0:
        raise NotProjectableError(f"point {point} has depth {z:.6g} in camera frame")
    return uv, float(z)


def relative_pose(ref: Camera, src: Camera) -> tuple[np.ndarray, np.ndarray]:
    """``(R, t)`` mapping reference-camera coordinates into source-camera coordinates."""
    R = src.R @ ref.R.T
    return R, src.t - R @ ref.t


def plane_homography(ref: Camera, src: Camera, depth: float) -> np.ndarray:
    """Homography induced by the fronto-parallel plane ``z_ref = depth``."""
    if depth <= 0:
        raise GeometryError(f"plane depth must be positive, got {depth}")
    R, t = relative_pose(ref, src)
    n = np.array([0.0, 0.0, 1.0])
    return src.K @ (R + np.outer(t, n) / depth) @ ref.K_inv


def homography_warp(ref: Camera, src: Camera, plane_depth, ref_pixel):
    """Warp reference pixels to the source view through depth planes.

    Returns ``(src_uv, valid)``; ``valid`` is False where the plane point lies
    behind the source camera.  Broadcasts ``plane_depth`` (D,) against
    ``ref_pixel`` (P, 2) to (D, P, 2) when both are arrays.
    """
    depths = np.atleast_1d(np.asarray(plane_depth, dtype=np.float64))
    if (depths <= 0).any():
        raise GeometryError("plane depth must be positive")
    x = _homog(np.asarray(ref_pixel, dtype=np.float64))
    R, t = relative_pose(ref, src)
    n = np.array([0.0, 0.0, 1.0])
    base = x @ (src.K @ R @ ref.K_inv).T
    shift = (src.K @ np.outer(t, n) @ ref.K_inv) @ x.reshape(-1, 3).T
    shift = shift.T.reshape(x.shape)
    hx = base[None] + shift[None] / depths.reshape((-1,) + (1,) * x.ndim)
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = hx[..., :2] / hx[..., 2:3]
    valid = hx[..., 2] > 1e-12
    if np.ndim(plane_depth) == 0:
        uv, valid = uv[0], valid[0]
    return uv, valid


def fundamental_matrix(ref: Camera, src: Camera) -> np.ndarray:
    R, t = relative_pose(ref, src)
    if np.linalg.norm(t) < 1e-12:
        raise GeometryError("camera centers coincide; epipole undefined")
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    return np.linalg.inv(src.K).T @ tx @ R @ ref.K_inv


def epipolar_line(ref: Camera, src: Camera, ref_pixel) -> np.ndarray:
    """Line ``(a, b, c)`` with ``a u + b v + c = 0`` in the source image, ``a^2 + b^2 = 1``."""
    line = fundamental_matrix(ref, src) @ _homog(np.asarray(ref_pixel, dtype=np.float64))
    return line / np.linalg.norm(line[..., :2], axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------


# samples this close outside the border still count as in view (round-off from warps)
EDGE_TOL = 1e-6


def _axis_weights(x: np.ndarray, n: int):
    i0 = np.clip(np.floor(x), 0, max(n - 2, 0)).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    f = x - i0
    return i0, i1, f


def bilinear_weights(uv, height: int, width: int):
    """Flat neighbor indices (P, 4), weights (P, 4) and in-view flags (P,)."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    u, v = uv[:, 0], uv[:, 1]
    e = EDGE_TOL
    inview = (np.isfinite(u) & np.isfinite(v) & (u >= -e) & (u <= width - 1 + e)
              & (v >= -e) & (v <= height - 1 + e))
    u = np.where(inview, np.clip(u, 0, width - 1), 0.0)
    v = np.where(inview, np.clip(v, 0, height - 1), 0.0)
    x0, x1, fx = _axis_weights(u, width)
    y0, y1, fy = _axis_weights(v, height)
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    w *= inview[:, None]
    return idx, w, inview


def trilinear_weights(xyz, depth: int, height: int, width: int):
    """Flat neighbor indices (P, 8), weights (P, 8), in-volume flags (P,).

    ``xyz`` holds (column, row, slice) coordinates in voxel units.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    e = EDGE_TOL
    inside = (np.isfinite(xyz).all(axis=1) & (x >= -e) & (x <= width - 1 + e) & (y >= -e)
              & (y <= height - 1 + e) & (z >= -e) & (z <= depth - 1 + e))
    x, y, z = (np.where(inside, np.clip(a, 0, n - 1), 0.0)
               for a, n in ((x, width), (y, height), (z, depth)))
    x0, x1, fx = _axis_weights(x, width)
    y0, y1, fy = _axis_weights(y, height)
    z0, z1, fz = _axis_weights(z, depth)
    idx, w = [], []
    for zi, wz in ((z0, 1 - fz), (z1, fz)):
        for yi, wy in ((y0, 1 - fy), (y1, fy)):
            for xi, wx in ((x0, 1 - fx), (x1, fx)):
                idx.append((zi * height + yi) * width + xi)
                w.append(wz * wy * wx)
    w = np.stack(w, axis=1) * inside[:, None]
    return np.stack(idx, axis=1), w, inside


def weights_matrix(idx: np.ndarray, w: np.ndarray, size: int) -> sp.csr_matrix:
    """Sparse (size, P) matrix so that ``values[C, size] @ M`` performs the fetch."""
    p, j = idx.shape
    cols = np.repeat(np.arange(p), j)
    return sp.csr_matrix((w.reshape(-1), (idx.reshape(-1), cols)), shape=(size, p))


def bilinear_fetch(feature_map: np.ndarray, uv):
    """Sample a (C, H, W) map at ``uv`` (..., 2); returns (..., C) values and flags."""
    fm = np.asarray(feature_map)
    if fm.size == 0:
        raise GeometryError("feature map is empty")
    uv = np.asarray(uv, dtype=np.float64)
    c, h, w = fm.shape
    idx, wts, inview = bilinear_weights(uv, h, w)
    flat = fm.reshape(c, -1)
    vals = np.einsum("cpj,pj->pc", flat[:, idx], wts)
    return vals.reshape(uv.shape[:-1] + (c,)), inview.reshape(uv.shape[:-1])


def trilinear_fetch(volume: np.ndarray, xyz):
    """Sample a (C, D, H, W) volume at (column, row, slice) coordinates."""
    vol = np.asarray(volume)
    if vol.size == 0:
        raise GeometryError("volume is empty")
    xyz = np.asarray(xyz, dtype=np.float64)
    c, d, h, w = vol.shape
    idx, wts, inside = trilinear_weights(xyz, d, h, w)
    flat = vol.reshape(c, -1)
    vals = np.einsum("cpj,pj->pc", flat[:, idx], wts)
    return vals.reshape(xyz.shape[:-1] + (c,)), inside.reshape(xyz.shape[:-1])


# ---------------------------------------------------------------------------
# hypothesis sampling and the normalized coordinate
# ---------------------------------------------------------------------------


def hypothesis_depths(coarse_depth, delta: float, count: int) -> np.ndarray:
    """Inclusive uniform samples over [coarse - delta, coarse + delta]; shape (..., count)."""
    if count < 2:
        raise GeometryError("K >= 2 required")
    coarse = np.asarray(coarse_depth, dtype=np.float64)
    if (coarse - delta <= 0).any():
        raise GeometryError(f"nonpositive near depth {float((coarse - delta).min())}")
    steps = np.arange(count) * (2.0 * delta / (count - 1))
    return (coarse - delta)[..., None] + steps


def normalized_indices(count: int) -> np.ndarray:
    return np.arange(1, count + 1, dtype=np.float64) / count


def sample_hypotheses(ray: Ray, coarse_depth: float, delta: float, count: int) -> RaySampling:
    depths = hypothesis_depths(coarse_depth, delta, count)
    return RaySampling(float(coarse_depth), float(delta), int(count), depths,
                       ray.point_at_depth(depths), normalized_indices(count))


class _ClampCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def add(self, n: int) -> None:
        with self._lock:
            self.count += n


location_clamps = _ClampCounter()


def location_to_depth(location, coarse_depth, delta: float):
    """Map the normalized location in [0, 1] onto [coarse - delta, coarse + delta]."""
    loc = np.asarray(location, dtype=np.float64)
    bad = int(np.count_nonzero((loc < 0) | (loc > 1)))
    if bad:
        location_clamps.add(bad)
        logger.warning("clamped %d zero-crossing locations outside [0, 1]", bad)
        loc = np.clip(loc, 0.0, 1.0)
    depth = np.asarray(coarse_depth, dtype=np.float64) - delta + loc * (2.0 * delta)
    return float(depth) if depth.ndim == 0 else depth


def depth_to_location(depth, coarse_depth, delta: float):
    """Inverse of :func:`location_to_depth`: clamped label and in-range flag."""
    raw = (np.asarray(depth, dtype=np.float64) - np.asarray(coarse_depth) + delta) / (2.0 * delta)
    in_range = (raw >= 0) & (raw <= 1)
    return np.clip(raw, 0.0, 1.0), in_range


# ---------------------------------------------------------------------------
# camera text files
# ---------------------------------------------------------------------------


def write_camera(camera: Camera, path) -> None:
    rows = ["K"] + [" ".join(repr(float(x)) for x in r) for r in camera.K]
    rows += ["R"] + [" ".join(repr(float(x)) for x in r) for r in camera.R]
    rows += ["t", " ".join(repr(float(x)) for x in camera.t)]
    rows += ["size", f"{camera.width} {camera.height}"]
    Path(path).write_text("\n".join(rows) + "\n")


def read_camera(path, width: int | None = None, height: int | None = None) -> Camera:
    sections: dict[str, list[list[float]]] = {}
    current = None
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line in ("K", "R", "t", "size"):
            current = line
            sections[current] = []
            continue
        if current is None:
            raise GeometryError(f"{path}:{n}: values before a section header")
        try:
            sections[current].append([float(x) for x in line.split()])
        except ValueError as exc:
            raise GeometryError(f"{path}:{n}: {exc}") from exc
    try:
        K = np.array(sections["K"]).reshape(3, 3)
        R = np.array(sections["R"]).reshape(3, 3)
        t = np.array(sections["t"]).reshape(3)
    except (KeyError, ValueError) as exc:
        raise GeometryError(f"{path}: malformed camera file ({exc})") from exc
    if "size" in sections:
        width, height = (int(x) for x in sections["size"][0])
    if width is None or height is None:
        raise GeometryError(f"{path}: image size unknown")
    return Camera(K, R, t, width, height)
