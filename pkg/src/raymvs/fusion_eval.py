"""Depth-map filtering, point-cloud fusion, PLY I/O and reconstruction metrics."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import geometry as geo
from .scenegen import DataError, pixel_grid, trace_rays

logger = logging.getLogger(__name__)

DEFAULT_CLAMP = 20.0
DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0, 8.0)


class PlyError(DataError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray                  # (P, 3)
    colors: np.ndarray | None = None    # (P, 3) uint8

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud has non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError(f"{len(self.colors)} colors for {len(self.points)} points")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class MetricsReport:
    accuracy: float = float("nan")
    completeness: float = float("nan")
    overall: float = float("nan")
    clamp: float = DEFAULT_CLAMP
    curve: list = field(default_factory=list)   # [(threshold, fraction), ...]

    def to_dict(self) -> dict:
        out = {}
        if not np.isnan(self.overall):
            out.update(accuracy=self.accuracy, completeness=self.completeness,
                       overall=self.overall, clamp=self.clamp)
        if self.curve:
            out["curve"] = [{"threshold": float(t), "fraction": float(f)} for t, f in self.curve]
        return out

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------


def valid_depth(depth) -> np.ndarray:
    depth = np.asarray(depth)
    return np.isfinite(depth) & (depth > 0)


def photometric_filter(depth, confidence, threshold: float) -> np.ndarray:
    """Keep valid pixels whose confidence reaches ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    depth = np.asarray(depth)
    confidence = np.asarray(confidence)
    if depth.shape != confidence.shape:
        raise ValueError(f"depth {depth.shape} and confidence {confidence.shape} differ in shape")
    return valid_depth(depth) & (confidence >= threshold)


def _sample_depth(depth: np.ndarray, uv: np.ndarray):
    """Bilinear depth lookup; NaN when any of the four taps is invalid or outside."""
    h, w = depth.shape
    out = np.full(len(uv), np.nan)
    u, v = uv[:, 0], uv[:, 1]
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (v >= 0) & (u <= w - 1) & (v <= h - 1)
    if not inside.any():
        return out
    u, v = u[inside], v[inside]
    u0 = np.minimum(np.floor(u).astype(int), w - 2) if w > 1 else np.zeros(len(u), int)
    v0 = np.minimum(np.floor(v).astype(int), h - 2) if h > 1 else np.zeros(len(v), int)
    u1, v1 = np.minimum(u0 + 1, w - 1), np.minimum(v0 + 1, h - 1)
    fu, fv = u - u0, v - v0
    taps = np.stack([depth[v0, u0], depth[v0, u1], depth[v1, u0], depth[v1, u1]])
    wts = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv])
    ok = valid_depth(taps).all(axis=0)
    vals = (taps * wts).sum(axis=0)
    out[np.flatnonzero(inside)[ok]] = vals[ok]
    return out


def cross_check(ref_depth, ref_cam: geo.Camera, src_depth, src_cam: geo.Camera,
                reproj_px_tol: float = 1.0, depth_rel_tol: float = 0.01) -> np.ndarray:
    """Forward-backward consistency of the reference depth against one source view.

    A reference pixel is projected into the source view, the source depth is
    read there and lifted back into the reference camera.  The pixel agrees
    when the round trip lands within ``reproj_px_tol`` pixels and the depth
    disagreement relative to the reference depth is within ``depth_rel_tol``.
    """
    ref_depth = np.asarray(ref_depth, dtype=np.float64)
    src_depth = np.asarray(src_depth, dtype=np.float64)
    h, w = ref_depth.shape
    uv = pixel_grid(w, h).reshape(-1, 2)
    d = ref_depth.reshape(-1)
    ok = valid_depth(d)
    out = np.zeros(h * w, dtype=bool)
    if not ok.any():
        return out.reshape(h, w)
    idx = np.flatnonzero(ok)
    pts = geo.backproject(ref_cam, uv[idx], d[idx])
    uv_src, z_src = geo.project_points(src_cam, pts)
    ds = _sample_depth(src_depth, uv_src)
    front = (z_src > 0) & np.isfinite(ds)
    idx, uv_src, ds = idx[front], uv_src[front], ds[front]
    back = geo.backproject(src_cam, uv_src, ds)
    uv_ref, z_ref = geo.project_points(ref_cam, back)
    err_px = np.linalg.norm(uv_ref - uv[idx], axis=1)
    err_rel = np.abs(z_ref - d[idx]) / d[idx]
    good = (z_ref > 0) & (err_px <= reproj_px_tol) & (err_rel <= depth_rel_tol)
    out[idx[good]] = True
    return out.reshape(h, w)


def geometric_filter(ref_depth, ref_cam: geo.Camera, others, reproj_px_tol: float = 1.0,
                     depth_rel_tol: float = 0.01, min_views: int = 2) -> np.ndarray:
    """Keep reference pixels that agree with at least ``min_views`` source views.

    ``others`` is a sequence of ``(depth, camera)`` pairs.
    """
    others = list(others)
    if not others:
        raise ValueError("geometric_filter needs at least one other view")
    votes = np.zeros(np.shape(ref_depth), dtype=int)
    for depth, cam in others:
        votes += cross_check(ref_depth, ref_cam, depth, cam, reproj_px_tol, depth_rel_tol)
    return votes >= min_views


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def unproject(depth, camera: geo.Camera, mask=None) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    keep = valid_depth(depth) if mask is None else (np.asarray(mask, bool) & valid_depth(depth))
    uv = pixel_grid(camera.width, camera.height)[keep]
    return geo.backproject(camera, uv, depth[keep])


def merge_points(points: np.ndarray, radius: float, colors=None):
    """Greedy radius clustering; each cluster is replaced by its centroid.

    Seeds are visited in input order and claim every unclaimed point within
    ``radius`` of themselves, so a cluster never spans more than ``2 * radius``.
    """
    points = np.asarray(points, dtype=np.float64)
    if radius <= 0 or len(points) < 2:
        return points.copy(), None if colors is None else np.asarray(colors).copy()
    tree = cKDTree(points)
    label = np.full(len(points), -1)
    n = 0
    for i, nbrs in enumerate(tree.query_ball_point(points, radius)):
        if label[i] >= 0:
            continue
        nbrs = np.asarray(nbrs, dtype=int)
        label[nbrs[label[nbrs] < 0]] = n
        n += 1
    counts = np.bincount(label, minlength=n)[:, None]
    merged = np.zeros((n, 3))
    np.add.at(merged, label, points)
    merged /= counts
    if colors is None:
        return merged, None
    col = np.zeros((n, 3))
    np.add.at(col, label, np.asarray(colors, dtype=np.float64))
    return merged, np.round(col / counts).astype(np.uint8)


def fuse(depths, masks, cameras, merge_radius: float = 0.5, images=None) -> PointCloud:
    """Unproject kept pixels of every view and merge near-duplicates."""
    if not (len(depths) == len(masks) == len(cameras)):
        raise ValueError("depths, masks and cameras must have equal length")
    pts, cols = [], []
    for i, (d, m, cam) in enumerate(zip(depths, masks, cameras)):
        if np.shape(d) != (cam.height, cam.width):
            raise ValueError(f"view {i}: depth {np.shape(d)} does not match camera {cam.height}x{cam.width}")
        pts.append(unproject(d, cam, m))
        if images is not None:
            keep = np.asarray(m, bool) & valid_depth(d)
            cols.append(np.round(np.clip(images[i][keep], 0, 1) * 255))
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    colors = np.concatenate(cols) if images is not None and cols else None
    if len(points) == 0:
        logger.warning("fusion produced an empty point cloud")
        return PointCloud(points, None if colors is None else colors.astype(np.uint8))
    merged, colors = merge_points(points, merge_radius, colors)
    return PointCloud(merged, colors)


def gt_point_cloud(scene, cameras, density: float = 1.0, max_depth: float = 1e4) -> PointCloud:
    """Sample the analytic surface by sphere-tracing every pixel of rescaled cameras.

    ``density`` scales the image resolution of each camera (2.0 quadruples the
    number of rays).
    """
    pts = []
    for cam in cameras:
        c = cam.scaled(density) if density != 1.0 else cam
        uv = pixel_grid(c.width, c.height).reshape(-1, 2)
        dirs = geo.backproject(c, uv, np.ones(len(uv))) - c.center
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t = trace_rays(scene, np.broadcast_to(c.center, dirs.shape), dirs, max_depth)
        hit = np.isfinite(t)
        pts.append(c.center + t[hit, None] * dirs[hit])
    return PointCloud(np.concatenate(pts) if pts else np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def nearest_distances(query, reference) -> np.ndarray:
    """Distance from each query point to its nearest reference point."""
    d, _ = cKDTree(np.asarray(reference, dtype=np.float64)).query(np.asarray(query, dtype=np.float64))
    return d


def eval_acc_comp(pred: PointCloud, gt: PointCloud, clamp: float = DEFAULT_CLAMP) -> MetricsReport:
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError(f"empty point cloud (pred {len(pred)}, gt {len(gt)} points)")
    acc = float(np.minimum(nearest_distances(pred.points, gt.points), clamp).mean())
    comp = float(np.minimum(nearest_distances(gt.points, pred.points), clamp).mean())
    return MetricsReport(accuracy=acc, completeness=comp, overall=(acc + comp) / 2, clamp=clamp)


def depth_error_curve(pred, gt, thresholds=DEFAULT_THRESHOLDS, mask=None) -> np.ndarray:
    """Fraction of valid pixels with absolute depth error strictly below each threshold."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"depth maps differ in shape: {pred.shape} vs {gt.shape}")
    valid = valid_depth(gt) & np.isfinite(pred)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise ValueError("no valid pixels to evaluate")
    err = np.abs(pred[valid] - gt[valid])
    return np.array([(err < t).mean() for t in np.asarray(thresholds, dtype=np.float64)])


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(cloud: PointCloud, path) -> None:
    """Binary little-endian PLY with float32 xyz and optional uchar RGB."""
    has_color = cloud.colors is not None
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.zeros(len(cloud), dtype=fields)
    for i, k in enumerate("xyz"):
        rec[k] = cloud.points[:, i]
    if has_color:
        for i, k in enumerate(("red", "green", "blue")):
            rec[k] = cloud.colors[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + rec.tobytes())


def _parse_header(raw: bytes, path):
    if not raw.startswith(b"ply"):
        raise PlyError(f"{path}: byte 0: missing 'ply' magic")
    pos = 0
    fmt = None
    elements = []   # [name, count, [(prop, dtype | None)]]
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise PlyError(f"{path}: byte {pos}: header not terminated by end_header")
        line = raw[pos:end].decode("ascii", errors="replace").strip()
        toks = line.split()
        if not toks or toks[0] in ("ply", "comment", "obj_info"):
            pass
        elif toks[0] == "format":
            if len(toks) != 3 or toks[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"{path}: byte {pos}: unsupported format line '{line}'")
            fmt = toks[1]
        elif toks[0] == "element":
            if len(toks) != 3 or not toks[2].isdigit():
                raise PlyError(f"{path}: byte {pos}: malformed element line '{line}'")
            elements.append([toks[1], int(toks[2]), []])
        elif toks[0] == "property":
            if not elements:
                raise PlyError(f"{path}: byte {pos}: property before any element")
            if len(toks) == 5 and toks[1] == "list":
                elements[-1][2].append((toks[4], None))
            elif len(toks) == 3 and toks[1] in _PLY_TYPES:
                elements[-1][2].append((toks[2], _PLY_TYPES[toks[1]]))
            else:
                raise PlyError(f"{path}: byte {pos}: malformed property line '{line}'")
        elif toks[0] == "end_header":
            if fmt is None:
                raise PlyError(f"{path}: byte {pos}: end_header before format line")
            return fmt, elements, end + 1
        else:
            raise PlyError(f"{path}: byte {pos}: unexpected header keyword '{toks[0]}'")
        pos = end + 1


def read_ply(path) -> PointCloud:
    """Read the vertex element of an ASCII or binary little-endian PLY."""
    raw = Path(path).read_bytes()
    fmt, elements, body = _parse_header(raw, path)
    if not elements or elements[0][0] != "vertex":
        raise PlyError(f"{path}: byte {body}: first element must be 'vertex'")
    _, count, props = elements[0]
    names = [p for p, _ in props]
    if not {"x", "y", "z"} <= set(names):
        raise PlyError(f"{path}: byte {body}: vertex element lacks x/y/z properties")
    if any(dt is None for _, dt in props):
        raise PlyError(f"{path}: byte {body}: list properties on vertices are unsupported")
    if fmt == "binary_little_endian":
        dtype = np.dtype([(p, "<" + dt) for p, dt in props])
        need = dtype.itemsize * count
        if len(raw) - body < need:
            raise PlyError(f"{path}: byte {len(raw)}: vertex data truncated, expected {need} bytes after offset {body}")
        rec = np.frombuffer(raw, dtype=dtype, count=count, offset=body)
        cols = {p: rec[p] for p in names}
    else:
        pos = body
        rows = []
        for i in range(count):
            end = raw.find(b"\n", pos)
            end = len(raw) if end < 0 else end
            toks = raw[pos:end].split()
            if len(toks) != len(props):
                raise PlyError(f"{path}: byte {pos}: vertex {i} has {len(toks)} values, expected {len(props)}")
            try:
                rows.append([float(t) for t in toks])
            except ValueError as exc:
                raise PlyError(f"{path}: byte {pos}: vertex {i}: {exc}") from exc
            pos = end + 1
        table = np.asarray(rows, dtype=np.float64).reshape(count, len(props))
        cols = {p: table[:, j].astype(dt) for j, (p, dt) in enumerate(props)}
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    colors = None
    if {"red", "green", "blue"} <= set(names):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(np.uint8)
    if not np.isfinite(pts).all():
        raise PlyError(f"{path}: byte {body}: non-finite vertex coordinates")
    return PointCloud(pts, colors)


# ---------------------------------------------------------------------------
# directory-level fusion
# ---------------------------------------------------------------------------


def fuse_scene(scene_dir, depth_dir, conf_threshold: float = 0.3, reproj_px_tol: float = 1.0,
               depth_rel_tol: float = 0.01, min_views: int = 2, merge_radius: float = 0.5) -> PointCloud:
    """Filter and fuse the per-view depth maps written by ``raymvs infer``.

    Expects ``view_J.depth`` and optionally ``view_J.conf`` in ``depth_dir``;
    cameras and images come from the scene directory.
    """
    from .scenegen import read_depth, read_manifest, read_png

    scene_dir, depth_dir = Path(scene_dir), Path(depth_dir)
    man = read_manifest(scene_dir)
    ids = [v["id"] for v in man["views"]]
    found = [j for j in ids if (depth_dir / f"view_{j}.depth").exists()]
    if not found:
        raise DataError(f"{depth_dir}: no view_J.depth files for scene {scene_dir}")
    cams = {j: geo.read_camera(scene_dir / f"view_{j}.cam") for j in ids}
    depths = {j: read_depth(depth_dir / f"view_{j}.depth") for j in found}
    masks, images = [], []
    for j in found:
        conf_path = depth_dir / f"view_{j}.conf"
        keep = (photometric_filter(depths[j], read_depth(conf_path), conf_threshold)
                if conf_path.exists() else valid_depth(depths[j]))
        others = [(depths[i], cams[i]) for i in found if i != j]
        if others and min_views > 0:
            keep &= geometric_filter(depths[j], cams[j], others, reproj_px_tol, depth_rel_tol, min_views)
        masks.append(keep)
        images.append(read_png(scene_dir / f"view_{j}.png"))
        logger.info("view %d: kept %d of %d pixels", j, int(keep.sum()), keep.size)
    return fuse([depths[j] for j in found], masks, [cams[j] for j in found], merge_radius, images)
