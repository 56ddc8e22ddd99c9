"""Synthetic multi-view scenes with exact depth and signed-distance labels.

Scenes are unions of analytic primitives (sphere, axis-aligned box, plane),
rendered with Lambertian plus Blinn specular shading.  Ground-truth depth
comes from sphere tracing the same SDF that supplies per-ray labels, so the
two are consistent by construction.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry as geo

logger = logging.getLogger(__name__)

MISS = 0.0


class LabelError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------


@dataclass
class Material:
    albedo: tuple = (0.8, 0.8, 0.8)
    specular: float = 0.0
    # solid colour pattern modulating albedo; base frequency in radians per scene unit
    pattern_freq: float = 0.0
    pattern_amp: float = 0.0
    pattern_phase: tuple = (0.0, 0.0, 0.0)


@dataclass
class Sphere:
    center: tuple
    radius: float
    material: Material = field(default_factory=Material)

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


@dataclass
class Box:
    center: tuple
    half: tuple
    material: Material = field(default_factory=Material)

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)


@dataclass
class Plane:
    normal: tuple
    offset: float
    material: Material = field(default_factory=Material)

    def sdf(self, p):
        n = np.asarray(self.normal, dtype=np.float64)
        return p @ (n / np.linalg.norm(n)) - self.offset


@dataclass
class Translate:
    child: object
    offset: tuple

    def sdf(self, p):
        return self.child.sdf(p - np.asarray(self.offset))


@dataclass
class Union:
    children: list

    def sdf(self, p):
        return np.min(np.stack([c.sdf(p) for c in self.children]), axis=0)


_KINDS = {"sphere": Sphere, "box": Box, "plane": Plane, "translate": Translate, "union": Union}


def node_to_dict(node) -> dict:
    kind = {v: k for k, v in _KINDS.items()}[type(node)]
    if isinstance(node, Union):
        return {"kind": kind, "children": [node_to_dict(c) for c in node.children]}
    if isinstance(node, Translate):
        return {"kind": kind, "offset": list(node.offset), "child": node_to_dict(node.child)}
    d = asdict(node)
    d["kind"] = kind
    return d


def node_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "union":
        return Union([node_from_dict(c) for c in d["children"]])
    if kind == "translate":
        return Translate(node_from_dict(d["child"]), tuple(d["offset"]))
    if kind not in _KINDS:
        raise DataError(f"unknown scene node kind {kind!r}")
    mat = Material(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("material", {}).items()})
    return _KINDS[kind](**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}, material=mat)


def _leaves(node, offset=np.zeros(3)):
    """(primitive, accumulated translation) pairs."""
    if isinstance(node, Union):
        for c in node.children:
            yield from _leaves(c, offset)
    elif isinstance(node, Translate):
        yield from _leaves(node.child, offset + np.asarray(node.offset))
    else:
        yield node, offset


def scene_sdf(scene, point):
    """Signed distance of ``point`` (..., 3): negative inside, positive outside."""
    return scene.sdf(np.asarray(point, dtype=np.float64))


def _wave_vectors() -> np.ndarray:
    d = np.random.default_rng(123).normal(size=(9, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * np.array([1.0, 1.37, 1.83, 0.71, 2.29, 1.13, 0.53, 1.61, 2.71])[:, None]


# fixed directions and relative frequencies of the solid albedo pattern
_WAVES = _wave_vectors()


def _materials_at(scene, p):
    """Albedo (..., 3) and specular strength (...) of the nearest primitive."""
    leaves = list(_leaves(scene))
    dists = np.stack([prim.sdf(p - off) for prim, off in leaves])
    owner = np.argmin(dists, axis=0)
    albedo = np.zeros(p.shape[:-1] + (3,))
    spec = np.zeros(p.shape[:-1])
    for i, (prim, off) in enumerate(leaves):
        sel = owner == i
        if not sel.any():
            continue
        m = prim.material
        a = np.broadcast_to(np.asarray(m.albedo, dtype=np.float64), (int(sel.sum()), 3))
        if m.pattern_freq > 0 and m.pattern_amp > 0:
            q = p[sel] - off
            arg = m.pattern_freq * (q @ _WAVES.T) + np.tile(np.asarray(m.pattern_phase), 3)
            # three incommensurate waves per colour channel, so nearby points rarely look alike
            wave = np.sin(arg).reshape(-1, 3, 3).mean(axis=1)
            a = a * (1.0 - m.pattern_amp + m.pattern_amp * (0.5 + 0.5 * np.clip(1.7 * wave, -1, 1)))
        albedo[sel] = a
        spec[sel] = m.specular
    return albedo, spec


# ---------------------------------------------------------------------------
# sphere tracing
# ---------------------------------------------------------------------------


def trace_rays(scene, origins, directions, max_dist: float, tol: float = 1e-7,
               max_iter: int = 2000):
    """Distance along unit rays to the first surface crossing; NaN on a miss."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    t = np.zeros(len(o))
    active = np.ones(len(o), dtype=bool)
    hit = np.zeros(len(o), dtype=bool)
    coarse_tol = 1e-5
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        f = scene.sdf(o[idx] + t[idx, None] * d[idx])
        done = f < coarse_tol
        hit[idx[done]] = True
        step = np.maximum(f, 0.0)
        t[idx] += np.where(done, 0.0, step)
        gone = t[idx] > max_dist
        active[idx[done | gone]] = False
    # Newton polish of the hit distance; the SDF is smooth near a single primitive
    idx = np.flatnonzero(hit)
    h = 1e-6
    for _ in range(6):
        if not len(idx):
            break
        p = o[idx] + t[idx, None] * d[idx]
        f = scene.sdf(p)
        fp = (scene.sdf(p + h * d[idx]) - scene.sdf(p - h * d[idx])) / (2 * h)
        ok = fp < -1e-3
        upd = np.where(ok, -f / np.where(ok, fp, -1.0), 0.0)
        t[idx] += np.clip(upd, -1e-3, 1e-3)
        idx = idx[np.abs(upd) > tol * 1e-3]
    out = np.where(hit & (t <= max_dist), t, np.nan)
    return out.reshape(np.shape(origins)[:-1])


def sphere_trace(scene, ray: geo.Ray, max_depth: float):
    """Distance along ``ray`` to the first surface, or ``None`` on a miss."""
    t = trace_rays(scene, ray.origin[None], ray.direction[None], max_depth)[0]
    return None if np.isnan(t) else float(t)


def dense_march(scene, origin, direction, t0: float, t1: float, step: float = 1e-5) -> float | None:
    """Brute-force first sign change of the SDF; slow reference for tests."""
    ts = np.arange(t0, t1, step)
    for lo in range(0, len(ts), 200_000):
        chunk = ts[lo:lo + 200_000]
        f = scene.sdf(origin + chunk[:, None] * direction)
        neg = np.flatnonzero(f <= 0)
        if len(neg):
            return float(chunk[neg[0]])
    return None


def surface_normals(scene, p, h: float = 1e-4):
    g = np.zeros_like(p)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g[..., i] = scene.sdf(p + e) - scene.sdf(p - e)
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


@dataclass
class Lighting:
    direction: tuple = (0.0, -0.3, -1.0)
    intensity: float = 0.85
    ambient: float = 0.15
    shininess: float = 32.0
    background: tuple = (0.0, 0.0, 0.0)


def pixel_grid(width: int, height: int) -> np.ndarray:
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def render_view(scene, camera: geo.Camera, lighting: Lighting, max_depth: float = 1e4):
    """Shaded image (H, W, 3) in [0, 1], z-depth map (0 on miss) and hit mask."""
    uv = pixel_grid(camera.width, camera.height).reshape(-1, 2)
    dirs = geo.backproject(camera, uv, np.ones(len(uv))) - camera.center
    rate = 1.0 / np.linalg.norm(dirs, axis=1)
    dirs *= rate[:, None]
    origins = np.broadcast_to(camera.center, dirs.shape)
    t = trace_rays(scene, origins, dirs, max_depth / rate.min())
    mask = ~np.isnan(t)
    depth = np.where(mask, t * rate, MISS)
    img = np.broadcast_to(np.asarray(lighting.background, dtype=np.float64), (len(uv), 3)).copy()
    if mask.any():
        p = origins[mask] + t[mask, None] * dirs[mask]
        n = surface_normals(scene, p)
        light = np.asarray(lighting.direction, dtype=np.float64)
        light = -light / np.linalg.norm(light)  # towards the light
        view = -dirs[mask]
        half = light + view
        half /= np.linalg.norm(half, axis=1, keepdims=True)
        albedo, spec = _materials_at(scene, p)
        diffuse = lighting.ambient + lighting.intensity * np.maximum(n @ light, 0.0)
        shine = spec * lighting.intensity * np.maximum((n * half).sum(axis=1), 0.0) ** lighting.shininess
        img[mask] = albedo * diffuse[:, None] + shine[:, None]
    img = np.clip(img, 0.0, 1.0)
    h, w = camera.height, camera.width
    return img.reshape(h, w, 3), depth.reshape(h, w), mask.reshape(h, w)


# ---------------------------------------------------------------------------
# per-ray labels
# ---------------------------------------------------------------------------


def ray_labels(scene, points, coarse_depth, gt_depth, delta: float):
    """Normalized SDF labels (M, K), zero-crossing labels (M,) and in-range flags (M,).

    ``points`` (M, K, 3) are the hypothesized samples; ``gt_depth`` the
    sphere-traced z-depth of each ray.
    """
    s = scene.sdf(np.asarray(points, dtype=np.float64))
    smax = np.abs(s).max(axis=-1, keepdims=True)
    if (smax == 0).any():
        raise LabelError("degenerate ray: all sampled SDF values are zero")
    loc, in_range = geo.depth_to_location(gt_depth, coarse_depth, delta)
    return s / smax, loc, in_range


def gt_ray_labels(scene, ray: geo.Ray, sampling: geo.RaySampling, max_depth: float = 1e4):
    """Labels for one ray: (normalized SDFs, location label, in-range flag)."""
    t = sphere_trace(scene, ray, max_depth / ray.depth_rate)
    if t is None:
        raise LabelError(f"ray through pixel {ray.pixel} misses the scene")
    s, loc, ok = ray_labels(scene, sampling.points[None], np.array([sampling.coarse_depth]),
                            np.array([t * ray.depth_rate]), sampling.delta)
    return s[0], float(loc[0]), bool(ok[0])


# ---------------------------------------------------------------------------
# rigs, random scenes, datasets
# ---------------------------------------------------------------------------


@dataclass
class SceneConfig:
    num_scenes: int = 3
    num_views: int = 5
    width: int = 64
    height: int = 64
    focal: float = 80.0
    camera_distance: float = 250.0
    baseline_deg: float = 30.0
    light_jitter_deg: float = 10.0
    specular: float = 0.3
    pattern_period: float = 14.0
    delta: float = 20.0
    depth_range: tuple = (160.0, 480.0)
    seed: int = 0


def camera_rig(cfg: SceneConfig, rng: np.random.Generator) -> list[geo.Camera]:
    """Reference camera first, sources spread on an arc around it."""
    n = cfg.num_views
    offsets = [0.0]
    side = np.linspace(-cfg.baseline_deg, cfg.baseline_deg, n - 1) if n > 2 else [cfg.baseline_deg]
    offsets += [float(a) for a in side]
    cams = []
    for k, az in enumerate(offsets):
        elev = 0.0 if k == 0 else rng.uniform(-8.0, 8.0)
        a, e = np.radians(az), np.radians(elev)
        eye = cfg.camera_distance * np.array([np.sin(a) * np.cos(e), np.sin(e), -np.cos(a) * np.cos(e)])
        target = rng.uniform(-5, 5, size=3) if k else np.zeros(3)
        cams.append(geo.look_at(eye, target, [0.0, -1.0, 0.0], cfg.focal, cfg.width, cfg.height))
    return cams


def _material(rng, cfg: SceneConfig, specular: float) -> Material:
    return Material(albedo=tuple(float(x) for x in rng.uniform(0.45, 0.95, size=3)),
                    specular=float(specular),
                    pattern_freq=2 * np.pi / cfg.pattern_period,
                    pattern_amp=0.7,
                    pattern_phase=tuple(float(x) for x in rng.uniform(0, 2 * np.pi, size=3)))


def random_scene(cfg: SceneConfig, rng: np.random.Generator):
    """Sphere and box in front of a back wall, jittered by ``rng``."""
    sphere = Sphere(tuple(float(x) for x in (rng.uniform(-45, -25), rng.uniform(-15, 15), rng.uniform(-10, 10))),
                    float(rng.uniform(38, 48)), _material(rng, cfg, 0.0))
    box = Box(tuple(float(x) for x in (rng.uniform(30, 45), rng.uniform(-10, 10), rng.uniform(10, 25))),
              tuple(float(x) for x in rng.uniform(25, 35, size=3)), _material(rng, cfg, cfg.specular))
    wall = Plane((0.0, 0.0, -1.0), -float(rng.uniform(70, 90)), _material(rng, cfg, 0.0))
    return Union([sphere, box, wall])


def view_lighting(cfg: SceneConfig, rng: np.random.Generator, n: int) -> list[Lighting]:
    base = np.array([0.2, 0.35, 1.0])
    out = []
    for _ in range(n):
        jitter = np.radians(cfg.light_jitter_deg) * rng.normal(size=3)
        d = base / np.linalg.norm(base) + jitter
        out.append(Lighting(direction=tuple(float(x) for x in d / np.linalg.norm(d))))
    return out


@dataclass
class MultiViewSample:
    images: np.ndarray          # (N, H, W, 3) in [0, 1], reference first
    cameras: list
    depth: np.ndarray           # reference GT depth, 0 where missing
    mask: np.ndarray
    scene: object
    delta: float
    depth_range: tuple
    ref_index: int = 0
    view_ids: tuple = ()
    name: str = ""

    @property
    def num_views(self) -> int:
        return len(self.cameras)


def write_depth(path, depth: np.ndarray) -> None:
    """Raw depth: uint32 LE width, uint32 LE height, then float32 LE row-major."""
    depth = np.asarray(depth)
    h, w = depth.shape
    Path(path).write_bytes(struct.pack("<II", w, h) + depth.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated depth header")
    w, h = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 4 * w * h:
        raise DataError(f"{path}: expected {8 + 4 * w * h} bytes for {w}x{h}, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(h, w).astype(np.float64)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def render_scene(scene, cameras, lightings):
    return [render_view(scene, cam, light) for cam, light in zip(cameras, lightings)]


def make_dataset(cfg: SceneConfig, out_dir) -> list[Path]:
    """Render ``cfg.num_scenes`` scenes into ``out_dir``; deterministic given ``cfg.seed``."""
    if cfg.num_views < 2:
        raise DataError("num_views: need at least 2 views")
    if cfg.num_scenes < 1:
        raise DataError("num_scenes: need at least 1 scene")
    if cfg.width < 4 or cfg.height < 4:
        raise DataError("image size: width and height must be >= 4")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    rng = np.random.default_rng(cfg.seed)
    dirs = []
    for sid in range(cfg.num_scenes):
        scene = random_scene(cfg, rng)
        cams = camera_rig(cfg, rng)
        lights = view_lighting(cfg, rng, cfg.num_views)
        sdir = out / f"scene_{sid:03d}"
        sdir.mkdir(exist_ok=True)
        views = []
        for j, (img, depth, mask) in enumerate(render_scene(scene, cams, lights)):
            write_png(sdir / f"view_{j}.png", img)
            geo.write_camera(cams[j], sdir / f"view_{j}.cam")
            write_depth(sdir / f"view_{j}.depth", depth)
            views.append({"id": j, "image": f"view_{j}.png", "camera": f"view_{j}.cam",
                          "depth": f"view_{j}.depth", "coverage": float(mask.mean())})
        manifest = {
            "views": views,
            "reference": 0,
            "delta": cfg.delta,
            "depth_range": list(cfg.depth_range),
            "scene": node_to_dict(scene),
            "lighting": [asdict(lt) for lt in lights],
        }
        (sdir / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        dirs.append(sdir)
        logger.info("wrote %s", sdir)
    return dirs


def read_manifest(scene_dir) -> dict:
    path = Path(scene_dir) / "manifest"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"{path}: missing manifest") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc


def load_sample(scene_dir, ref: int | None = None) -> MultiViewSample:
    """Load a scene directory with view ``ref`` (default: manifest reference) first."""
    scene_dir = Path(scene_dir)
    man = read_manifest(scene_dir)
    ids = [v["id"] for v in man["views"]]
    ref = man["reference"] if ref is None else ref
    if ref not in ids:
        raise DataError(f"{scene_dir}: no view {ref}")
    order = [ref] + [i for i in ids if i != ref]
    by_id = {v["id"]: v for v in man["views"]}
    images, cams = [], []
    for i in order:
        img = read_png(scene_dir / by_id[i]["image"])
        h, w = img.shape[:2]
        images.append(img)
        cams.append(geo.read_camera(scene_dir / by_id[i]["camera"], w, h))
    if len({im.shape for im in images}) != 1:
        raise DataError(f"{scene_dir}: images differ in size")
    depth = read_depth(scene_dir / by_id[ref]["depth"])
    return MultiViewSample(np.stack(images), cams, depth, depth > 0, node_from_dict(man["scene"]),
                           float(man["delta"]), tuple(man["depth_range"]), ref, tuple(order),
                           scene_dir.name)


def scene_dirs(data_dir) -> list[Path]:
    dirs = sorted(p for p in Path(data_dir).glob("scene_*") if p.is_dir())
    if not dirs:
        raise DataError(f"{data_dir}: no scene_* directories")
    return dirs
