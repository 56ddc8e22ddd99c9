"""Ray stage: multi-view tokens per hypothesized point, epipolar self-attention,
an LSTM run along each ray, and the SDF / zero-crossing heads.

Rays are processed in batches.  Shapes use B rays, K points per ray, N views,
C image-feature channels and C_v volume-feature channels; points are flattened
ray-major as M = B*K.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import geometry as geo
from .diffcore import Tensor
from .params import ParamStore, add_linear, glorot_uniform

logger = logging.getLogger(__name__)


@dataclass
class RayConfig:
    samples: int = 16               # K
    delta: float = 20.0             # half-range of the hypotheses, scene units
    channels: int = 8               # C
    volume_channels: int = 8        # C_v
    hidden: int = 50
    blocks: int = 4
    ff_mult: int = 4
    mlp_widths: tuple = (64, 64, 32)
    use_transformer: bool = True

    @property
    def point_dim(self) -> int:
        return 3 * self.channels + self.volume_channels


@dataclass
class RayOutput:
    sdf: Tensor                     # (B, K) normalized SDF predictions
    loc: Tensor                     # (B,) zero-crossing location in [0, 1]
    cell: Tensor                    # (B, hidden) c_K
    attention: list = field(default_factory=list)  # per block, (M, N, N) arrays
    tokens: np.ndarray | None = None


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(store: ParamStore, cfg: RayConfig, rng: np.random.Generator) -> None:
    c = cfg.channels
    for i in range(cfg.blocks):
        pre = f"ray.tf{i}"
        for m in ("Wq", "Wk", "Wv"):
            store.add(f"{pre}.{m}", glorot_uniform(rng, c, c))
        store.add(f"{pre}.ln1.g", np.ones(c))
        store.add(f"{pre}.ln1.b", np.zeros(c))
        add_linear(store, rng, f"{pre}.ff1", c, cfg.ff_mult * c)
        add_linear(store, rng, f"{pre}.ff2", cfg.ff_mult * c, c, relu=False)
        store.add(f"{pre}.ln2.g", np.ones(c))
        store.add(f"{pre}.ln2.b", np.zeros(c))
    h = cfg.hidden
    fan = cfg.point_dim + h
    lim = 1.0 / np.sqrt(h)
    for g in ("W", "Wf", "Wu", "Wo"):
        store.add(f"ray.lstm.{g}", rng.uniform(-lim, lim, size=(fan, h)))
    for g in ("b", "bf", "bu", "bo"):
        store.add(f"ray.lstm.{g}", np.zeros(h))
    _add_mlp(store, rng, "ray.mlp_s", h + cfg.point_dim + 1, cfg.mlp_widths)
    _add_mlp(store, rng, "ray.mlp_l", h, cfg.mlp_widths)


def _add_mlp(store, rng, name, cin, widths):
    dims = (cin,) + tuple(widths) + (1,)
    for i in range(len(dims) - 1):
        add_linear(store, rng, f"{name}.{i}", dims[i], dims[i + 1], relu=i < len(dims) - 2)


def _mlp(p: ParamStore, name: str, x: Tensor, layers: int = 4) -> Tensor:
    for i in range(layers):
        x = dc.linear(x, p[f"{name}.{i}.w"], p[f"{name}.{i}.b"])
        if i < layers - 1:
            x = dc.relu(x)
    return x


# ---------------------------------------------------------------------------
# token fetch
# ---------------------------------------------------------------------------


def token_matrices(points: np.ndarray, cameras, dtype=np.float64):
    """Per view: sparse (H*W, M) bilinear fetch matrix and (M,) in-view flags."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = []
    for cam in cameras:
        uv, z = geo.project_points(cam, pts)
        front = z > 1e-9
        uv = np.where(front[:, None], uv, -1.0)
        idx, w, inview = geo.bilinear_weights(uv, cam.height, cam.width)
        out.append((geo.weights_matrix(idx, w.astype(dtype), cam.height * cam.width), inview & front))
    return out


def fetch_point_tokens(points, features, cameras, mats=None):
    """Tokens (M, N, C) for M points and in-view flags (M, N); out-of-view tokens are zero."""
    features = dc.as_tensor(features)
    n, c, h, w = features.shape
    if mats is None:
        mats = token_matrices(points, cameras, features.dtype)
    cols = [dc.resample(dc.reshape(features[v], (c, h * w)), mats[v][0]) for v in range(n)]
    tokens = dc.transpose(dc.stack(cols, axis=0), (2, 0, 1))
    flags = np.stack([m[1] for m in mats], axis=1)
    return tokens, flags


def volume_matrix(points: np.ndarray, vcam: geo.Camera, planes: np.ndarray, dtype=np.float64):
    """Sparse (D*h*w, M) trilinear fetch from F^V at the points' (column, row, plane) coordinates."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    uv, z = geo.project_points(vcam, pts)
    spacing = (planes[-1] - planes[0]) / (len(planes) - 1)
    xyz = np.column_stack([uv, (z - planes[0]) / spacing])
    idx, w, inside = geo.trilinear_weights(xyz, len(planes), vcam.height, vcam.width)
    return geo.weights_matrix(idx, w.astype(dtype), len(planes) * vcam.height * vcam.width), inside


def fetch_volume_features(fv: Tensor, mat) -> Tensor:
    cv = fv.shape[0]
    return dc.transpose(dc.resample(dc.reshape(fv, (cv, -1)), mat))


# ---------------------------------------------------------------------------
# epipolar transformer
# ---------------------------------------------------------------------------


def transformer_block(x: Tensor, p: ParamStore, i: int):
    """One block over tokens (M, N, C); returns (output, attention weights)."""
    pre = f"ray.tf{i}"
    q = dc.matmul(x, p[f"{pre}.Wq"])
    k = dc.matmul(x, p[f"{pre}.Wk"])
    v = dc.matmul(x, p[f"{pre}.Wv"])
    attn = dc.softmax(dc.matmul(q, dc.swapaxes(k, -1, -2)), axis=-1)
    s = dc.matmul(attn, v)
    z = dc.layer_norm(dc.add(x, s), p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
    ff = dc.relu(dc.linear(z, p[f"{pre}.ff1.w"], p[f"{pre}.ff1.b"]))
    ff = dc.linear(ff, p[f"{pre}.ff2.w"], p[f"{pre}.ff2.b"])
    return dc.layer_norm(dc.add(z, ff), p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"]), attn


def epipolar_transformer(tokens: Tensor, params: ParamStore, blocks: int = 4):
    """Attention-aware view features (M, N, C) plus each block's attention array."""
    if tokens.shape[1] < 2:
        raise ValueError("epipolar transformer needs at least 2 view tokens")
    x, maps = tokens, []
    for i in range(blocks):
        x, a = transformer_block(x, params, i)
        maps.append(a.data)
    return x, maps


def aggregate_point_feature(fa: Tensor, fvp: Tensor) -> Tensor:
    """[mean over views | population variance | reference token | F^V_p] -> (M, 3C + C_v)."""
    return dc.concat([dc.mean(fa, axis=1), dc.var(fa, axis=1), fa[:, 0, :], fvp], axis=1)


# ---------------------------------------------------------------------------
# LSTM and heads
# ---------------------------------------------------------------------------


def _fused(p: ParamStore):
    w = dc.concat([p["ray.lstm.W"], p["ray.lstm.Wf"], p["ray.lstm.Wu"], p["ray.lstm.Wo"]], axis=1)
    b = dc.concat([p["ray.lstm.b"], p["ray.lstm.bf"], p["ray.lstm.bu"], p["ray.lstm.bo"]], axis=0)
    return w, b


def _cell(gates: Tensor, h: Tensor | None, c: Tensor | None, wh: Tensor, hidden: int):
    if h is not None:
        gates = dc.add(gates, dc.matmul(h, wh))
    z = dc.tanh(gates[:, :hidden])
    zf = dc.sigmoid(gates[:, hidden:2 * hidden])
    zu = dc.sigmoid(gates[:, 2 * hidden:3 * hidden])
    zo = dc.sigmoid(gates[:, 3 * hidden:])
    c_new = dc.mul(zu, z) if c is None else dc.add(dc.mul(zf, c), dc.mul(zu, z))
    return dc.mul(zo, dc.tanh(c_new)), c_new


def lstm_step(f_k, h_prev, c_prev, params: ParamStore):
    """One recurrence step for inputs (B, D) and states (B, hidden)."""
    f_k, h_prev, c_prev = dc.as_tensor(f_k), dc.as_tensor(h_prev), dc.as_tensor(c_prev)
    w, b = _fused(params)
    d, hidden = f_k.shape[-1], h_prev.shape[-1]
    gates = dc.linear(f_k, w[:d], b)
    return _cell(gates, h_prev, c_prev, w[d:], hidden)


def run_ray(point_features: Tensor, dbar: np.ndarray, params: ParamStore) -> RayOutput:
    """Run the LSTM over K point features (B, K, D) and evaluate both heads."""
    f = dc.as_tensor(point_features)
    b, k, d = f.shape
    hidden = params["ray.lstm.b"].shape[0]
    w, bias = _fused(params)
    wx, wh = w[:d], w[d:]
    gates = dc.linear(f, wx, bias)   # input contributions for every step at once
    h = c = None
    for i in range(k):
        h, c = _cell(gates[:, i, :], h, c, wh, hidden)
    ck = dc.broadcast_to(dc.reshape(c, (b, 1, hidden)), (b, k, hidden))
    dcol = Tensor(np.broadcast_to(np.asarray(dbar, dtype=f.dtype).reshape(1, k, 1), (b, k, 1)).copy())
    sdf = dc.tanh(_mlp(params, "ray.mlp_s", dc.concat([ck, f, dcol], axis=2)))
    loc = dc.sigmoid(_mlp(params, "ray.mlp_l", c))
    return RayOutput(dc.reshape(sdf, (b, k)), dc.reshape(loc, (b,)), c)


# ---------------------------------------------------------------------------
# full ray stage
# ---------------------------------------------------------------------------


@dataclass
class RayBatch:
    pixels: np.ndarray      # (B, 2)
    coarse: np.ndarray      # (B,) coarse depth used for sampling (after any noise)
    depths: np.ndarray      # (B, K)
    points: np.ndarray      # (B, K, 3)
    dbar: np.ndarray        # (K,)


def make_ray_batch(camera: geo.Camera, pixels, coarse, delta: float, K: int) -> RayBatch:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    coarse = np.asarray(coarse, dtype=np.float64).reshape(-1)
    depths = geo.hypothesis_depths(coarse, delta, K)
    pts = geo.backproject(camera, np.repeat(pixels, K, axis=0), depths.reshape(-1)).reshape(-1, K, 3)
    return RayBatch(pixels, coarse, depths, pts, geo.normalized_indices(K))


class RayNet:
    """Parameters plus the batched forward pass of the ray stage."""

    def __init__(self, cfg: RayConfig, params: ParamStore, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.params = params
        if "ray.lstm.W" not in params:
            init_params(params, cfg, rng if rng is not None else np.random.default_rng(0))

    def forward(self, batch: RayBatch, features: Tensor, fv: Tensor, cameras, vcam, planes,
                keep_attention: bool = False) -> RayOutput:
        cfg = self.cfg
        b, k = batch.depths.shape
        pts = batch.points.reshape(-1, 3)
        tokens, _ = fetch_point_tokens(pts, features, cameras)
        if cfg.use_transformer:
            fa, maps = epipolar_transformer(tokens, self.params, cfg.blocks)
        else:
            fa, maps = tokens, []
        vmat, _ = volume_matrix(pts, vcam, planes, fv.dtype)
        fp = aggregate_point_feature(fa, fetch_volume_features(fv, vmat))
        out = run_ray(dc.reshape(fp, (b, k, fp.shape[-1])), batch.dbar, self.params)
        if keep_attention:
            out.attention = maps
            out.tokens = tokens.data
        return out


@dataclass
class RayStore:
    """Per-pixel ray predictions of one depth map."""
    pixels: np.ndarray
    coarse: np.ndarray
    sdf: np.ndarray
    loc: np.ndarray


def predict_depth_map(net: RayNet, coarse_out, cameras, noise_std: float = 0.0,
                      rng: np.random.Generator | None = None, batch_size: int = 2048,
                      valid: np.ndarray | None = None, loc_override: np.ndarray | None = None):
    """Refine a coarse depth map ray by ray.

    Returns a ``DepthMap``-like triple (depth, confidence, mask) and a
    ``RayStore``.  ``loc_override`` (H, W) substitutes given locations for the
    predicted ones (used to check the label/decode pair).
    """
    from .coarsenet import DepthMap

    cam = cameras[0]
    coarse = coarse_out.depth.data.astype(np.float64)
    if noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        coarse = coarse + rng.normal(0.0, noise_std, size=coarse.shape)
    delta, K = net.cfg.delta, net.cfg.samples
    ok = coarse - delta > 0
    if valid is not None:
        ok &= valid
    v, u = np.nonzero(ok)
    pix = np.column_stack([u, v]).astype(np.float64)
    sdf = np.zeros((len(pix), K))
    loc = np.zeros(len(pix))
    vol = coarse_out.volume
    with dc.no_grad():
        for lo in range(0, len(pix), batch_size):
            sl = slice(lo, lo + batch_size)
            rb = make_ray_batch(cam, pix[sl], coarse[v[sl], u[sl]], delta, K)
            out = net.forward(rb, coarse_out.features, coarse_out.fv, cameras, vol.camera, vol.planes)
            sdf[sl] = out.sdf.data
            loc[sl] = out.loc.data
    if loc_override is not None:
        loc = np.asarray(loc_override)[v, u]
    depth = coarse.copy()
    conf = np.zeros_like(coarse)
    depth[v, u] = geo.location_to_depth(loc, coarse[v, u], delta)
    conf[v, u] = coarse_out.confidence[v, u]
    return DepthMap(depth, conf, ok), RayStore(pix, coarse[v, u], sdf, loc)


# ---------------------------------------------------------------------------
# debug dumps
# ---------------------------------------------------------------------------


def write_ray_profile(path, depths, dbar, sdf, sdf_gt, loc, loc_gt) -> None:
    """Text table: k, d_k, dbar_k, predicted and true normalized SDF, then l and l-hat."""
    lines = ["# k d_k dbar_k sdf sdf_gt"]
    for i in range(len(depths)):
        gt = "nan" if sdf_gt is None else f"{sdf_gt[i]:.6f}"
        lines.append(f"{i + 1} {depths[i]:.6f} {dbar[i]:.6f} {sdf[i]:.6f} {gt}")
    lines.append(f"# l {loc:.6f}")
    lines.append(f"# l_hat {'nan' if loc_gt is None else f'{loc_gt:.6f}'}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_attention(path, maps, depths) -> None:
    """Attention grids (N x N per hypothesized point) for each block."""
    lines = []
    for b, a in enumerate(maps):
        for k, grid in enumerate(a):
            lines.append(f"# block {b} point {k + 1} depth {depths[k]:.6f}")
            lines.extend(" ".join(f"{x:.6f}" for x in row) for row in grid)
    Path(path).write_text("\n".join(lines) + "\n")
