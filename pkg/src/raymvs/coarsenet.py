"""Coarse stage: 2D U-Net features, plane-sweep variance volume, 3D U-Net, soft-argmin depth."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from . import geometry as geo
from .diffcore import Tensor
from .params import ParamStore, add_conv

logger = logging.getLogger(__name__)

CONF_WINDOW = 4


@dataclass
class CoarseConfig:
    channels: int = 8                    # C of the image features
    widths: tuple = (8, 16, 32)          # 2D U-Net encoder widths
    volume_widths: tuple = (8, 16, 32)   # 3D U-Net encoder widths
    volume_channels: int = 8             # C_v of F^V
    num_planes: int = 48
    volume_scale: float = 0.5            # cost-volume resolution relative to the image


@dataclass
class CostVolume:
    variance: Tensor          # (C, D, h, w)
    planes: np.ndarray        # (D,)
    camera: geo.Camera        # reference camera at volume resolution
    counts: np.ndarray        # (D, h, w) in-view entries per voxel


@dataclass
class DepthMap:
    depth: np.ndarray
    confidence: np.ndarray
    mask: np.ndarray


@dataclass
class CoarseOutput:
    features: Tensor          # (N, C, H, W)
    volume: CostVolume
    fv: Tensor                # (C_v, D, h, w)
    prob: Tensor              # (D, h, w)
    depth: Tensor             # (H, W) full-resolution soft-argmin
    confidence: np.ndarray    # (H, W)

    def depth_map(self) -> DepthMap:
        return DepthMap(self.depth.data.astype(np.float64), self.confidence,
                        np.ones(self.depth.shape, dtype=bool))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(store: ParamStore, cfg: CoarseConfig, rng: np.random.Generator) -> None:
    w0, w1, w2 = cfg.widths
    add_conv(store, rng, "unet2d.conv0", 3, w0, 3, 2)
    add_conv(store, rng, "unet2d.conv1", w0, w0, 3, 2)
    add_conv(store, rng, "unet2d.conv2", w0, w1, 3, 2)
    add_conv(store, rng, "unet2d.conv3", w1, w1, 3, 2)
    add_conv(store, rng, "unet2d.conv4", w1, w2, 3, 2)
    add_conv(store, rng, "unet2d.conv5", w2, w2, 3, 2)
    add_conv(store, rng, "unet2d.deconv0", w2, w1, 3, 2, transpose=True)
    add_conv(store, rng, "unet2d.deconv1", 2 * w1, w1, 3, 2, transpose=True)
    add_conv(store, rng, "unet2d.deconv2", w1, w0, 3, 2, transpose=True)
    add_conv(store, rng, "unet2d.deconv3", 2 * w0, w0, 3, 2, transpose=True)
    add_conv(store, rng, "unet2d.deconv4", w0, w0, 3, 2, transpose=True)
    add_conv(store, rng, "unet2d.deconv5", w0, cfg.channels, 3, 2, transpose=True)

    c = cfg.channels
    v0, v1, v2 = cfg.volume_widths
    add_conv(store, rng, "unet3d.conv0", c, v0, 3, 3)
    add_conv(store, rng, "unet3d.conv1", v0, v1, 3, 3)
    add_conv(store, rng, "unet3d.conv2", v1, v2, 3, 3)
    add_conv(store, rng, "unet3d.deconv0", v2, v1, 3, 3, transpose=True)
    add_conv(store, rng, "unet3d.deconv1", 2 * v1, v0, 3, 3, transpose=True)
    add_conv(store, rng, "unet3d.deconv2", 2 * v0, cfg.volume_channels, 3, 3, transpose=True)
    add_conv(store, rng, "unet3d.prob", cfg.volume_channels + c, 1, 1, 3)


def _conv(p: ParamStore, name: str, x, stride=1, relu=True, nd=2):
    fn = dc.conv2d if nd == 2 else dc.conv3d
    w = p[f"{name}.w"]
    y = fn(x, w, p[f"{name}.b"], stride=stride, padding=w.shape[-1] // 2)
    return dc.relu(y) if relu else y


def _deconv(p: ParamStore, name: str, x, stride=1, relu=True, nd=2):
    fn = dc.conv_transpose2d if nd == 2 else dc.conv_transpose3d
    w = p[f"{name}.w"]
    y = fn(x, w, p[f"{name}.b"], stride=stride, padding=1, output_padding=stride - 1)
    return dc.relu(y) if relu else y


# ---------------------------------------------------------------------------
# 2D features
# ---------------------------------------------------------------------------

DOWNSAMPLE_2D = 4


def extract_features(images, params: ParamStore) -> Tensor:
    """Full-resolution C-channel features for (B, H, W, 3) images in [0, 1]."""
    imgs = np.asarray(images, dtype=params.dtype)
    if imgs.ndim == 3:
        imgs = imgs[None]
    _, h, w, _ = imgs.shape
    if h % DOWNSAMPLE_2D or w % DOWNSAMPLE_2D:
        raise ValueError(f"image size {w}x{h} must be a multiple of {DOWNSAMPLE_2D}")
    x = Tensor(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2)) - params.dtype.type(0.5))
    p = params
    e0 = _conv(p, "unet2d.conv1", _conv(p, "unet2d.conv0", x))
    e1 = _conv(p, "unet2d.conv3", _conv(p, "unet2d.conv2", e0, stride=2))
    e2 = _conv(p, "unet2d.conv5", _conv(p, "unet2d.conv4", e1, stride=2))
    d1 = _deconv(p, "unet2d.deconv0", e2, stride=2)
    d1 = _deconv(p, "unet2d.deconv1", dc.concat([d1, e1], axis=1))
    d0 = _deconv(p, "unet2d.deconv2", d1, stride=2)
    d0 = _deconv(p, "unet2d.deconv3", dc.concat([d0, e0], axis=1))
    d0 = _deconv(p, "unet2d.deconv4", d0)
    return _deconv(p, "unet2d.deconv5", d0, relu=False)


# ---------------------------------------------------------------------------
# cost volume
# ---------------------------------------------------------------------------


def plane_depths(depth_range, count: int) -> np.ndarray:
    lo, hi = float(depth_range[0]), float(depth_range[1])
    if count < 2:
        raise ValueError("D >= 2 planes required")
    if not 0 < lo < hi:
        raise ValueError(f"depth range must satisfy 0 < min < max, got {depth_range}")
    return np.linspace(lo, hi, count)


def volume_camera(ref: geo.Camera, scale: float) -> geo.Camera:
    return ref if scale == 1 else ref.scaled(scale)


def warp_matrices(cameras, planes: np.ndarray, scale: float, dtype=np.float64):
    """Per view: sparse (H*W, D*h*w) fetch matrix and (D*h*w,) in-view flags."""
    ref = cameras[0]
    vcam = volume_camera(ref, scale)
    grid = np.stack(np.meshgrid(np.arange(vcam.width), np.arange(vcam.height)), -1).reshape(-1, 2)
    out = []
    for cam in cameras:
        uv, ok = geo.homography_warp(vcam, cam, planes, grid.astype(np.float64))
        idx, w, inview = geo.bilinear_weights(uv.reshape(-1, 2), cam.height, cam.width)
        inview &= ok.reshape(-1)
        w = w * inview[:, None]
        out.append((geo.weights_matrix(idx, w.astype(dtype), cam.height * cam.width), inview))
    return vcam, out


def build_cost_volume(features: Tensor, cameras, depth_range, num_planes: int,
                      scale: float = 1.0, planes: np.ndarray | None = None) -> CostVolume:
    """Variance over in-view entries; voxels seen by < 2 views take the max variance."""
    features = dc.as_tensor(features)
    n, c, h, w = features.shape
    if n < 2 or len(cameras) < 2:
        raise ValueError("cost volume needs at least 2 views")
    if len(cameras) != n:
        raise ValueError(f"{n} feature maps but {len(cameras)} cameras")
    planes = plane_depths(depth_range, num_planes) if planes is None else np.asarray(planes)
    vcam, mats = warp_matrices(cameras, planes, scale, features.dtype)
    total = s1 = s2 = None
    count = np.zeros(len(planes) * vcam.height * vcam.width)
    for v, (mat, inview) in enumerate(mats):
        f = dc.resample(dc.reshape(features[v], (c, h * w)), mat)
        count += inview
        sq = dc.square(f)
        s1 = f if s1 is None else dc.add(s1, f)
        s2 = sq if s2 is None else dc.add(s2, sq)
    inv = (1.0 / np.maximum(count, 1)).astype(features.dtype)
    inv_t = Tensor(np.broadcast_to(inv, (c, len(inv))).copy())
    mean = dc.mul(s1, inv_t)
    var = dc.sub(dc.mul(s2, inv_t), dc.square(mean))
    var = dc.relu(var)  # clip rounding below zero
    valid = count >= 2
    if not valid.all():
        fill = var.data[:, valid].max(axis=1) if valid.any() else np.zeros(c, dtype=features.dtype)
        keep = Tensor(np.broadcast_to(valid, var.shape).astype(features.dtype))
        const = np.where(valid[None], 0.0, fill[:, None]).astype(features.dtype)
        var = dc.add(dc.mul(var, keep), Tensor(const))
    shape = (c, len(planes), vcam.height, vcam.width)
    return CostVolume(dc.reshape(var, shape), planes, vcam, count.reshape(shape[1:]))


# ---------------------------------------------------------------------------
# 3D regularization
# ---------------------------------------------------------------------------

DOWNSAMPLE_3D = 8


def regularize_volume(variance: Tensor, params: ParamStore) -> tuple[Tensor, Tensor]:
    """3D U-Net over the variance volume: (F^V (C_v, D, h, w), probability (D, h, w))."""
    c, d, h, w = variance.shape
    if d % DOWNSAMPLE_3D or h % DOWNSAMPLE_3D or w % DOWNSAMPLE_3D:
        raise ValueError(f"volume {d}x{h}x{w} must be a multiple of {DOWNSAMPLE_3D} per axis")
    p = params
    x0 = dc.reshape(variance, (1, c, d, h, w))
    x1 = _conv(p, "unet3d.conv0", x0, stride=2, nd=3)
    x2 = _conv(p, "unet3d.conv1", x1, stride=2, nd=3)
    x3 = _conv(p, "unet3d.conv2", x2, stride=2, nd=3)
    y2 = _deconv(p, "unet3d.deconv0", x3, stride=2, nd=3)
    y1 = _deconv(p, "unet3d.deconv1", dc.concat([y2, x2], axis=1), stride=2, nd=3)
    fv = _deconv(p, "unet3d.deconv2", dc.concat([y1, x1], axis=1), stride=2, relu=False, nd=3)
    logits = _conv(p, "unet3d.prob", dc.concat([fv, x0], axis=1), relu=False, nd=3)
    prob = dc.softmax(dc.reshape(logits, (d, h, w)), axis=0)
    cv = fv.shape[1]
    return dc.reshape(fv, (cv, d, h, w)), prob


# ---------------------------------------------------------------------------
# depth regression
# ---------------------------------------------------------------------------


def expected_depth(prob: Tensor, planes: np.ndarray) -> Tensor:
    """Soft-argmin: sum_d prob(d) * depth(d), shape (h, w)."""
    prob = dc.as_tensor(prob)
    d = prob.shape[0]
    wts = Tensor(np.broadcast_to(planes.reshape(d, *([1] * (prob.ndim - 1))), prob.shape)
                 .astype(prob.dtype))
    return dc.tsum(dc.mul(prob, wts), axis=0)


def window_confidence(prob: np.ndarray, planes: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Probability mass in the 4 planes around the expected plane index."""
    d = prob.shape[0]
    idx = np.interp(depth, planes, np.arange(d))
    start = np.clip(np.floor(idx).astype(int) - (CONF_WINDOW // 2 - 1), 0, d - CONF_WINDOW)
    csum = np.concatenate([np.zeros((1,) + prob.shape[1:]), np.cumsum(prob, axis=0)])
    hi = np.take_along_axis(csum, (start + CONF_WINDOW)[None], 0)[0]
    lo = np.take_along_axis(csum, start[None], 0)[0]
    return np.clip(hi - lo, 0.0, 1.0)


def coarse_depth(prob, planes) -> DepthMap:
    prob = dc.as_tensor(prob)
    planes = np.asarray(planes, dtype=np.float64)
    with dc.no_grad():
        depth = expected_depth(Tensor(prob.data.astype(np.float64)), planes).data
    conf = window_confidence(prob.data.astype(np.float64), planes, depth)
    return DepthMap(depth, conf, np.ones(depth.shape, dtype=bool))


def upsample_matrix(vcam: geo.Camera, cam: geo.Camera, dtype=np.float64):
    """Sparse (h*w, H*W) bilinear map from the volume grid to full-resolution pixels."""
    s = vcam.width / cam.width
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    uv = np.stack([(u + 0.5) * s - 0.5, (v + 0.5) * s - 0.5], -1).reshape(-1, 2)
    uv = np.clip(uv, 0, [vcam.width - 1, vcam.height - 1])
    idx, w, _ = geo.bilinear_weights(uv, vcam.height, vcam.width)
    return geo.weights_matrix(idx, w.astype(dtype), vcam.height * vcam.width)


# ---------------------------------------------------------------------------
# full stage
# ---------------------------------------------------------------------------


class CoarseNet:
    """Parameters plus the forward pass of the coarse stage."""

    def __init__(self, cfg: CoarseConfig, params: ParamStore, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.params = params
        if "unet2d.conv0.w" not in params:
            init_params(params, cfg, rng if rng is not None else np.random.default_rng(0))

    def required_multiple(self) -> int:
        s = self.cfg.volume_scale
        return int(np.lcm(DOWNSAMPLE_2D, int(round(DOWNSAMPLE_3D / s))))

    def forward(self, images, cameras, depth_range) -> CoarseOutput:
        feats = extract_features(images, self.params)
        vol = build_cost_volume(feats, cameras, depth_range, self.cfg.num_planes, self.cfg.volume_scale)
        fv, prob = regularize_volume(vol.variance, self.params)
        low = expected_depth(prob, vol.planes)
        ref = cameras[0]
        up = upsample_matrix(vol.camera, ref, low.dtype)
        h, w = vol.camera.height, vol.camera.width
        depth = dc.reshape(dc.resample(dc.reshape(low, (1, h * w)), up), (ref.height, ref.width))
        conf_low = window_confidence(prob.data.astype(np.float64), vol.planes, low.data.astype(np.float64))
        conf = np.asarray(up.T @ conf_low.reshape(-1)).reshape(ref.height, ref.width)
        return CoarseOutput(feats, vol, fv, prob, depth, conf)


def masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean |pred - target| over masked pixels."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("masked L1 over an empty mask")
    tgt = Tensor(np.where(m, target, 0.0).astype(pred.dtype))
    wts = Tensor((m / m.sum()).astype(pred.dtype))
    return dc.tsum(dc.mul(dc.tabs(dc.sub(pred, tgt)), wts))
