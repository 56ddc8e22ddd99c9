"""Losses, Adam, checkpoints and the two-phase training loop."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import geometry as geo
from . import scenegen as sg
from .coarsenet import CoarseNet, CoarseOutput, masked_l1
from .config import Config, TrainConfig, save_config
from .diffcore import NonFiniteError, Tensor
from .params import ParamStore
from .raynet import RayBatch, RayNet, make_ray_batch

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossTerms:
    sdf: Tensor          # L_s
    loc: Tensor          # L_l
    consistency: Tensor  # differentiable surrogate of L_sl
    indicator: float     # mean of the 0/1 consistency indicator
    total: Tensor


def loss_sdf(pred, label) -> Tensor:
    """Per-ray sum over K of |pred - label|; (B, K) -> (B,), (K,) -> scalar."""
    pred = dc.as_tensor(pred)
    label = np.asarray(label, dtype=pred.dtype)
    if pred.shape != label.shape:
        raise ValueError(f"loss_sdf: length mismatch {pred.shape} vs {label.shape}")
    return dc.tsum(dc.tabs(dc.sub(pred, Tensor(label))), axis=-1)


def loss_loc(loc, target) -> Tensor:
    loc = dc.as_tensor(loc)
    return dc.tabs(dc.sub(loc, Tensor(np.asarray(target, dtype=loc.dtype))))


def bracket_indices(loc: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """0-based indices of the samples on either side of location ``loc``."""
    a = np.clip(np.floor(np.asarray(loc) * (K - 1)).astype(int), 0, K - 1)
    return a, np.minimum(a + 1, K - 1)


def consistency_indicator(sa, sb) -> np.ndarray:
    return (np.asarray(sa) * np.asarray(sb) > 0).astype(np.float64)


def loss_consistency(sdf, loc) -> tuple[np.ndarray, Tensor]:
    """Indicator (B,) and hinge surrogate max(0, s_a * s_b) (B,) at the bracketing samples.

    The index choice is treated as a constant.
    """
    sdf, loc = dc.as_tensor(sdf), dc.as_tensor(loc)
    squeeze = sdf.ndim == 1
    if squeeze:
        sdf = dc.reshape(sdf, (1, -1))
    b, k = sdf.shape
    a_idx, b_idx = bracket_indices(np.reshape(loc.data, (-1,)), k)
    onehot_a = np.zeros((b, k), dtype=sdf.dtype)
    onehot_b = np.zeros((b, k), dtype=sdf.dtype)
    onehot_a[np.arange(b), a_idx] = 1
    onehot_b[np.arange(b), b_idx] = 1
    sa = dc.tsum(dc.mul(sdf, Tensor(onehot_a)), axis=1)
    sb = dc.tsum(dc.mul(sdf, Tensor(onehot_b)), axis=1)
    ind = consistency_indicator(sa.data, sb.data)
    surrogate = dc.relu(dc.mul(sa, sb))
    if squeeze:
        return ind[0], dc.reshape(surrogate, ())
    return ind, surrogate


def total_loss(l_s, l_l, l_sl, weights=(0.1, 0.8, 0.1)):
    ws, wl, wsl = (float(w) for w in weights)
    if all(isinstance(x, (int, float)) for x in (l_s, l_l, l_sl)):
        return ws * l_s + wl * l_l + wsl * l_sl
    return dc.add(dc.add(dc.mul(l_s, ws), dc.mul(l_l, wl)), dc.mul(l_sl, wsl))


def ray_losses(sdf: Tensor, loc: Tensor, sdf_gt: np.ndarray, loc_gt: np.ndarray,
               in_range: np.ndarray, weights) -> LossTerms:
    """Batch means: L_s over all rays, L_l over in-range rays, L_sl over all rays."""
    b = sdf.shape[0]
    l_s = dc.mean(loss_sdf(sdf, sdf_gt))
    n_in = int(np.count_nonzero(in_range))
    if n_in:
        w = Tensor((in_range / n_in).astype(loc.dtype))
        l_l = dc.tsum(dc.mul(loss_loc(loc, loc_gt), w))
    else:
        l_l = Tensor(np.zeros((), dtype=loc.dtype))
    ind, sur = loss_consistency(sdf, loc)
    l_sl = dc.mean(sur)
    return LossTerms(l_s, l_l, l_sl, float(ind.mean()) if b else 0.0,
                     total_loss(l_s, l_l, l_sl, weights))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def learning_rate(cfg: TrainConfig, epoch: int, base: float | None = None) -> float:
    """Step decay: base * decay^(epoch // decay_every), epochs counted from 0."""
    base = cfg.lr if base is None else base
    return base * cfg.decay ** (epoch // cfg.decay_every)


class Adam:
    def __init__(self, params: ParamStore, names=None, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.names = list(params) if names is None else list(names)
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        """Apply one update; a non-finite gradient aborts the whole step."""
        for n in self.names:
            g = grads.get(n)
            if g is not None and not np.isfinite(g).all():
                logger.error("non-finite gradient in %s; step skipped", n)
                raise NonFiniteError(f"non-finite gradient in {n}")
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.b1 ** t
        c2 = 1 - self.b2 ** t
        for n in self.names:
            g = grads.get(n)
            if g is None:
                continue
            p = self.params[n]
            g = g.astype(p.dtype, copy=False)
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            upd = lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype)


def optimizer_step(adam: Adam, grads: dict[str, np.ndarray], cfg: TrainConfig, epoch: int) -> None:
    adam.step(grads, learning_rate(cfg, epoch))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"RMVS"
VERSION = 1


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays in the RMVS container."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        chunks.append(a.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class CheckpointError(sg.DataError):
    pass


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an RMVS checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if off + 4 * size > len(raw):
                raise ValueError("payload truncated")
            out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint at byte {off}: {exc}") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------


class Model:
    """Both stages sharing one parameter registry."""

    def __init__(self, cfg: Config, seed: int | None = None):
        self.cfg = cfg
        dtype = np.float32 if cfg.train.dtype == "float32" else np.float64
        self.params = ParamStore(dtype)
        rng = np.random.default_rng(cfg.train.seed if seed is None else seed)
        self.coarse = CoarseNet(cfg.coarse, self.params, rng)
        self.ray = RayNet(cfg.ray, self.params, rng)
        self.coarse_names = [n for n in self.params if not n.startswith("ray.")]
        self.ray_names = [n for n in self.params if n.startswith("ray.")]

    def run_coarse(self, sample: sg.MultiViewSample) -> CoarseOutput:
        return self.coarse.forward(sample.images, sample.cameras, sample.depth_range)

    def predict(self, sample: sg.MultiViewSample, noise_std: float = 0.0, rng=None, **kw):
        from .raynet import predict_depth_map
        with dc.no_grad():
            co = self.run_coarse(sample)
        refined, store = predict_depth_map(self.ray, co, sample.cameras, noise_std, rng, **kw)
        return co, refined, store


def model_entries(model: Model, adam: dict[str, Adam] | None = None, meta: dict | None = None):
    entries = {n: t.data for n, t in model.params.items()}
    for tag, opt in (adam or {}).items():
        entries[f"adam.{tag}.step"] = np.array(opt.step_count, dtype=np.float32)
        for n in opt.names:
            entries[f"adam.{tag}.m/{n}"] = opt.m[n]
            entries[f"adam.{tag}.v/{n}"] = opt.v[n]
    for k, v in (meta or {}).items():
        entries[f"meta.{k}"] = np.array(v, dtype=np.float32)
    return entries


def restore(model: Model, entries: dict[str, np.ndarray], adam: dict[str, Adam] | None = None) -> dict:
    model.params.load({n: v for n, v in entries.items() if not n.startswith(("adam.", "meta."))})
    for tag, opt in (adam or {}).items():
        key = f"adam.{tag}.step"
        if key in entries:
            opt.step_count = int(entries[key])
            for n in opt.names:
                opt.m[n] = entries[f"adam.{tag}.m/{n}"].astype(model.params.dtype)
                opt.v[n] = entries[f"adam.{tag}.v/{n}"].astype(model.params.dtype)
    return {k[5:]: float(v) for k, v in entries.items() if k.startswith("meta.")}


def load_model(checkpoint, cfg: Config) -> Model:
    model = Model(cfg)
    restore(model, load_checkpoint(checkpoint))
    return model


# ---------------------------------------------------------------------------
# ray labels
# ---------------------------------------------------------------------------


@dataclass
class RayLabels:
    sdf: np.ndarray       # (B, K)
    loc: np.ndarray       # (B,)
    in_range: np.ndarray  # (B,)


def batch_labels(sample: sg.MultiViewSample, batch: RayBatch, delta: float) -> RayLabels:
    u = batch.pixels[:, 0].astype(int)
    v = batch.pixels[:, 1].astype(int)
    s, loc, ok = sg.ray_labels(sample.scene, batch.points, batch.coarse, sample.depth[v, u], delta)
    return RayLabels(s, loc, ok)


def trainable_pixels(sample: sg.MultiViewSample, coarse: np.ndarray, delta: float) -> np.ndarray:
    """(P, 2) pixel coordinates of hit rays with a positive near hypothesis."""
    ok = sample.mask & (coarse - delta > 0)
    v, u = np.nonzero(ok)
    return np.column_stack([u, v]).astype(np.float64)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def load_training_samples(data_dir, references: str = "manifest") -> list[sg.MultiViewSample]:
    out = []
    for d in sg.scene_dirs(data_dir):
        if references == "all":
            ids = [v["id"] for v in sg.read_manifest(d)["views"]]
            out.extend(sg.load_sample(d, ref=i) for i in ids)
        else:
            out.append(sg.load_sample(d))
    return out


def _grads(loss: Tensor, model: Model, names) -> dict[str, np.ndarray]:
    ts = [model.params[n] for n in names]
    return dict(zip(names, dc.grad(loss, ts)))


class Trainer:
    """Phase 1 trains the coarse stage, phase 2 the ray stage (plus coarse when joint)."""

    def __init__(self, cfg: Config, samples: list[sg.MultiViewSample], out_dir):
        if not samples:
            raise ValueError("training set is empty")
        self.cfg = cfg
        self.samples = samples
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.model = Model(cfg)
        self.rng = np.random.default_rng(cfg.train.seed)
        t = cfg.train
        self.opt = {"coarse": Adam(self.model.params, self.model.coarse_names),
                    "ray": Adam(self.model.params, self.model.ray_names)}
        self.epoch = 0
        self.metrics_path = self.out / "metrics.jsonl"
        self.total_epochs = t.coarse_epochs + t.ray_epochs

    # -- persistence ---------------------------------------------------------
    def checkpoint(self, name: str | None = None) -> Path:
        path = self.out / (name or f"epoch_{self.epoch:04d}.rmvs")
        entries = model_entries(self.model, self.opt, {"epoch": self.epoch})
        save_checkpoint(path, entries)
        save_checkpoint(self.out / "last.rmvs", entries)
        return path

    def resume(self, path) -> None:
        meta = restore(self.model, load_checkpoint(path), self.opt)
        self.epoch = int(meta.get("epoch", 0))
        logger.info("resumed from %s at epoch %d", path, self.epoch)

    def _seed_epoch(self, epoch: int) -> None:
        # one stream per epoch, so a resumed run continues exactly
        self.rng = np.random.default_rng([self.cfg.train.seed, epoch])

    def _log(self, rec: dict) -> None:
        with open(self.metrics_path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    # -- phases ----------------------------------------------------------------
    def coarse_epoch(self, e: int) -> dict:
        t = self.cfg.train
        lr = learning_rate(t, e, t.coarse_lr or t.lr)
        losses = []
        for i in self.rng.permutation(len(self.samples)):
            s = self.samples[i]
            out = self.model.run_coarse(s)
            loss = masked_l1(out.depth, s.depth, s.mask)
            self._check(loss, "coarse L1")
            self.opt["coarse"].step(_grads(loss, self.model, self.model.coarse_names), lr)
            losses.append(loss.item())
        return {"epoch": self.epoch, "phase": "coarse", "lr": lr, "coarse_l1": float(np.mean(losses))}

    def ray_epoch(self, e: int, cache: dict) -> dict:
        t = self.cfg.train
        rc = self.cfg.ray
        lr = learning_rate(t, e)
        sums = {"L_s": 0.0, "L_l": 0.0, "L_sl": 0.0, "L_sl_surrogate": 0.0, "total": 0.0}
        nb = 0
        for i in self.rng.permutation(len(self.samples)):
            s = self.samples[i]
            if t.joint or i not in cache:
                with dc.no_grad():
                    co = self.model.run_coarse(s)
                cache[i] = co
            co = cache[i]
            coarse = co.depth.data.astype(np.float64)
            if t.coarse_noise_std > 0:
                coarse = coarse + self.rng.normal(0.0, t.coarse_noise_std, size=coarse.shape)
            pix = trainable_pixels(s, coarse, rc.delta)
            order = self.rng.permutation(len(pix))
            for lo in range(0, len(pix), t.ray_batch):
                sel = pix[order[lo:lo + t.ray_batch]]
                u, v = sel[:, 0].astype(int), sel[:, 1].astype(int)
                rb = make_ray_batch(s.cameras[0], sel, coarse[v, u], rc.delta, rc.samples)
                lab = batch_labels(s, rb, rc.delta)
                if t.joint:
                    co = self.model.run_coarse(s)
                vol = co.volume
                out = self.model.ray.forward(rb, co.features, co.fv, s.cameras, vol.camera, vol.planes)
                terms = ray_losses(out.sdf, out.loc, lab.sdf, lab.loc, lab.in_range, t.weights)
                self._check(terms.total, "ray loss")
                names = self.model.ray_names + (self.model.coarse_names if t.joint else [])
                grads = _grads(terms.total, self.model, names)
                self.opt["ray"].step({n: grads[n] for n in self.model.ray_names}, lr)
                if t.joint:
                    self.opt["coarse"].step({n: grads[n] for n in self.model.coarse_names}, lr)
                sums["L_s"] += terms.sdf.item()
                sums["L_l"] += terms.loc.item()
                sums["L_sl"] += terms.indicator
                sums["L_sl_surrogate"] += terms.consistency.item()
                sums["total"] += terms.total.item()
                nb += 1
        rec = {"epoch": self.epoch, "phase": "ray", "lr": lr}
        rec.update({k: v / max(nb, 1) for k, v in sums.items()})
        # the logged total uses the indicator, matching the weighted-sum definition
        rec["total"] = total_loss(rec["L_s"], rec["L_l"], rec["L_sl"], t.weights)
        return rec

    def _check(self, loss: Tensor, what: str) -> None:
        if not np.isfinite(loss.data).all():
            raise TrainingDiverged(f"{what} became non-finite at epoch {self.epoch}; "
                                   f"last good checkpoint kept in {self.out}")

    def run(self) -> list[dict]:
        t = self.cfg.train
        save_config(self.cfg, self.out / "config.json")
        if self.epoch == 0 and self.metrics_path.exists():
            self.metrics_path.unlink()
        records = []
        cache: dict = {}
        while self.epoch < self.total_epochs:
            self._seed_epoch(self.epoch)
            try:
                if self.epoch < t.coarse_epochs:
                    rec = self.coarse_epoch(self.epoch)
                else:
                    rec = self.ray_epoch(self.epoch - t.coarse_epochs, cache)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {self.epoch}: {exc}; last good checkpoint kept in {self.out}") from exc
            if not all(math.isfinite(v) for v in rec.values() if isinstance(v, float)):
                raise TrainingDiverged(f"non-finite metrics at epoch {self.epoch}")
            self._log(rec)
            records.append(rec)
            logger.info("epoch %d %s", self.epoch, rec)
            self.epoch += 1
            if self.epoch % t.checkpoint_every == 0 or self.epoch == self.total_epochs:
                self.checkpoint()
        if self.total_epochs == 0:
            self.checkpoint()
        return records


def train(cfg: Config, data_dir, out_dir, resume=None) -> Trainer:
    samples = load_training_samples(data_dir, cfg.train.references)
    trainer = Trainer(cfg, samples, out_dir)
    if resume is not None:
        trainer.resume(resume)
    trainer.run()
    return trainer


# ---------------------------------------------------------------------------
# evaluation helpers shared by the CLI and acceptance runs
# ---------------------------------------------------------------------------


def location_accuracy(model: Model, sample: sg.MultiViewSample, noise_std: float = 0.0,
                      seed: int = 0) -> dict:
    """Depth MAE of both stages and the fraction of in-range rays with |l - l-hat| < 1/K."""
    rc = model.cfg.ray
    co, refined, store = model.predict(sample, noise_std, np.random.default_rng(seed))
    u, v = store.pixels[:, 0].astype(int), store.pixels[:, 1].astype(int)
    hit = sample.mask[v, u]
    gt = sample.depth[v, u]
    loc_gt, in_range = geo.depth_to_location(gt, store.coarse, rc.delta)
    sel = hit & in_range
    within = np.abs(store.loc - loc_gt)[sel] < 1.0 / rc.samples
    m = sample.mask
    coarse_mae = float(np.abs(co.depth.data[m] - sample.depth[m]).mean())
    refined_mae = float(np.abs(refined.depth[m] - sample.depth[m]).mean())
    return {"coarse_mae": coarse_mae, "refined_mae": refined_mae,
            "loc_within": float(within.mean()) if within.size else 0.0,
            "in_range": float(sel.sum() / max(hit.sum(), 1))}
