"""Acceptance criteria, one test each; verdicts are collected and printed at the end of the run.

The training criteria (6, 8) run the single-scene overfit experiment from
``configs/overfit.json`` and take tens of minutes on one core.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from raymvs import cli
from raymvs import coarsenet as cn
from raymvs import diffcore as dc
from raymvs import fusion_eval as fe
from raymvs import geometry as geo
from raymvs import raynet as rn
from raymvs import scenegen as sg
from raymvs import training as tr
from raymvs.config import load_config
from raymvs.params import ParamStore

from conftest import gradcheck, record_verdict

ROOT = Path(__file__).resolve().parents[1]
OVERFIT_CONFIG = ROOT / "configs" / "overfit.json"
NOISE_STDS = (0.0, 0.2, 0.4)


def verdict(num: int, ok: bool, detail: str) -> None:
    record_verdict(num, ok, detail)
    assert ok, f"criterion {num}: {detail}"


# ---------------------------------------------------------------------------
# 1: disclosure


def test_c01_disclosure():
    text = (ROOT / "README.md").read_text()
    ok = "0.330" in text and "59.48" in text and "not reproducible" in text
    verdict(1, ok, "benchmark numbers (DTU overall 0.330 mm, T&T mean F 59.48) disclosed as not reproducible "
                   "at desk scale; property-based substitutes below")


# ---------------------------------------------------------------------------
# 2: gradient suite


def _swap(store, names, ts):
    for n, t in zip(names, ts):
        store._params[n] = t


def _jitter_biases(store, rng):
    # zero-initialised biases put ReLU inputs exactly on the kink where a layer's inputs vanish
    for name, t in store.items():
        if name.endswith(".b"):
            t.data = rng.normal(0.0, 0.1, size=t.shape)


def _grad_cases(rng):
    """(name, fn, arrays, joint) for every learned primitive and composite."""
    cases = []

    ccfg = cn.CoarseConfig(channels=2, widths=(2, 3, 3), volume_widths=(2, 2, 2), volume_channels=2)
    cstore = ParamStore(np.float64)
    cn.init_params(cstore, ccfg, rng)
    _jitter_biases(cstore, rng)
    n2d = [n for n in cstore if n.startswith("unet2d")]
    imgs = rng.uniform(size=(1, 8, 8, 3))

    def unet2d(*ws):
        _swap(cstore, n2d, ws)
        return cn.extract_features(imgs, cstore)

    cases.append(("2D U-Net", unet2d, [cstore[n].data.copy() for n in n2d], False))

    n3d = [n for n in cstore if n.startswith("unet3d")]

    def unet3d(vol, *ws):
        _swap(cstore, n3d, ws)
        fv, prob = cn.regularize_volume(vol, cstore)
        return dc.concat([dc.reshape(fv, (-1,)), dc.reshape(prob, (-1,))])

    # prob-head bias has an identically zero gradient (softmax shift invariance), hence joint
    cases.append(("3D U-Net", unet3d, [rng.uniform(size=(2, 8, 8, 8))] + [cstore[n].data.copy() for n in n3d], True))

    rcfg = rn.RayConfig(channels=4, volume_channels=2, hidden=5, mlp_widths=(6, 5, 4), samples=4)
    rstore = ParamStore(np.float64)
    rn.init_params(rstore, rcfg, rng)
    _jitter_biases(rstore, rng)
    ntf = [n for n in rstore if n.startswith("ray.tf0.")]

    def block(x, *ws):
        _swap(rstore, ntf, ws)
        return rn.transformer_block(x, rstore, 0)[0]

    # layer norm makes the output invariant to a shared shift of its input, hence joint
    cases.append(("transformer block", block, [rng.normal(size=(3, 4, 4))] + [rstore[n].data.copy() for n in ntf], True))

    nl = [n for n in rstore if n.startswith("ray.lstm.")]

    def lstm(f, h, c, *ws):
        _swap(rstore, nl, ws)
        h2, c2 = rn.lstm_step(f, h, c, rstore)
        return dc.concat([h2, c2], axis=1)

    cases.append(("LSTM step", lstm, [rng.normal(size=(2, rcfg.point_dim)), rng.normal(size=(2, 5)),
                                      rng.normal(size=(2, 5))] + [rstore[n].data.copy() for n in nl], False))
    for head in ("mlp_s", "mlp_l"):
        nh = [n for n in rstore if n.startswith(f"ray.{head}.")]
        cin = rstore[f"ray.{head}.0.w"].shape[0]

        def mlp(x, *ws, nh=nh, head=head):
            _swap(rstore, nh, ws)
            return rn._mlp(rstore, f"ray.{head}", x)

        cases.append((f"MLP head {head}", mlp, [rng.normal(size=(4, cin))] + [rstore[n].data.copy() for n in nh], False))

    pred = rng.uniform(-1, 1, size=(3, 16))
    label = pred + rng.choice([-1, 1], size=pred.shape) * rng.uniform(0.05, 0.5, size=pred.shape)
    cases.append(("L_s", lambda p: tr.loss_sdf(p, label), [pred], False))
    cases.append(("L_l", lambda l: tr.loss_loc(l, [0.5, 0.3]), [np.array([0.2, 0.7])], False))
    sdf = np.array([[0.9, 0.6, 0.3, 0.2, -0.1], [0.8, 0.5, 0.4, 0.3, 0.2]])
    cases.append(("L_sl surrogate", lambda s: tr.loss_consistency(s, [0.3, 0.6])[1], [sdf], False))
    return cases


def test_c02_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    failures = []
    for name, fn, arrays, joint in _grad_cases(np.random.default_rng(2)):
        try:
            worst[name] = gradcheck(fn, arrays, tol=1e-4, joint=joint)
        except AssertionError as exc:
            failures.append(f"{name}: {exc}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 300
    detail = f"{len(worst)}/{len(worst) + len(failures)} checks < 1e-4 (max {max(worst.values(), default=0):.1e}), " \
             f"{elapsed:.1f} s" + (f"; failed: {failures}" if failures else "")
    verdict(2, ok, detail)


# ---------------------------------------------------------------------------
# 3: geometry suite


def test_c03_geometry_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cfg = sg.SceneConfig(num_views=5)
    worst_epi = worst_rt = worst_h = 0.0
    for trial in range(50):
        cams = sg.camera_rig(cfg, np.random.default_rng(trial))
        ref = cams[0]
        for src in cams[1:]:
            pix = rng.uniform(0, 63, size=2)
            ray = geo.pixel_ray(ref, pix)
            samp = geo.sample_hypotheses(ray, rng.uniform(200, 400), 20.0, 16)
            uv, _ = geo.project_points(src, samp.points)
            line = geo.epipolar_line(ref, src, pix)
            worst_epi = max(worst_epi, np.abs(uv @ line[:2] + line[2]).max())
            back, _ = geo.project_points(ref, samp.points)
            worst_rt = max(worst_rt, np.abs(back - pix).max())
        worst_h = max(worst_h, np.abs(geo.plane_homography(ref, ref, rng.uniform(100, 500)) - np.eye(3)).max())
        pts = geo.backproject(ref, rng.uniform(0, 63, size=(100, 2)), rng.uniform(150, 500, size=100))
        uv, z = geo.project_points(ref, pts)
        worst_rt = max(worst_rt, np.abs(geo.backproject(ref, uv, z) - pts).max())
    elapsed = time.perf_counter() - t0
    ok = worst_epi < 1e-6 and worst_rt < 1e-6 and worst_h < 1e-9 and elapsed < 10
    verdict(3, ok, f"epipolar residual {worst_epi:.1e} px, round trip {worst_rt:.1e}, "
                   f"|H_ref,ref - I| {worst_h:.1e}, {elapsed:.2f} s")


# ---------------------------------------------------------------------------
# 4: label suite


def test_c04_label_suite():
    cfg = sg.SceneConfig(num_scenes=1)
    rng = np.random.default_rng(cfg.seed)
    scene = sg.random_scene(cfg, rng)
    cam = sg.camera_rig(cfg, rng)[0]
    _, depth, mask = sg.render_view(scene, cam, sg.Lighting())
    K, delta = 16, cfg.delta
    pick = np.random.default_rng(4)
    v, u = np.nonzero(mask)
    idx = pick.choice(len(u), size=1000, replace=False)
    pix = np.column_stack([u[idx], v[idx]]).astype(np.float64)
    gt = depth[v[idx], u[idx]]
    coarse = gt + pick.uniform(-0.95, 0.95, size=1000) * delta   # in range by construction
    batch = rn.make_ray_batch(cam, pix, coarse, delta, K)
    s, loc, in_range = sg.ray_labels(scene, batch.points, coarse, gt, delta)
    assert in_range.all()

    changes = (np.sign(s[:, :-1]) * np.sign(s[:, 1:]) < 0).sum(axis=1) + (s[:, 1:-1] == 0).sum(axis=1)
    one_change = changes == 1
    bounded = (np.abs(s) <= 1 + 1e-12).all() and np.isclose(np.abs(s).max(axis=1), 1.0).all()

    # linear interpolation of the first crossing versus the label
    first = np.argmax(np.sign(s[:, :-1]) != np.sign(s[:, 1:]), axis=1)
    r = np.arange(len(s))
    a, b = s[r, first], s[r, first + 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(a != b, a / (a - b), 0.0)
    l_interp = (first + frac) / (K - 1)
    close = np.abs(l_interp - loc) <= 1 / (2 * (K - 1))
    ok = bool(one_change.all() and bounded and close[one_change].all())
    verdict(4, ok, f"exactly one sign change on {one_change.sum()}/1000 rays "
                   f"({(changes == 0).sum()} with none, {(changes >= 2).sum()} with two or more: silhouette grazing); "
                   f"|s| <= 1 with max 1: {bounded}; interpolated crossing within 1/(2(K-1)) on "
                   f"{close[one_change].sum()}/{one_change.sum()} single-crossing rays")


# ---------------------------------------------------------------------------
# 5: loss arithmetic


def test_c05_loss_arithmetic():
    total = tr.total_loss(1.6, 0.05, 1.0, (0.1, 0.8, 0.1))
    table = {(1, 1): 1, (1, -1): 0, (-1, 1): 0, (-1, -1): 1, (0, 1): 0, (1, 0): 0, (0, 0): 0, (0, -1): 0}
    got = {k: int(tr.consistency_indicator(*k)) for k in table}
    ok = abs(total - 0.3) < 1e-12 and got == table
    verdict(5, ok, f"weighted total {total:.12g} (expected 0.3); indicator truth table "
                   f"{'matches' if got == table else f'differs: {got}'} on {len(table)} sign combinations")


# ---------------------------------------------------------------------------
# 6 and 8: overfit experiment


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    """Phase 1 once, then phase 2 at every noise level; returns metrics per std."""
    root = tmp_path_factory.mktemp("overfit")
    cfg = load_config(OVERFIT_CONFIG)
    sg.make_dataset(cfg.data, root / "data")
    samples = tr.load_training_samples(root / "data", cfg.train.references)
    eval_sample = sg.load_sample(root / "data" / "scene_000")
    t = cfg.train

    t0 = time.perf_counter()
    phase1 = load_config(OVERFIT_CONFIG)
    phase1.train.ray_epochs = 0
    tr.Trainer(phase1, samples, root / "phase1").run()
    ckpt = root / "phase1" / "last.rmvs"
    phase1_time = time.perf_counter() - t0

    results = {}
    for std in NOISE_STDS:
        c = load_config(OVERFIT_CONFIG)
        c.train.coarse_noise_std = std
        t1 = time.perf_counter()
        trainer = tr.Trainer(c, samples, root / f"phase2_std{std}")
        trainer.resume(ckpt)
        records = trainer.run()
        acc = tr.location_accuracy(trainer.model, eval_sample, noise_std=std, seed=t.seed)
        acc["seconds"] = phase1_time + time.perf_counter() - t1
        acc["final_total"] = records[-1]["total"] if records else float("nan")
        results[std] = acc
    (root / "results.json").write_text(json.dumps({str(k): v for k, v in results.items()}, indent=2))
    return cfg, results


@pytest.mark.slow
def test_c06_end_to_end_overfit(overfit):
    cfg, res = overfit
    r = res[0.0]
    epochs = cfg.train.coarse_epochs + cfg.train.ray_epochs
    a = r["refined_mae"] <= 0.5 * r["coarse_mae"]
    b = r["loc_within"] >= 0.9
    fast = r["seconds"] <= 3600
    ok = a and b and fast and epochs <= 200
    verdict(6, ok, f"{epochs} epochs; (a) refined MAE {r['refined_mae']:.3f} vs 0.5 x coarse MAE "
                   f"{0.5 * r['coarse_mae']:.3f}: {'ok' if a else 'missed'}; (b) {100 * r['loc_within']:.1f}% of "
                   f"in-range rays within 1/K: {'ok' if b else 'missed'}; {r['seconds'] / 60:.1f} min single-core "
                   f"(8-way timing not measured on this host)")


@pytest.mark.slow
def test_c08_noise_pressure(overfit):
    _, res = overfit
    base = res[0.0]["loc_within"]
    drops = {std: base - res[std]["loc_within"] for std in NOISE_STDS}
    ok = drops[0.4] <= 0.10
    rows = ", ".join(f"std {s}: {100 * res[s]['loc_within']:.1f}%" for s in NOISE_STDS)
    verdict(8, ok, f"criterion-6(b) fraction by noise std: {rows}; drop at 0.4 = {100 * drops[0.4]:.1f} pp (limit 10)")


# ---------------------------------------------------------------------------
# 7: ray-vs-volume consistency


def test_c07_oracle_location_decodes_to_gt(tmp_path):
    cfg = load_config(OVERFIT_CONFIG)
    cfg.data.num_scenes = 1
    sdir = sg.make_dataset(cfg.data, tmp_path / "data")[0]
    sample = sg.load_sample(sdir)
    model = tr.Model(cfg)
    with dc.no_grad():
        co = model.run_coarse(sample)
    coarse = co.depth.data.astype(np.float64)
    loc, in_range = geo.depth_to_location(sample.depth, coarse, cfg.ray.delta)
    _, refined, _ = model.predict(sample, loc_override=loc)
    sel = in_range & sample.mask & refined.mask
    err = np.abs(refined.depth[sel] - sample.depth[sel]).max()
    ok = sel.sum() > 0 and err < 1e-9
    verdict(7, ok, f"oracle l-hat decodes to GT on {sel.sum()} in-range pixels, max |error| {err:.1e}")


# ---------------------------------------------------------------------------
# 9: metric oracles


def test_c09_metric_oracles():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        p = rng.normal(size=(int(rng.integers(1, 60)), 3)) * 10
        g = rng.normal(size=(int(rng.integers(1, 60)), 3)) * 10
        d = np.linalg.norm(p[:, None] - g[None], axis=-1)
        acc, comp = np.minimum(d.min(1), 20).mean(), np.minimum(d.min(0), 20).mean()
        r = fe.eval_acc_comp(fe.PointCloud(p), fe.PointCloud(g))
        worst = max(worst, abs(r.accuracy - acc), abs(r.completeness - comp), abs(r.overall - (acc + comp) / 2))
    gt = rng.uniform(200, 400, size=(30, 30))
    pred = gt + rng.normal(0, 3, size=gt.shape)
    th = [0.5, 1, 2, 4, 8]
    counts = [sum(1 for e in np.abs(pred - gt).ravel() if e < t) / gt.size for t in th]
    curve_ok = list(fe.depth_error_curve(pred, gt, th)) == counts

    cfg = sg.SceneConfig(num_views=5, width=48, height=48, focal=60.0)
    cams = sg.camera_rig(cfg, np.random.default_rng(0))
    scene = sg.Union([sg.Sphere((-10.0, 5.0, 0.0), 45.0), sg.Plane((0.0, 0.0, -1.0), -80.0)])
    depths = [sg.render_view(scene, c, sg.Lighting())[1] for c in cams]
    cloud = fe.fuse(depths, [d > 0 for d in depths], cams)
    on_surface = (np.abs(scene.sdf(cloud.points)) < 1e-3).mean()
    ok = worst < 1e-9 and curve_ok and on_surface >= 0.99
    verdict(9, ok, f"acc/comp vs brute force on 100 instances: max diff {worst:.1e}; curve equals counting oracle: "
                   f"{curve_ok}; fused GT-depth cloud within 1e-3 of the surface: {100 * on_surface:.2f}%")


# ---------------------------------------------------------------------------
# 10: determinism


def test_c10_determinism(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "data": {"num_scenes": 1, "num_views": 3, "width": 32, "height": 32, "focal": 40.0, "seed": 7},
        "coarse": {"num_planes": 16},
        "train": {"coarse_epochs": 2, "ray_epochs": 2, "ray_batch": 256, "seed": 7},
    }))
    logs = []
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / name / "data")]) == 0
        assert cli.main(["train", "--config", str(cfg), "--data", str(tmp_path / name / "data"),
                         "--out", str(tmp_path / name / "run")]) == 0
        logs.append((tmp_path / name / "run" / "metrics.jsonl").read_bytes())
    ck = tmp_path / "a" / "run" / "last.rmvs"
    tr.save_checkpoint(tmp_path / "again.rmvs", tr.load_checkpoint(ck))
    same_ckpt = (tmp_path / "again.rmvs").read_bytes() == ck.read_bytes()
    ok = logs[0] == logs[1] and len(logs[0]) > 0 and same_ckpt
    verdict(10, ok, f"metrics logs identical across seed-fixed runs: {logs[0] == logs[1]}; "
                    f"checkpoint save/load/save byte-identical: {same_ckpt}")
