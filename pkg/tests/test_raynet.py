import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raymvs import coarsenet as cn
from raymvs import diffcore as dc
from raymvs import geometry as geo
from raymvs import raynet as rn
from raymvs.diffcore import Tensor
from raymvs.params import ParamStore
from conftest import gradcheck


def make_store(cfg=None, seed=0, dtype=np.float64):
    cfg = cfg or rn.RayConfig()
    store = ParamStore(dtype)
    rn.init_params(store, cfg, np.random.default_rng(seed))
    return store, cfg


def rig(n=4, size=16):
    cams = []
    for k in range(n):
        az = np.radians([0.0, -15.0, 15.0, -7.0, 7.0][k])
        eye = 100.0 * np.array([np.sin(az), 0.05 * k, -np.cos(az)])
        cams.append(geo.look_at(eye, [0, 0, 0], [0, -1.0, 0], 20.0, size, size))
    return cams


# ---------------------------------------------------------------------------
# tokens
# ---------------------------------------------------------------------------


def test_tokens_match_project_fetch_oracle(rng):
    cams = rig(4)
    feats = rng.normal(size=(4, 8, 16, 16))
    pts = rng.uniform(-20, 20, size=(30, 3))
    tokens, flags = rn.fetch_point_tokens(pts, Tensor(feats), cams)
    for m, p in enumerate(pts):
        for v, cam in enumerate(cams):
            uv, z = geo.project_points(cam, p[None])
            val, ok = geo.bilinear_fetch(feats[v], uv[0])
            ok = bool(ok) and z[0] > 0
            assert flags[m, v] == ok
            np.testing.assert_allclose(tokens.data[m, v], val if ok else 0.0, atol=1e-10)


def test_point_behind_source_camera_gives_zero_token(rng):
    cams = rig(3)
    behind = cams[1].center - 5.0 * cams[1].axis
    tokens, flags = rn.fetch_point_tokens(behind[None], Tensor(rng.normal(size=(3, 8, 16, 16))), cams)
    assert not flags[0, 1] and np.all(tokens.data[0, 1] == 0)


def test_ray_points_project_on_epipolar_line():
    cams = rig(3)
    ray = geo.pixel_ray(cams[0], (5.0, 9.0))
    samp = geo.sample_hypotheses(ray, 100.0, 20.0, 16)
    for src in cams[1:]:
        line = geo.epipolar_line(cams[0], src, np.array([5.0, 9.0]))
        uv, _ = geo.project_points(src, samp.points)
        assert np.abs(uv @ line[:2] + line[2]).max() < 1e-6


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------


def block_oracle(x, p, i):
    """Straight-line matrix arithmetic for one block, token set by token set."""
    def ln(a, g, b):
        mu = a.mean(-1, keepdims=True)
        var = ((a - mu) ** 2).mean(-1, keepdims=True)
        return (a - mu) / np.sqrt(var + 1e-5) * g + b

    g = lambda n: p[f"ray.tf{i}.{n}"].data
    out = np.empty_like(x)
    for m in range(x.shape[0]):
        X = x[m]
        Q, K, V = X @ g("Wq"), X @ g("Wk"), X @ g("Wv")
        L = Q @ K.T
        E = np.exp(L - L.max(axis=1, keepdims=True))
        S = (E / E.sum(axis=1, keepdims=True)) @ V
        Z = ln(X + S, g("ln1.g"), g("ln1.b"))
        F = np.maximum(Z @ g("ff1.w") + g("ff1.b"), 0) @ g("ff2.w") + g("ff2.b")
        out[m] = ln(Z + F, g("ln2.g"), g("ln2.b"))
    return out


def test_block_matches_oracle(rng):
    store, _ = make_store()
    for n, t in store.items():
        if ".ln" in n:
            t.data = rng.normal(size=t.shape)
    x = rng.normal(size=(7, 5, 8))
    y, attn = rn.transformer_block(Tensor(x), store, 0)
    np.testing.assert_allclose(y.data, block_oracle(x, store, 0), atol=1e-8)
    np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-6)


def test_zero_query_key_uniform_attention(rng):
    store, _ = make_store()
    store["ray.tf0.Wq"].data[:] = 0
    store["ray.tf0.Wk"].data[:] = 0
    x = rng.normal(size=(3, 5, 8))
    _, attn = rn.transformer_block(Tensor(x), store, 0)
    np.testing.assert_allclose(attn.data, 0.2)
    # S is then the mean value vector for every token
    v = x @ store["ray.tf0.Wv"].data
    s = attn.data @ v
    np.testing.assert_allclose(s, np.broadcast_to(v.mean(1, keepdims=True), s.shape), atol=1e-12)


def test_transformer_needs_two_tokens(rng):
    store, _ = make_store()
    with pytest.raises(ValueError):
        rn.epipolar_transformer(Tensor(rng.normal(size=(2, 1, 8))), store)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_source_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    store, _ = make_store(seed=seed % 1000)
    x = rng.normal(size=(4, 5, 8))
    perm = np.concatenate([[0], 1 + rng.permutation(4)])
    fa, _ = rn.epipolar_transformer(Tensor(x), store)
    fb, _ = rn.epipolar_transformer(Tensor(x[:, perm]), store)
    np.testing.assert_allclose(fb.data, fa.data[:, perm], atol=1e-10)
    fv = Tensor(rng.normal(size=(4, 8)))
    pa = rn.aggregate_point_feature(fa, fv).data
    pb = rn.aggregate_point_feature(fb, fv).data
    np.testing.assert_allclose(pa, pb, atol=1e-10)


def test_aggregate_point_feature(rng):
    f = rng.normal(size=8)
    same = Tensor(np.broadcast_to(f, (2, 5, 8)).copy())
    fv = Tensor(rng.normal(size=(2, 8)))
    out = rn.aggregate_point_feature(same, fv).data
    assert out.shape == (2, 3 * 8 + 8)
    np.testing.assert_allclose(out[:, :8], np.broadcast_to(f, (2, 8)))
    np.testing.assert_allclose(out[:, 8:16], 0.0, atol=1e-15)
    x = rng.normal(size=(6, 5, 8))
    out = rn.aggregate_point_feature(Tensor(x), fv if False else Tensor(rng.normal(size=(6, 8)))).data
    for m in range(6):
        mu = sum(x[m, i] for i in range(5)) / 5
        var = sum((x[m, i] - mu) ** 2 for i in range(5)) / 5
        np.testing.assert_allclose(out[m, :8], mu, atol=1e-12)
        np.testing.assert_allclose(out[m, 8:16], var, atol=1e-12)
        np.testing.assert_array_equal(out[m, 16:24], x[m, 0])


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


def lstm_oracle(f, h, c, p):
    """Scalar loops over the six recurrence equations."""
    def sig(a):
        return 1.0 / (1.0 + np.exp(-a))

    x = list(f) + list(h)
    H = len(h)
    W = {g: p[f"ray.lstm.{g}"].data for g in ("W", "Wf", "Wu", "Wo")}
    b = {g: p[f"ray.lstm.{g}"].data for g in ("b", "bf", "bu", "bo")}

    def aff(w, bias, j):
        return sum(x[i] * w[i, j] for i in range(len(x))) + bias[j]

    h_new, c_new = np.zeros(H), np.zeros(H)
    for j in range(H):
        z = np.tanh(aff(W["W"], b["b"], j))
        zf = sig(aff(W["Wf"], b["bf"], j))
        zu = sig(aff(W["Wu"], b["bu"], j))
        zo = sig(aff(W["Wo"], b["bo"], j))
        c_new[j] = zf * c[j] + zu * z
        h_new[j] = zo * np.tanh(c_new[j])
    return h_new, c_new


def test_lstm_step_matches_scalar_oracle(rng):
    store, cfg = make_store()
    for g in ("b", "bf", "bu", "bo"):
        store[f"ray.lstm.{g}"].data = rng.normal(size=50)
    f = rng.normal(size=(3, cfg.point_dim))
    h = rng.normal(size=(3, 50)) * 0.5
    c = rng.normal(size=(3, 50))
    hn, cn_ = rn.lstm_step(f, h, c, store)
    for i in range(3):
        ho, co = lstm_oracle(f[i], h[i], c[i], store)
        np.testing.assert_allclose(hn.data[i], ho, atol=1e-10)
        np.testing.assert_allclose(cn_.data[i], co, atol=1e-10)


def test_lstm_zero_params_and_inputs(rng):
    store, cfg = make_store()
    store.zero_()
    h, c = rn.lstm_step(np.zeros((1, cfg.point_dim)), np.zeros((1, 50)), np.zeros((1, 50)), store)
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_lstm_forget_saturation(rng):
    store, cfg = make_store()
    store["ray.lstm.bf"].data[:] = 1e3
    store["ray.lstm.bu"].data[:] = -1e3
    c_prev = rng.normal(size=(2, 50))
    _, c = rn.lstm_step(rng.normal(size=(2, cfg.point_dim)), rng.normal(size=(2, 50)), c_prev, store)
    np.testing.assert_allclose(c.data, c_prev, atol=1e-12)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def test_run_ray_bounds_and_state(rng):
    store, cfg = make_store()
    f = rng.normal(size=(5, 16, cfg.point_dim)) * 3
    out = rn.run_ray(Tensor(f), geo.normalized_indices(16), store)
    assert out.sdf.shape == (5, 16) and out.loc.shape == (5,)
    assert np.all(np.abs(out.sdf.data) < 1) and np.all((out.loc.data > 0) & (out.loc.data < 1))
    # c_K equals stepping the recurrence by hand from zero state
    h = c = np.zeros((5, 50))
    for k in range(16):
        h, c = rn.lstm_step(f[:, k], h, c, store)
        h, c = h.data, c.data
    np.testing.assert_allclose(out.cell.data, c, atol=1e-12)


def test_zero_mlps(rng):
    store, cfg = make_store()
    for n, t in store.items():
        if ".mlp_" in n:
            t.data[:] = 0
    out = rn.run_ray(Tensor(rng.normal(size=(2, 16, cfg.point_dim))), geo.normalized_indices(16), store)
    assert np.all(out.sdf.data == 0) and np.all(out.loc.data == 0.5)


def test_batching_invariance_float32(rng):
    store, cfg = make_store(dtype=np.float32)
    f = rng.normal(size=(6, 16, cfg.point_dim)).astype(np.float32)
    d = geo.normalized_indices(16)
    full = rn.run_ray(Tensor(f), d, store)
    for i in range(6):
        one = rn.run_ray(Tensor(f[i:i + 1]), d, store)
        np.testing.assert_allclose(one.sdf.data[0], full.sdf.data[i], atol=1e-6)
        np.testing.assert_allclose(one.loc.data[0], full.loc.data[i], atol=1e-6)


# ---------------------------------------------------------------------------
# gradient checks of every learned sub-operation
# ---------------------------------------------------------------------------


def _swap(store, names, ts):
    for n, t in zip(names, ts):
        store._params[n] = t


def test_block_gradient(rng):
    store, _ = make_store()
    names = [n for n in store if n.startswith("ray.tf0.")]

    def fn(x, *ws):
        _swap(store, names, ws)
        return rn.transformer_block(x, store, 0)[0]

    gradcheck(fn, [rng.normal(size=(3, 4, 8))] + [store[n].data.copy() for n in names], joint=True)


def test_lstm_step_gradient(rng):
    cfg = rn.RayConfig(hidden=6)
    store, _ = make_store(cfg)
    names = [n for n in store if n.startswith("ray.lstm.")]

    def fn(f, h, c, *ws):
        _swap(store, names, ws)
        h2, c2 = rn.lstm_step(f, h, c, store)
        return dc.concat([h2, c2], axis=1)

    arrays = [rng.normal(size=(2, cfg.point_dim)), rng.normal(size=(2, 6)), rng.normal(size=(2, 6))]
    gradcheck(fn, arrays + [store[n].data.copy() for n in names])


@pytest.mark.parametrize("head", ["mlp_s", "mlp_l"])
def test_mlp_head_gradient(rng, head):
    cfg = rn.RayConfig(hidden=6, mlp_widths=(7, 6, 5))
    store, _ = make_store(cfg)
    names = [n for n in store if n.startswith(f"ray.{head}.")]
    cin = store[f"ray.{head}.0.w"].shape[0]

    def fn(x, *ws):
        _swap(store, names, ws)
        return rn._mlp(store, f"ray.{head}", x)

    gradcheck(fn, [rng.normal(size=(4, cin))] + [store[n].data.copy() for n in names])


def test_run_ray_gradient(rng):
    cfg = rn.RayConfig(hidden=5, mlp_widths=(6, 5, 4), samples=4)
    store, _ = make_store(cfg)
    names = [n for n in store if n.startswith(("ray.lstm", "ray.mlp"))]

    def fn(f, *ws):
        _swap(store, names, ws)
        out = rn.run_ray(f, geo.normalized_indices(4), store)
        return dc.concat([dc.reshape(out.sdf, (-1,)), out.loc])

    gradcheck(fn, [rng.normal(size=(2, 4, cfg.point_dim))] + [store[n].data.copy() for n in names])


def test_full_forward_gradient_to_features(rng):
    cams = rig(3, size=8)
    cfg = rn.RayConfig(samples=4, hidden=5, mlp_widths=(6, 5, 4), blocks=1)
    store, _ = make_store(cfg)
    net = rn.RayNet(cfg, store)
    planes = np.linspace(80, 120, 8)
    vcam = cams[0].scaled(0.5)
    batch = rn.make_ray_batch(cams[0], [[3.0, 4.0], [5.5, 2.0]], [100.0, 95.0], 10.0, 4)

    def fn(feats, fv):
        out = net.forward(batch, feats, fv, cams, vcam, planes)
        return dc.concat([dc.reshape(out.sdf, (-1,)), out.loc])

    gradcheck(fn, [rng.normal(size=(3, 8, 8, 8)), rng.normal(size=(8, 8, 4, 4))])


# ---------------------------------------------------------------------------
# depth map prediction and dumps
# ---------------------------------------------------------------------------


def _coarse_output(cams, rng, depth=100.0):
    store = ParamStore(np.float64)
    net = cn.CoarseNet(cn.CoarseConfig(), store, rng)
    out = net.forward(rng.uniform(size=(len(cams), 16, 16, 3)), cams, (60.0, 140.0))
    out.depth = Tensor(np.full((16, 16), depth))
    return out


def test_oracle_location_decodes_to_gt(rng):
    cams = rig(3)
    co = _coarse_output(cams, rng)
    gt = 100.0 + rng.uniform(-25, 25, size=(16, 16))
    loc, in_range = geo.depth_to_location(gt, 100.0, 20.0)
    net = rn.RayNet(rn.RayConfig(), ParamStore(np.float64), rng)
    dm, store = rn.predict_depth_map(net, co, cams, loc_override=loc)
    np.testing.assert_allclose(dm.depth[in_range], gt[in_range], atol=1e-9)
    assert store.sdf.shape == (256, 16)


def test_transformer_off_path(rng):
    cams = rig(3)
    co = _coarse_output(cams, rng)
    cfg = rn.RayConfig(use_transformer=False)
    net = rn.RayNet(cfg, ParamStore(np.float64), rng)
    batch = rn.make_ray_batch(cams[0], [[4.0, 4.0]], [100.0], 20.0, 16)
    vol = co.volume
    out = net.forward(batch, co.features, co.fv, cams, vol.camera, vol.planes, keep_attention=True)
    assert out.attention == []
    # raw tokens feed the aggregation directly
    tokens, _ = rn.fetch_point_tokens(batch.points.reshape(-1, 3), co.features, cams)
    np.testing.assert_allclose(out.tokens, tokens.data)


def test_invalid_pixels_copy_coarse(rng):
    cams = rig(3)
    co = _coarse_output(cams, rng)
    valid = np.zeros((16, 16), dtype=bool)
    valid[4:8, 4:8] = True
    net = rn.RayNet(rn.RayConfig(), ParamStore(np.float64), rng)
    dm, _ = rn.predict_depth_map(net, co, cams, valid=valid)
    assert np.all(dm.depth[~valid] == 100.0) and np.all(dm.confidence[~valid] == 0)


def test_profile_and_attention_dumps(tmp_path, rng):
    d = np.linspace(80, 120, 4)
    rn.write_ray_profile(tmp_path / "p.txt", d, geo.normalized_indices(4), [0.5, 0.1, -0.1, -0.5],
                         [0.6, 0.2, -0.2, -0.6], 0.4, 0.5)
    text = (tmp_path / "p.txt").read_text().splitlines()
    assert text[1].split()[0] == "1" and text[-1] == "# l_hat 0.500000"
    rn.write_attention(tmp_path / "a.txt", [rng.dirichlet(np.ones(3), size=(4, 3))], d)
    lines = (tmp_path / "a.txt").read_text().splitlines()
    assert len(lines) == 4 * 4
