"""Command-line entry point: ``raymvs <command> ...``.

Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure.  Failures print a
single JSON line on stderr and remove any output the command had created.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import fusion_eval as fe
from . import geometry as geo
from . import scenegen as sg
from . import training as tr
from .config import Config, ConfigError, load_config, save_config
from .diffcore import NonFiniteError, no_grad
from .raynet import make_ray_batch, write_attention, write_ray_profile

logger = logging.getLogger("raymvs")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class Outputs:
    """Paths a command creates; the ones that did not exist before are removed on failure."""

    def __init__(self):
        self._new: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self._new.append(path)
        return path

    def cleanup(self) -> None:
        for p in reversed(self._new):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()
            tmp = Path(str(p) + ".tmp")
            if tmp.exists():
                tmp.unlink()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def parse_pixel(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--pixel expects X,Y integers, got {text!r}") from None
    return x, y


def parse_floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None
    if not vals:
        raise UsageError("expected at least one number")
    return vals


def model_config(args) -> Config:
    """Explicit --config, else the config.json written next to the checkpoint, else defaults."""
    if getattr(args, "config", None):
        return load_config(args.config)
    beside = Path(args.ckpt).parent / "config.json"
    return load_config(beside if beside.exists() else None)


def load_for_inference(args):
    cfg = model_config(args)
    model = tr.load_model(args.ckpt, cfg)
    sample = sg.load_sample(args.scene, getattr(args, "ref", None))
    return cfg, model, sample


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, outs: Outputs) -> None:
    cfg = load_config(args.config)
    out = outs.add(args.out)
    for sdir in sg.make_dataset(cfg.data, out):
        sample = sg.load_sample(sdir)
        cams = [geo.read_camera(sdir / f"view_{j}.cam") for j in sorted(sample.view_ids)]
        fe.write_ply(fe.gt_point_cloud(sample.scene, cams, args.gt_density), sdir / "gt.ply")
    print(out)


def cmd_train(args, outs: Outputs) -> None:
    cfg = load_config(args.config)
    out = outs.add(args.out)
    data = args.data or cfg.train.data_dir
    if data is None:
        data = out / "data"
        if not data.exists():
            sg.make_dataset(cfg.data, data)
    cfg.train.data_dir = str(data)
    trainer = tr.train(cfg, data, out, resume=args.resume)
    print(trainer.out / "last.rmvs")


def cmd_infer(args, outs: Outputs) -> None:
    cfg, model, sample = load_for_inference(args)
    out = outs.add(args.out)
    out.mkdir(parents=True, exist_ok=True)
    j = sample.view_ids[0]
    co, refined, _ = model.predict(sample, args.noise_std, np.random.default_rng(cfg.train.seed))
    paths = {"depth": out / f"view_{j}.depth", "coarse": out / f"view_{j}.coarse",
             "conf": out / f"view_{j}.conf"}
    for p in paths.values():
        outs.add(p)
    sg.write_depth(paths["depth"], np.where(refined.mask, refined.depth, 0.0))
    sg.write_depth(paths["coarse"], co.depth.data)
    sg.write_depth(paths["conf"], co.confidence)
    print(paths["depth"])


def cmd_fuse(args, outs: Outputs) -> None:
    cloud = fe.fuse_scene(args.scene, args.depths, args.conf_threshold, args.reproj_tol,
                          args.depth_tol, args.min_views, args.merge_radius)
    fe.write_ply(cloud, outs.add(args.out))
    print(f"{len(cloud)} points -> {args.out}")


def cmd_eval(args, outs: Outputs) -> None:
    report = fe.eval_acc_comp(fe.read_ply(args.pred), fe.read_ply(args.gt), args.clamp)
    report.write(outs.add(args.report))
    print(json.dumps(report.to_dict()))


def cmd_eval_depth(args, outs: Outputs) -> None:
    th = parse_floats(args.thresholds)
    pred, gt = sg.read_depth(args.pred), sg.read_depth(args.gt)
    fractions = fe.depth_error_curve(pred, gt, th)
    report = fe.MetricsReport(curve=list(zip(th, fractions.tolist())))
    report.write(outs.add(args.report))
    print(json.dumps(report.to_dict()))


def _single_ray(model, sample, pixel, keep_attention=False):
    w, h = sample.cameras[0].width, sample.cameras[0].height
    if not (0 <= pixel[0] < w and 0 <= pixel[1] < h):
        raise UsageError(f"--pixel {pixel[0]},{pixel[1]} outside the {w}x{h} image")
    rc = model.cfg.ray
    with no_grad():
        co = model.run_coarse(sample)
        coarse = float(co.depth.data[pixel[1], pixel[0]])
        if coarse - rc.delta <= 0:
            raise sg.DataError(f"pixel {pixel}: coarse depth {coarse:.3f} leaves no positive hypothesis")
        rb = make_ray_batch(sample.cameras[0], [pixel], [coarse], rc.delta, rc.samples)
        vol = co.volume
        out = model.ray.forward(rb, co.features, co.fv, sample.cameras, vol.camera, vol.planes,
                                keep_attention=keep_attention)
    return rb, out


def cmd_trace_ray(args, outs: Outputs) -> None:
    _, model, sample = load_for_inference(args)
    pixel = parse_pixel(args.pixel)
    rb, out = _single_ray(model, sample, pixel)
    sdf_gt, loc_gt = None, None
    if sample.mask[pixel[1], pixel[0]]:
        s, l, _ = sg.ray_labels(sample.scene, rb.points, rb.coarse, sample.depth[pixel[1], pixel[0]],
                                model.cfg.ray.delta)
        sdf_gt, loc_gt = s[0], float(l[0])
    write_ray_profile(outs.add(args.out), rb.depths[0], rb.dbar, out.sdf.data[0], sdf_gt,
                      float(out.loc.data[0]), loc_gt)
    print(args.out)


def cmd_viz_epipolar(args, outs: Outputs) -> None:
    _, model, sample = load_for_inference(args)
    if not model.cfg.ray.use_transformer:
        raise sg.DataError("checkpoint was trained without the epipolar transformer")
    pixel = parse_pixel(args.pixel)
    if args.src not in sample.view_ids[1:]:
        raise UsageError(f"--src {args.src} is not a source view (choose from {list(sample.view_ids[1:])})")
    pos = sample.view_ids.index(args.src)
    rb, out = _single_ray(model, sample, pixel, keep_attention=True)
    maps = out.attention                            # per block: (K, N, N)
    weights = np.stack([a[:, 0, pos] for a in maps], axis=1)   # reference query -> source key
    cam = sample.cameras[pos]
    uv, _ = geo.project_points(cam, rb.points[0])

    img = sample.images[pos].mean(axis=-1) * 0.35
    last = weights[:, -1] / max(weights[:, -1].max(), 1e-12)
    for (u, v), w in zip(np.round(uv).astype(int), last):
        if 0 <= u < cam.width and 0 <= v < cam.height:
            img[max(v - 1, 0):v + 2, max(u - 1, 0):u + 2] = np.maximum(
                img[max(v - 1, 0):v + 2, max(u - 1, 0):u + 2], 0.35 + 0.65 * w)
    png = outs.add(args.out)
    from PIL import Image
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), mode="L").save(png, format="PNG")

    lines = [f"# reference view {sample.view_ids[0]} pixel {pixel[0]},{pixel[1]} source view {args.src}",
             "# k depth u v " + " ".join(f"w_block{b}" for b in range(len(maps)))]
    for k in range(len(uv)):
        ws = " ".join(f"{x:.6f}" for x in weights[k])
        lines.append(f"{k + 1} {rb.depths[0, k]:.6f} {uv[k, 0]:.4f} {uv[k, 1]:.4f} {ws}")
    txt = outs.add(Path(str(png) + ".txt"))
    txt.write_text("\n".join(lines) + "\n")
    write_attention(outs.add(Path(str(png) + ".grid.txt")), maps, rb.depths[0])
    print(png)


def cmd_noise_test(args, outs: Outputs) -> None:
    cfg, model, sample = load_for_inference(args)
    rows = []
    for std in parse_floats(args.stds):
        if std < 0:
            raise UsageError(f"noise std must be >= 0, got {std}")
        acc = tr.location_accuracy(model, sample, std, seed=args.seed)
        rows.append({"std": std, **acc})
    write_json(outs.add(args.report), {"reference": sample.view_ids[0], "rows": rows})
    for r in rows:
        print(json.dumps(r, sort_keys=True))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="raymvs", description="Ray-based multi-view stereo on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def ckpt_args(q, ref=True):
        q.add_argument("--ckpt", required=True, help="model checkpoint (.rmvs)")
        q.add_argument("--scene", required=True, help="scene directory")
        if ref:
            q.add_argument("--ref", type=int, default=None, help="reference view id (default: manifest)")
        q.add_argument("--config", default=None, help="config (default: config.json beside the checkpoint)")

    q = sub.add_parser("gen-data", help="render synthetic multi-view scenes")
    q.add_argument("--config", default=None, help="JSON config (empty or omitted: defaults)")
    q.add_argument("--out", required=True, help="output dataset directory")
    q.add_argument("--gt-density", type=float, default=2.0, help="resolution factor of the GT point cloud")
    q.set_defaults(func=cmd_gen_data)

    q = sub.add_parser("train", help="train both stages")
    q.add_argument("--config", default=None, help="JSON config")
    q.add_argument("--out", required=True, help="run directory (checkpoints, metrics.jsonl)")
    q.add_argument("--data", default=None, help="dataset directory (overrides train.data_dir)")
    q.add_argument("--resume", default=None, help="checkpoint to resume from")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("infer", help="refined and coarse depth plus confidence for one reference view")
    ckpt_args(q)
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--noise-std", type=float, default=0.0, help="Gaussian noise added to the coarse depth")
    q.set_defaults(func=cmd_infer)

    q = sub.add_parser("fuse", help="filter and fuse inferred depth maps into a PLY cloud")
    q.add_argument("--scene", required=True, help="scene directory")
    q.add_argument("--depths", required=True, help="directory with view_J.depth / view_J.conf")
    q.add_argument("--out", required=True, help="output .ply")
    q.add_argument("--conf-threshold", type=float, default=0.3, help="photometric confidence threshold")
    q.add_argument("--reproj-tol", type=float, default=1.0, help="geometric check: reprojection tolerance (px)")
    q.add_argument("--depth-tol", type=float, default=0.01, help="geometric check: relative depth tolerance")
    q.add_argument("--min-views", type=int, default=2, help="geometric check: agreeing views required")
    q.add_argument("--merge-radius", type=float, default=0.5, help="merge radius (scene units)")
    q.set_defaults(func=cmd_fuse)

    q = sub.add_parser("eval", help="accuracy / completeness / overall between two clouds")
    q.add_argument("--pred", required=True, help="predicted .ply")
    q.add_argument("--gt", required=True, help="ground-truth .ply")
    q.add_argument("--report", required=True, help="output JSON report")
    q.add_argument("--clamp", type=float, default=fe.DEFAULT_CLAMP, help="outlier distance cap")
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("eval-depth", help="depth-error threshold curve")
    q.add_argument("--pred", required=True, help="predicted depth file")
    q.add_argument("--gt", required=True, help="ground-truth depth file")
    q.add_argument("--report", required=True, help="output JSON report")
    q.add_argument("--thresholds", default=",".join(str(t) for t in fe.DEFAULT_THRESHOLDS),
                   help="comma-separated error thresholds")
    q.set_defaults(func=cmd_eval_depth)

    q = sub.add_parser("trace-ray", help="dump the SDF profile of one ray")
    ckpt_args(q)
    q.add_argument("--pixel", required=True, help="reference pixel X,Y")
    q.add_argument("--out", required=True, help="output text file")
    q.set_defaults(func=cmd_trace_ray)

    q = sub.add_parser("viz-epipolar", help="attention along the epipolar line in one source view")
    ckpt_args(q)
    q.add_argument("--pixel", required=True, help="reference pixel X,Y")
    q.add_argument("--src", type=int, required=True, help="source view id")
    q.add_argument("--out", required=True, help="output PNG (text tables written beside it)")
    q.set_defaults(func=cmd_viz_epipolar)

    q = sub.add_parser("noise-test", help="location accuracy under coarse-depth noise")
    ckpt_args(q)
    q.add_argument("--stds", required=True, help="comma-separated noise standard deviations")
    q.add_argument("--report", required=True, help="output JSON report")
    q.add_argument("--seed", type=int, default=0, help="noise seed")
    q.set_defaults(func=cmd_noise_test)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (tr.TrainingDiverged, NonFiniteError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (sg.DataError, ConfigError, geo.GeometryError, OSError, KeyError, ValueError)):
        return EXIT_DATA
    return 1


def _thread_limit():
    n = os.environ.get("RAYMVS_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(int(n), 1))


def main(argv=None) -> int:
    outs = Outputs()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            args.func(args, outs)
        return EXIT_OK
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    except Exception as exc:
        code = _exit_code(exc)
        outs.cleanup()
        msg = str(exc).replace("\n", " ")
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "exit": code, "message": msg}) + "\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
