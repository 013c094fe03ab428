"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, config_from_dict, load_config
from .flame import PointModelAsset, load_point_model
from .knn import INDEX_KINDS, build_index, set_threads
from .losses import LossWeights, rec_loss
from .tensorio import atomic_write_bytes, encode_tensors, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avatarfield", description=__doc__)
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads (default: all)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-scene", help="write the analytic scene, asset, targets and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=int, default=642)
    s.add_argument("--low-res", type=int, default=32)
    s.add_argument("--samples", type=int, default=512, help="oracle ray-march samples per ray")

    f = sub.add_parser("fit", help="fit a model to a manifest's training targets")
    f.add_argument("--manifest", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--config", default=None, help="JSON config (defaults apply to missing keys)")
    f.add_argument("--steps", type=int, default=None)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--resume", default=None, help="checkpoint to continue from")
    f.add_argument("--no-renders", action="store_true", help="skip held-out PPM renders and figures")

    r = sub.add_parser("render", help="render one view from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--config", default=None, help="defaults to config.json next to the checkpoint")
    r.add_argument("--out", required=True, help="output prefix; writes <out>_low.ppm and <out>_high.ppm")
    r.add_argument("--azimuth", type=float, default=0.0)
    r.add_argument("--elevation", type=float, default=0.0)
    r.add_argument("--expr", type=_floats, default=None, help="comma-separated expression coefficients")
    r.add_argument("--slots", type=_ints, default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--dump-features", default=None, help="write the f64 feature image as a tensor file")

    e = sub.add_parser("eval", help="PSNR/SSIM/L1 and loss terms on a manifest split, as JSON")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--split", default="holdout")
    e.add_argument("--out", default=None, help="JSON path (default: stdout)")
    e.add_argument("--figure", default=None, help="PNG of render/target/difference per image")

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--module", action="append", default=None, help="module name or 'all' (repeatable)")
    g.add_argument("--seed", type=int, default=0)

    k = sub.add_parser("knn-bench", help="KNN build/query benchmark as CSV")
    k.add_argument("--points", type=_ints, default=[642, 5023])
    k.add_argument("--k", type=_ints, default=[4, 8])
    k.add_argument("--queries", type=int, default=100000)
    k.add_argument("--index", choices=sorted(INDEX_KINDS), default="grid")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", default=None, help="CSV path (default: stdout)")
    k.add_argument("--figure", default=None)
    return p


# ---------------------------------------------------------------- helpers

def _model_from_checkpoint(ckpt, config_path=None):
    from .pipeline import AvatarModel, restore
    tensors = load_checkpoint(ckpt)
    cfg_file = Path(config_path) if config_path else Path(ckpt).with_name("config.json")
    cfg = load_config(cfg_file) if cfg_file.exists() else load_config()
    try:
        asset = PointModelAsset(tensors["asset.template"], tensors["asset.shape_basis"],
                                tensors["asset.pose_basis"], tensors["asset.expr_basis"], cfg.scene_bound)
    except KeyError as exc:
        raise ValueError(f"{ckpt}: checkpoint lacks asset tensor {exc}") from None
    cfg = config_from_dict({**cfg.to_dict(), "point_subsample": None, "point_count": asset.point_count})
    model = AvatarModel(cfg, asset)
    restore(model, None, tensors)
    return model


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        atomic_write_bytes(path, text.encode("utf-8"))
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- commands

def cmd_synth_scene(args):
    from .scene import synthesize_dataset
    m = synthesize_dataset(args.out, seed=args.seed, point_count=args.points, low_res=args.low_res,
                           n_samples=args.samples)
    print(f"wrote {len(m['items'])} targets and manifest.json to {args.out}")


def cmd_fit(args):
    from .pipeline import AvatarModel, fit_loop, load_targets, render_image
    from .plotting import plot_comparison, plot_loss_curves
    from .ppm import write_ppm
    from .scene import load_manifest

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.steps is not None:
        base["steps"] = args.steps
    if args.seed is not None:
        base["seed"] = args.seed
    if args.threads is not None:
        base["threads"] = args.threads
    manifest = load_manifest(args.manifest)
    asset = load_point_model(Path(manifest["root"]) / manifest["asset"])
    base.setdefault("point_count", asset.point_count)
    cfg = config_from_dict(base)
    if cfg.threads:
        set_threads(cfg.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "config.json", (cfg.to_json() + "\n").encode("utf-8"))
    model = AvatarModel(cfg, asset)
    result = fit_loop(model, manifest, out, resume=args.resume, log=lambda s: print(s, flush=True))
    summary = {"steps": cfg.steps, "seconds": round(result["seconds"], 1)}
    if result["eval"] is not None:
        summary.update({f"holdout_{k}": v for k, v in result["eval"].items()})
    if not args.no_renders:
        plot_loss_curves(out / "metrics.csv", out / "loss_curves.png")
        renders = out / "renders"
        renders.mkdir(exist_ok=True)
        pairs, titles = [], []
        for tg in load_targets(manifest, "holdout"):
            _, high = render_image(model, tg.expr, tg.camera, seed=cfg.seed)
            write_ppm(high, renders / tg.name)
            pairs.append((high, tg.image))
            titles.append(tg.name)
        if pairs:
            plot_comparison(pairs, out / "holdout_comparison.png", titles)
    print(json.dumps(summary, sort_keys=True))


def cmd_render(args):
    from .pipeline import forward_render, EVAL_STREAM
    from .ppm import write_ppm
    from .render import orbit_camera

    model = _model_from_checkpoint(args.ckpt, args.config)
    cfg = model.cfg
    expr = np.zeros(model.asset.ne) if args.expr is None else np.asarray(args.expr)
    if expr.shape != (model.asset.ne,):
        raise ValueError(f"--expr needs {model.asset.ne} coefficients, got {expr.size}")
    slots = list(range(cfg.n_slots)) if args.slots is None else args.slots
    cam = orbit_camera(args.azimuth, args.elevation, cfg.render_w)
    out = forward_render(model, expr, cam, slots, args.seed, EVAL_STREAM, chunk=256)
    write_ppm(out.low.data[..., :3], f"{args.out}_low.ppm")
    write_ppm(out.high.data, f"{args.out}_high.ppm")
    if args.dump_features:
        atomic_write_bytes(args.dump_features, encode_tensors({"feature_image": out.low.data}))
    print(f"wrote {args.out}_low.ppm and {args.out}_high.ppm")


def cmd_eval(args):
    from .losses import psnr, ssim
    from .pipeline import load_targets, render_image
    from .scene import load_manifest

    model = _model_from_checkpoint(args.ckpt, args.config)
    cfg = model.cfg
    targets = load_targets(load_manifest(args.manifest), args.split)
    if not targets:
        raise ValueError(f"manifest has no '{args.split}' items")
    weights = LossWeights(cfg.lambda_r, cfg.lambda_p, cfg.lambda_n)
    acc: dict[str, list] = {}
    pairs = []
    for tg in targets:
        low, high = render_image(model, tg.expr, tg.camera, seed=cfg.seed)
        rec, parts = rec_loss(low, high, tg.image, weights.lambda_p, cfg.upsample)
        vals = {"psnr": psnr(high, tg.image), "ssim": ssim(high, tg.image),
                "l1": float(np.mean(np.abs(high - tg.image))), "rec": rec.item()}
        vals.update({k: v.item() for k, v in parts.items()})
        for key, v in vals.items():
            acc.setdefault(key, []).append(v)
        pairs.append((high, tg.image))
    report = {k: float(np.mean(v)) for k, v in acc.items()}
    report["count"] = len(targets)
    _write_json(report, args.out)
    if args.figure:
        from .plotting import plot_comparison
        plot_comparison(pairs, args.figure, [t.name for t in targets])


def cmd_gradcheck(args):
    from .gradcheck import THRESHOLD, run_suite
    modules = args.module or ["all"]
    if "all" in modules:
        modules = None
    t0 = time.perf_counter()
    results = run_suite(modules, seed=args.seed)
    for name, r in results.items():
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} {name:<10} worst rel err {r['worst']:.3e} ({r['worst_param']}) {r['seconds']:.1f}s")
    ok = all(r["passed"] for r in results.values())
    print(f"{'all passed' if ok else 'FAILED'} (threshold {THRESHOLD:g}, {time.perf_counter() - t0:.1f}s)")
    return EXIT_OK if ok else EXIT_RUNTIME


def knn_checksum(indices: np.ndarray) -> int:
    """Order-sensitive checksum of a result table, comparable across index kinds."""
    weights = np.arange(1, indices.shape[1] + 1, dtype=np.int64)
    return int(((indices.astype(np.int64) + 1) * weights).sum() % (2 ** 61 - 1))


def run_knn_bench(points_list, ks, n_queries, kind="grid", seed=0) -> list[dict]:
    rows = []
    for p in points_list:
        rng = np.random.default_rng([seed, 0xBE, p])
        cloud = rng.uniform(-0.5, 0.5, size=(p, 3))
        queries = rng.uniform(-0.5, 0.5, size=(n_queries, 3))
        for k in ks:
            build_index(cloud, 0.5, kind).query_batch(queries[:8], k)   # warm-up / JIT
            t0 = time.perf_counter()
            index = build_index(cloud, 0.5, kind)
            t1 = time.perf_counter()
            res = index.query_batch(queries, k)
            t2 = time.perf_counter()
            rows.append({"index": kind, "P": p, "K": k, "build_ms": 1e3 * (t1 - t0),
                         "queries_per_sec": n_queries / max(t2 - t1, 1e-12), "checksum": knn_checksum(res.indices)})
    return rows


def cmd_knn_bench(args):
    rows = run_knn_bench(args.points, args.k, args.queries, args.index, args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["P", "K", "build_ms", "queries_per_sec", "checksum"])
    for r in rows:
        w.writerow([r["P"], r["K"], f"{r['build_ms']:.3f}", f"{r['queries_per_sec']:.1f}", r["checksum"]])
    if args.out:
        atomic_write_bytes(args.out, buf.getvalue().encode("utf-8"))
    else:
        sys.stdout.write(buf.getvalue())
    if args.figure:
        from .plotting import plot_knn_bench
        plot_knn_bench(rows, args.figure)


COMMANDS = {"synth-scene": cmd_synth_scene, "fit": cmd_fit, "render": cmd_render, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "knn-bench": cmd_knn_bench}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:      # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            set_threads(args.threads)
        code = COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
