"""Model assembly, forward rendering and the fitting loop.

The forward pass follows the composition

    image = render(MTA(source planes), PEF(point model(expression), features), camera)

with per-slot learnable planes standing in for encoded input images.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .config import Config
from .flame import FlameParams, PointModelAsset, evaluate_point_model, subsample_asset
from .knn import build_index
from .losses import LossReport, LossWeights, density_norm_loss, overall_loss, psnr, rec_loss, ssim
from .mta import MtaParams, mta_fuse
from .pef import PefConfig, PefLayers, init_point_features, pef_sample_batch
from .ppm import read_ppm
from .render import (Camera, FieldHeads, generate_rays, init_upsample_identity, plan_depths, ray_uniforms,
                     render_with_depths, upsample_to_rgb)
from .tensorio import atomic_write_bytes, load_checkpoint, save_checkpoint
from .triplane import SourceBank, triplane_sample

# named sub-streams derived from the single run seed
STREAM_INIT = 0x1A17
STREAM_STEP = 0x57E9
EVAL_STREAM = 0

METRIC_COLUMNS = ["step", "l1_lr", "l1_hr", "perc_lr", "perc_hr", "rec", "norm", "overall", "psnr_holdout"]


class AvatarModel:
    """All learnable state plus the (constant) point-model asset."""

    def __init__(self, cfg: Config, asset: PointModelAsset):
        if cfg.point_subsample:
            asset = subsample_asset(asset, cfg.point_subsample, cfg.seed)
        self.cfg = cfg
        self.asset = asset
        rng = np.random.default_rng([cfg.seed, STREAM_INIT])
        c = cfg.channels
        self.pef_cfg = PefConfig(k=cfg.knn_k, bands=cfg.pef_bands, radius_cap=cfg.pef_radius_cap,
                                 feature_dim=c, hidden_dim=c)
        if cfg.knn_k > asset.point_count:
            raise ValueError(f"knn_k={cfg.knn_k} exceeds point count {asset.point_count}")
        # gains: values are stored divided by the gain and rescaled at use (equalized-lr style)
        self.table = init_point_features(asset.point_count, c, rng, scale=0.1 / cfg.point_gain)
        self.pef_layers = PefLayers(self.pef_cfg, rng)
        self.bank = SourceBank(cfg.n_slots, c, cfg.triplane_res, cfg.plane_init_scale / cfg.plane_gain, cfg.seed)
        self.mta = MtaParams(c, cfg.triplane_res, rng, seed=cfg.seed, scale=cfg.plane_init_scale)
        self.heads = FieldHeads(rng, in_dim=2 * c)
        s = cfg.upsample
        self.upsample = ad.Linear("upsample", self.heads.feat1.dout, 3 * s * s, rng)
        init_upsample_identity(self.upsample, s)
        self.background = ad.Parameter("background", np.zeros(self.heads.feat1.dout))
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in model")

    def parameters(self) -> list[ad.Parameter]:
        return ([self.table] + self.pef_layers.parameters() + self.bank.parameters()
                + self.mta.parameters() + self.heads.parameters() + self.upsample.parameters()
                + [self.background])

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        for p in self.parameters():
            if p.name not in tensors:
                raise KeyError(f"checkpoint lacks parameter {p.name!r}")
            if tensors[p.name].shape != p.shape:
                raise ad.ShapeError(f"{p.name}: checkpoint shape {tensors[p.name].shape} != {p.shape}")
            p.data[...] = tensors[p.name]

    def source(self, slot: int) -> ad.Tensor:
        planes = self.bank[slot]
        return planes if self.cfg.plane_gain == 1.0 else planes * self.cfg.plane_gain

    def point_features(self) -> ad.Tensor:
        return self.table if self.cfg.point_gain == 1.0 else self.table * self.cfg.point_gain

    def point_cloud(self, expr) -> np.ndarray:
        fp = FlameParams.zeros(self.asset)
        fp.expression = np.asarray(expr, dtype=np.float64)
        return evaluate_point_model(self.asset, fp)


@dataclass
class RenderOutput:
    low: ad.Tensor          # (h, w, C) feature image, RGB in channels 0-2
    high: ad.Tensor         # (s*h, s*w, 3)
    densities: ad.Tensor    # (h*w, Nc+Nf)
    depths: np.ndarray
    empty_fraction: float


def _field_fn(model: AvatarModel, fused: ad.Tensor, cloud, use_pef: bool, stats: dict) -> Callable:
    cfg, pcfg = model.cfg, model.pef_cfg
    index = build_index(cloud.data if isinstance(cloud, ad.Tensor) else cloud, cfg.scene_bound) if use_pef else None

    table = model.point_features()

    def field(pts):
        canonical = triplane_sample(fused, pts, cfg.scene_bound)
        if use_pef:
            knn = index.query_batch(pts, pcfg.k, radius_cap=pcfg.radius_cap)
            expr_feat, empty = pef_sample_batch(pts, cloud, knn, table, model.pef_layers, pcfg)
            stats["empty"] = stats.get("empty", 0) + int(empty.sum())
        else:
            expr_feat = ad.Tensor(np.zeros((len(pts), pcfg.feature_dim)))
        stats["samples"] = stats.get("samples", 0) + len(pts)
        return model.heads(canonical, expr_feat)

    return field


def forward_render(model: AvatarModel, expr, camera: Camera, active_slots: Sequence[int], seed: int = 0,
                   stream: int = EVAL_STREAM, patch: tuple[int, int, int, int] | None = None,
                   use_pef: bool | None = None, cloud=None, depths: np.ndarray | None = None,
                   chunk: int | None = None) -> RenderOutput:
    """Render the low-res feature image and the upsampled RGB image.

    ``patch`` is ``(row0, col0, height, width)`` in low-res pixels; by default
    the full ``render_h x render_w`` image.  ``cloud`` overrides the point
    cloud evaluated from ``expr`` (used to freeze it).  ``depths`` replaces the
    two-pass sampling plan (finite-difference checks freeze it).  ``chunk``
    renders that many rays at a time without recording a graph.
    """
    cfg = model.cfg
    if len(active_slots) == 0:
        raise ValueError("active_slots must be non-empty")
    if len(set(active_slots)) != len(active_slots) or not all(0 <= s < len(model.bank) for s in active_slots):
        raise ValueError(f"invalid slot subset {list(active_slots)}")
    use_pef = cfg.use_pef if use_pef is None else use_pef
    if cloud is None:
        cloud = model.point_cloud(expr)
    fused = mta_fuse([model.source(s) for s in sorted(active_slots)], model.mta)
    stats: dict = {}
    field = _field_fn(model, fused, cloud, use_pef, stats)

    H, W = cfg.render_h, cfg.render_w
    r0, c0, h, w = patch if patch is not None else (0, 0, H, W)
    if not (0 <= r0 and r0 + h <= H and 0 <= c0 and c0 + w <= W):
        raise ValueError(f"patch {patch} outside {H}x{W} image")
    rows, cols = np.meshgrid(np.arange(r0, r0 + h), np.arange(c0, c0 + w), indexing="ij")
    pixel_ids = (rows * W + cols).reshape(-1)
    origins, dirs = generate_rays(camera, H, W)
    origins, dirs = origins[pixel_ids], dirs[pixel_ids]
    uc, uf = ray_uniforms(seed, pixel_ids, cfg.n_coarse, cfg.n_fine, stream)

    def run(sl):
        plan = depths[sl] if depths is not None else plan_depths(
            origins[sl], dirs[sl], camera.near, camera.far, field, uc[sl], uf[sl])
        return render_with_depths(origins[sl], dirs[sl], plan, camera.far, field, model.background)

    if chunk is None:
        res = run(slice(None))
        feats, dens, plan = res.features, res.densities, res.depths
    else:
        parts = []
        with ad.no_grad():
            for s in range(0, len(pixel_ids), chunk):
                parts.append(run(slice(s, s + chunk)))
        feats = ad.Tensor(np.concatenate([p.features.data for p in parts]))
        dens = ad.Tensor(np.concatenate([p.densities.data for p in parts]))
        plan = np.concatenate([p.depths for p in parts])
    low = ad.reshape(feats, (h, w, feats.shape[-1]))
    high = upsample_to_rgb(low, model.upsample, cfg.upsample)
    empty = stats.get("empty", 0) / max(stats.get("samples", 1), 1)
    return RenderOutput(low, high, dens, plan, empty)


def render_image(model: AvatarModel, expr, camera: Camera, active_slots=None, seed: int = 0,
                 chunk: int = 256, **kw) -> tuple[np.ndarray, np.ndarray]:
    """Full-frame (low RGB, high RGB) as numpy arrays, no graph recorded."""
    slots = list(range(len(model.bank))) if active_slots is None else active_slots
    out = forward_render(model, expr, camera, slots, seed, EVAL_STREAM, chunk=chunk, **kw)
    return out.low.data[..., :3], out.high.data


def density_at(model: AvatarModel, points, expr, active_slots=None, chunk: int = 4096) -> np.ndarray:
    """Field density at world points (N, 3), no graph recorded."""
    slots = list(range(len(model.bank))) if active_slots is None else active_slots
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(pts))
    with ad.no_grad():
        fused = mta_fuse([model.source(s) for s in sorted(slots)], model.mta)
        field = _field_fn(model, fused, model.point_cloud(expr), model.cfg.use_pef, {})
        for s in range(0, len(pts), chunk):
            out[s:s + chunk] = field(pts[s:s + chunk])[0].data
    return out


# ---------------------------------------------------------------- fitting

def sample_sources(rng: np.random.Generator, n: int, p_two: float = 0.7) -> list[int]:
    """A random unordered pair with probability ``p_two`` (when n >= 2), else a singleton."""
    if n < 1:
        raise ValueError("need at least one source slot")
    if n >= 2 and rng.random() < p_two:
        return sorted(int(i) for i in rng.choice(n, size=2, replace=False))
    return [int(rng.integers(n))]


@dataclass
class Target:
    camera: Camera
    expr: np.ndarray
    image: np.ndarray       # high-res RGB
    name: str = ""


def load_targets(manifest: dict, split: str) -> list[Target]:
    root = Path(manifest.get("root", "."))
    out = []
    for item in manifest["items"]:
        if item["split"] == split:
            out.append(Target(Camera.from_dict(item["camera"]), np.asarray(item["expr"], dtype=np.float64),
                              read_ppm(root / item["file"]), item["file"]))
    return out


def fit_step(model: AvatarModel, target: Target, slots: Sequence[int], weights: LossWeights, optimizer: ad.Adam,
             patch: tuple[int, int, int, int] | None = None, stream: int = 1) -> LossReport:
    """Forward, losses, backward, Adam update, zeroed gradients."""
    cfg = model.cfg
    s = cfg.upsample
    out = forward_render(model, target.expr, target.camera, slots, cfg.seed, stream, patch)
    if patch is None:
        crop = target.image
    else:
        r0, c0, h, w = patch
        crop = target.image[r0 * s:(r0 + h) * s, c0 * s:(c0 + w) * s]
    rec, parts = rec_loss(out.low[..., :3], out.high, crop, weights.lambda_p, s)
    norm = density_norm_loss(out.densities)
    total, report = overall_loss(rec, norm, weights, parts)
    if not np.isfinite(report.overall):
        raise ad.NonFiniteError(f"non-finite loss at stream {stream}: {report}")
    ad.backward(total)
    optimizer.step()
    optimizer.zero_grad()
    return report


def plan_step(cfg: Config, step: int, n_targets: int) -> tuple[int, list[int], tuple[int, int, int, int]]:
    """(target index, slot subset, patch) for a step; depends only on (seed, step)."""
    rng = np.random.default_rng([cfg.seed, STREAM_STEP, step])
    t = int(rng.integers(n_targets))
    slots = sample_sources(rng, cfg.n_slots, cfg.p_two)
    p = cfg.patch
    r0 = int(rng.integers(cfg.render_h // p)) * p
    c0 = int(rng.integers(cfg.render_w // p)) * p
    return t, slots, (r0, c0, p, p)


def evaluate(model: AvatarModel, targets: Sequence[Target], seed: int = 0) -> dict:
    """Mean PSNR/SSIM/L1 of the upsampled output against high-res targets."""
    scores = {"psnr": [], "ssim": [], "l1": []}
    for tg in targets:
        _, high = render_image(model, tg.expr, tg.camera, seed=seed)
        scores["psnr"].append(psnr(high, tg.image))
        scores["ssim"].append(ssim(high, tg.image))
        scores["l1"].append(float(np.mean(np.abs(high - tg.image))))
    return {k: float(np.mean(v)) for k, v in scores.items()}


def checkpoint_tensors(model: AvatarModel, optimizer: ad.Adam | None, step: int) -> dict[str, np.ndarray]:
    tensors = dict(model.state_tensors())
    tensors.update(model.asset.tensors(prefix="asset."))
    tensors["meta.step"] = np.array([float(step)])
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    return tensors


def restore(model: AvatarModel, optimizer: ad.Adam | None, tensors: dict[str, np.ndarray]) -> int:
    model.load_state_tensors(tensors)
    if optimizer is not None and "adam.step" in tensors:
        optimizer.load_state_tensors(tensors)
    return int(tensors.get("meta.step", np.zeros(1))[0])


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _eval_due(cfg: Config, done: int) -> bool:
    return done == cfg.steps or bool(cfg.eval_every and done % cfg.eval_every == 0)


def fit_loop(model: AvatarModel, manifest: dict, out_dir, resume=None,
             log: Callable[[str], None] | None = None) -> dict:
    """Run ``cfg.steps`` fit steps; write metrics.csv and checkpoint.gpav in ``out_dir``.

    Resuming from a checkpoint continues at its stored step with its Adam
    state; since every step's randomness is keyed by (seed, step) the
    continuation matches an uninterrupted run.
    """
    cfg = model.cfg
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights = LossWeights(cfg.lambda_r, cfg.lambda_p, cfg.lambda_n)
    optimizer = ad.Adam(model.parameters(), lr=cfg.lr)
    start = 0
    rows: list[list[str]] = []
    if resume is not None:
        start = restore(model, optimizer, load_checkpoint(resume))
        prev = Path(out) / "metrics.csv"
        if prev.exists():
            with open(prev, newline="") as fh:
                rows = [r for r in csv.reader(fh)][1:]
            rows = [r for r in rows if int(r[0]) < start]
            for r in rows:
                # the interrupted run's closing eval is not part of the schedule
                if not _eval_due(cfg, int(r[0]) + 1):
                    r[-1] = ""
    train = load_targets(manifest, "train")
    holdout = load_targets(manifest, "holdout")
    if len(train) < 2:
        raise ValueError("manifest needs at least two training targets")
    reports = []
    t0 = time.perf_counter()
    final_eval = None
    for step in range(start, cfg.steps):
        t, slots, patch = plan_step(cfg, step, len(train))
        rep = fit_step(model, train[t], slots, weights, optimizer, patch, stream=step + 1)
        reports.append(rep)
        done = step + 1
        ps = None
        if holdout and _eval_due(cfg, done):
            final_eval = evaluate(model, holdout, cfg.seed)
            ps = final_eval["psnr"]
            if log:
                log(f"step {done}: overall {rep.overall:.5f} holdout psnr {ps:.2f} dB "
                    f"ssim {final_eval['ssim']:.4f} ({time.perf_counter() - t0:.0f}s)")
        d = rep.as_dict()
        rows.append([str(step)] + [_fmt(d[k]) for k in METRIC_COLUMNS[1:-1]] + [_fmt(ps)])
    if final_eval is None and holdout and cfg.steps > start:
        final_eval = evaluate(model, holdout, cfg.seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    writer.writerows(rows)
    atomic_write_bytes(out / "metrics.csv", buf.getvalue().encode("utf-8"))
    save_checkpoint(out / "checkpoint.gpav", checkpoint_tensors(model, optimizer, max(cfg.steps, start)))
    return {"reports": reports, "eval": final_eval, "seconds": time.perf_counter() - t0}
