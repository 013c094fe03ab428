"""Finite-difference checks for every trainable path, grouped by module.

Each check builds a small random instance, runs :func:`finite_diff_check`
and returns the worst relative error per parameter.  Sampling plans and
neighbour sets are computed once and held fixed, since both are piecewise
constant in the parameters.
"""
from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .config import config_from_dict
from .flame import FlameParams, evaluate_point_model, make_toy_asset
from .knn import build_index
from .losses import LossWeights, density_norm_loss, overall_loss, perceptual_proxy, rec_loss
from .mta import MtaParams, mta_fuse
from .pef import PefConfig, PefLayers, init_point_features, pef_sample_batch
from .pipeline import AvatarModel, forward_render
from .render import FieldHeads, composite, orbit_camera, upsample_to_rgb
from .triplane import triplane_sample

THRESHOLD = 1e-4

# gradient is identically zero: a shared key bias shifts every source score equally
STRUCTURALLY_ZERO = {"mta.lk.bias"}


def _rng(seed):
    return np.random.default_rng([seed, 0x6C])


def check_autodiff(seed=0):
    rng = _rng(seed)
    layer = ad.Linear("lin", 7, 5, rng)
    x = ad.Parameter("x", rng.normal(size=(4, 7)))

    def loss():
        h = layer(x)
        return ad.tsum(ad.softplus(h) * ad.sigmoid(h) + ad.relu(h + 0.3) ** 2)

    return ad.finite_diff_check(loss, layer.parameters() + [x], seed=seed)


def check_flame(seed=0):
    rng = _rng(seed)
    asset = make_toy_asset(seed, P=20, Ns=3, Np=2, Ne=4)
    coeff = ad.Parameter("expression", rng.normal(size=asset.ne))
    w = rng.normal(size=(asset.point_count, 3))

    def loss():
        cloud = evaluate_point_model(asset, FlameParams(np.zeros(3), coeff, np.zeros(2)))
        return ad.tsum(ad.sin(cloud * 5.0) * w)

    return ad.finite_diff_check(loss, [coeff], seed=seed)


def check_pef(seed=0):
    rng = _rng(seed)
    cfg = PefConfig(k=4)
    asset = make_toy_asset(seed, P=32)
    cloud = ad.Parameter("cloud", asset.template)
    xs = rng.uniform(-0.4, 0.4, size=(12, 3))
    knn = build_index(asset.template, asset.scene_bound).query_batch(xs, cfg.k)
    layers = PefLayers(cfg, rng)
    table = init_point_features(asset.point_count, cfg.feature_dim, rng)
    w = rng.normal(size=(12, cfg.feature_dim))

    def loss():
        f, _ = pef_sample_batch(xs, cloud, knn, table, layers, cfg)
        return ad.tsum(f * w)

    return ad.finite_diff_check(loss, layers.parameters() + [table, cloud], seed=seed)


def check_triplane(seed=0):
    rng = _rng(seed)
    planes = ad.Parameter("planes", rng.normal(size=(3, 6, 9, 9)))
    xs = rng.uniform(-0.6, 0.6, size=(30, 3))
    w = rng.normal(size=(30, 6))
    return ad.finite_diff_check(lambda: ad.tsum(triplane_sample(planes, xs) * w), [planes], seed=seed)


def check_mta(seed=0):
    rng = _rng(seed)
    params = MtaParams(channels=8, res=5, rng=rng, seed=seed, scale=0.5)
    sources = [ad.Parameter(f"source.{i}", rng.normal(size=(3, 8, 5, 5))) for i in range(3)]
    w = rng.normal(size=(3, 8, 5, 5))
    check = [p for p in params.parameters() if p.name not in STRUCTURALLY_ZERO]
    return ad.finite_diff_check(lambda: ad.tsum(mta_fuse(sources, params) * w), check + sources, seed=seed)


def check_heads(seed=0):
    rng = _rng(seed)
    heads = FieldHeads(rng)
    a = ad.Parameter("canonical", rng.normal(size=(6, 32)))
    b = ad.Parameter("expression", rng.normal(size=(6, 32)))
    w = rng.normal(size=(6, 32))

    def loss():
        dens, feat = heads(a, b)
        return ad.tsum(dens) + ad.tsum(feat * w)

    return ad.finite_diff_check(loss, heads.parameters() + [a, b], seed=seed)


def check_composite(seed=0):
    rng = _rng(seed)
    depths = np.sort(rng.uniform(0.75, 1.85, size=(5, 12)), axis=-1)
    dens = ad.Parameter("densities", rng.uniform(0.1, 5.0, size=(5, 12)))
    feat = ad.Parameter("features", rng.normal(size=(5, 12, 32)))
    bg = ad.Parameter("background", rng.normal(size=32))
    w = rng.normal(size=(5, 32))
    return ad.finite_diff_check(lambda: ad.tsum(composite(depths, dens, feat, bg, 1.85)[0] * w),
                                [dens, feat, bg], seed=seed)


def check_upsample(seed=0):
    rng = _rng(seed)
    head = ad.Linear("upsample", 32, 48, rng)
    img = ad.Parameter("feature_image", rng.normal(size=(3, 2, 32)))
    w = rng.normal(size=(12, 8, 3))
    return ad.finite_diff_check(lambda: ad.tsum(upsample_to_rgb(img, head) * w), head.parameters() + [img], seed=seed)


def check_losses(seed=0):
    rng = _rng(seed)
    lr = ad.Parameter("i_lr", rng.uniform(0, 1, size=(4, 4, 3)))
    hr = ad.Parameter("i_hr", rng.uniform(0, 1, size=(16, 16, 3)))
    dens = ad.Parameter("densities", rng.uniform(0.5, 3.0, size=40))
    target = rng.uniform(0, 1, size=(16, 16, 3))
    weights = LossWeights(1.0, 0.1, 0.3)

    def loss():
        rec, parts = rec_loss(lr, hr, target, weights.lambda_p)
        total, _ = overall_loss(rec, density_norm_loss(dens), weights, parts)
        return total + perceptual_proxy(hr, target)

    return ad.finite_diff_check(loss, [lr, hr, dens], seed=seed)


def tiny_pipeline(seed=0):
    cfg = config_from_dict({"seed": seed, "triplane_res": 6, "render_h": 4, "render_w": 4, "patch": 4,
                            "n_coarse": 6, "n_fine": 6, "point_count": 48, "plane_init_scale": 0.5})
    asset = make_toy_asset(seed, P=48)
    model = AvatarModel(cfg, asset)
    return cfg, model


def check_pipeline(seed=0):
    cfg, model = tiny_pipeline(seed)
    rng = _rng(seed)
    cam = orbit_camera(15.0, 5.0, cfg.render_w)
    expr = rng.normal(size=model.asset.ne)
    target = rng.uniform(0, 1, size=(4 * cfg.render_h, 4 * cfg.render_w, 3))
    slots = [0, 1]
    plan = forward_render(model, expr, cam, slots, seed).depths
    weights = LossWeights(1.0, 0.1, 1e-2)

    def loss():
        out = forward_render(model, expr, cam, slots, seed, depths=plan)
        rec, parts = rec_loss(out.low[..., :3], out.high, target, weights.lambda_p)
        total, _ = overall_loss(rec, density_norm_loss(out.densities), weights, parts)
        return total

    params = [p for p in model.parameters() if p.name not in STRUCTURALLY_ZERO]
    return ad.finite_diff_check(loss, params, epsilon=1e-4, seed=seed, max_coords=8, min_rel_grad=1e-2)


SUITE = {
    "autodiff": check_autodiff,
    "flame": check_flame,
    "pef": check_pef,
    "triplane": check_triplane,
    "mta": check_mta,
    "heads": check_heads,
    "composite": check_composite,
    "upsample": check_upsample,
    "losses": check_losses,
    "pipeline": check_pipeline,
}


def run_suite(modules=None, seed=0) -> dict[str, dict]:
    """{module: {"worst": float, "worst_param": str, "seconds": float, "passed": bool}}."""
    names = list(SUITE) if modules in (None, "all", ["all"]) else list(modules)
    results = {}
    for name in names:
        if name not in SUITE:
            raise KeyError(f"unknown gradcheck module {name!r}; choose from {sorted(SUITE)} or 'all'")
        t0 = time.perf_counter()
        errs = SUITE[name](seed)
        worst_param = max(errs, key=errs.get)
        results[name] = {"worst": float(errs[worst_param]), "worst_param": worst_param,
                         "seconds": time.perf_counter() - t0, "passed": errs[worst_param] < THRESHOLD}
    return results
