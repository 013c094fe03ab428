"""Reconstruction, density-norm and overall losses, plus image metrics.

Images are ``(H, W, 3)`` arrays or tensors with values in [0, 1].  All L1
terms are per-pixel means so the default weights do not depend on resolution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad

PYRAMID_FACTORS = (1, 2, 4)


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_p: float = 0.1
    lambda_n: float = 1e-4

    def __post_init__(self):
        for key, val in asdict(self).items():
            if not (np.isfinite(val) and val >= 0):
                raise ValueError(f"{key} must be finite and >= 0, got {val}")


@dataclass(frozen=True)
class LossReport:
    l1_lr: float
    l1_hr: float
    perc_lr: float
    perc_hr: float
    rec: float
    norm: float
    overall: float

    def as_dict(self) -> dict:
        return asdict(self)


def area_downsample(img, factor: int):
    """Mean over non-overlapping ``factor x factor`` blocks; works on arrays and tensors."""
    h, w, c = img.shape
    if h % factor or w % factor:
        raise ad.ShapeError(f"image {h}x{w} not divisible by {factor}")
    if factor == 1:
        return img
    shape = (h // factor, factor, w // factor, factor, c)
    if isinstance(img, ad.Tensor):
        return ad.mean(ad.reshape(img, shape), axis=(1, 3))
    return np.asarray(img, dtype=np.float64).reshape(shape).mean(axis=(1, 3))


def l1(a, b) -> ad.Tensor:
    return ad.mean(ad.tabs(ad.as_tensor(a) - b))


def perceptual_proxy(img, target) -> ad.Tensor:
    """L1 between average-pool pyramids (factors 1, 2, 4), averaged over levels."""
    if img.shape != target.shape:
        raise ad.ShapeError(f"perceptual proxy needs equal shapes, got {img.shape} vs {target.shape}")
    img = ad.as_tensor(img)
    target = np.asarray(target.data if isinstance(target, ad.Tensor) else target, dtype=np.float64)
    terms = [l1(area_downsample(img, f), area_downsample(target, f)) for f in PYRAMID_FACTORS]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def rec_loss(i_lr, i_hr, target, lambda_p: float, factor: int = 4) -> tuple[ad.Tensor, dict[str, ad.Tensor]]:
    """L1 and perceptual terms for the low-res RGB and the upsampled output.

    ``i_lr`` is compared against the ``factor``-times area-downsampled target.
    """
    target = np.asarray(target, dtype=np.float64)
    if i_hr.shape != target.shape:
        raise ad.ShapeError(f"high-res output {i_hr.shape} does not match target {target.shape}")
    low_target = area_downsample(target, factor)
    if i_lr.shape != low_target.shape:
        raise ad.ShapeError(f"low-res output {i_lr.shape} does not match downsampled target {low_target.shape}")
    parts = {
        "l1_lr": l1(i_lr, low_target),
        "l1_hr": l1(i_hr, target),
        "perc_lr": perceptual_proxy(i_lr, low_target),
        "perc_hr": perceptual_proxy(i_hr, target),
    }
    rec = parts["l1_lr"] + parts["l1_hr"] + lambda_p * (parts["perc_lr"] + parts["perc_hr"])
    return rec, parts


def density_norm_loss(densities) -> ad.Tensor:
    """||d||_2 / sqrt(count); the gradient at d = 0 is taken as zero."""
    d = ad.as_tensor(densities)
    n = max(d.size, 1)
    norm = float(np.sqrt(np.sum(d.data * d.data)))
    out = norm / np.sqrt(n)

    def bw(g):
        if norm == 0.0:
            return (np.zeros_like(d.data),)
        return (g * d.data / (norm * np.sqrt(n)),)

    return ad.make_op(np.array(out), "density_norm", (d,), bw)


def overall_loss(rec: ad.Tensor, norm: ad.Tensor, weights: LossWeights, parts: dict | None = None):
    """lambda_r * rec + lambda_n * norm, returned with a float report."""
    total = rec * weights.lambda_r + norm * weights.lambda_n
    parts = parts or {}
    report = LossReport(
        l1_lr=_scalar(parts.get("l1_lr")), l1_hr=_scalar(parts.get("l1_hr")),
        perc_lr=_scalar(parts.get("perc_lr")), perc_hr=_scalar(parts.get("perc_hr")),
        rec=rec.item(), norm=norm.item(), overall=total.item())
    return total, report


def _scalar(t) -> float:
    return float("nan") if t is None else ad.as_tensor(t).item()


# ---------------------------------------------------------------- metrics

def psnr(img, target, cap: float = 99.0) -> float:
    img, target = np.asarray(img, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if img.shape != target.shape:
        raise ad.ShapeError("psnr needs equal shapes")
    mse = float(np.mean((img - target) ** 2))
    if mse < 1e-10:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def ssim(img, target, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all 8x8 windows (stride 1, uniform weights), averaged over channels.

    Window statistics use population (1/N) moments; dynamic range is 1.
    """
    img, target = np.asarray(img, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if img.shape != target.shape:
        raise ad.ShapeError("ssim needs equal shapes")
    if img.ndim == 2:
        img, target = img[..., None], target[..., None]
    c1, c2 = k1 ** 2, k2 ** 2
    wa = sliding_window_view(img, (window, window), axis=(0, 1))
    wb = sliding_window_view(target, (window, window), axis=(0, 1))
    mu_a, mu_b = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
