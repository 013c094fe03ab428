"""Attention fusion of several source tri-planes into one canonical tri-plane.

A learnable query tri-plane is projected by ``L_q``; each source texel by
``L_k``.  Their scaled dot product gives a per-texel score per source and a
softmax over sources gives convex weights that blend the raw source texels.
"""
from __future__ import annotations

import csv
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .triplane import init_triplanes


class MtaParams:
    def __init__(self, channels: int = 32, res: int = 64, rng: np.random.Generator | None = None,
                 seed: int = 0, scale: float = 0.05):
        self.query = ad.Parameter("mta.query", init_triplanes(seed * 1009 + 977, channels, res, scale))
        self.lq = ad.Linear("mta.lq", channels, channels, rng)
        self.lk = ad.Linear("mta.lk", channels, channels, rng)

    def parameters(self):
        return [self.query] + self.lq.parameters() + self.lk.parameters()


def _texels(planes: ad.Tensor) -> ad.Tensor:
    _, c, r, _ = planes.shape
    return ad.reshape(ad.transpose(planes, (0, 2, 3, 1)), (3 * r * r, c))


def _untexel(flat: ad.Tensor, c: int, r: int) -> ad.Tensor:
    return ad.transpose(ad.reshape(flat, (3, r, r, c)), (0, 3, 1, 2))


def softmax_blend(scores: ad.Tensor, values: ad.Tensor) -> tuple[ad.Tensor, np.ndarray]:
    """Blend ``values`` (N, T, C) with per-texel softmax weights of ``scores`` (N, T).

    Per texel the sources are visited in ascending (score, position) order and
    the result is accumulated as ``ref + sum_i w_i (v_i - ref)``, ``ref`` being
    the top-scoring source.  This makes the output invariant to source order
    and exact whenever all sources agree (including N = 1).
    """
    s, v = scores.data, values.data
    n, t = s.shape
    order = np.argsort(s, axis=0, kind="stable")
    s_sorted = np.take_along_axis(s, order, axis=0)
    v_sorted = np.take_along_axis(v, order[:, :, None], axis=0)
    top = s_sorted[-1]
    e = np.exp(s_sorted - top)
    denom = e[0].copy()
    for i in range(1, n):
        denom += e[i]
    w_sorted = e / denom
    ref = v_sorted[-1]
    out = ref.copy()
    for i in range(n - 1):
        out += w_sorted[i][:, None] * (v_sorted[i] - ref)
    weights = np.empty_like(w_sorted)
    np.put_along_axis(weights, order, w_sorted, axis=0)

    def bw(g):
        gs = weights * (np.einsum("ntc,tc->nt", v, g) - np.einsum("tc,tc->t", out, g)[None])
        gv = weights[:, :, None] * g[None]
        return gs, gv

    return ad.make_op(out, "softmax_blend", (scores, values), bw), weights


def mta_fuse(sources: Sequence[ad.Tensor], params: MtaParams, return_weights: bool = False):
    """Fuse N source tri-planes ``(3, C, R, R)`` into one of the same shape."""
    if len(sources) == 0:
        raise ValueError("MTA needs at least one source")
    shape = sources[0].shape
    if any(src.shape != shape for src in sources) or params.query.shape != shape:
        raise ad.ShapeError(f"MTA shape mismatch: sources {[s.shape for s in sources]}, "
                            f"query {params.query.shape}")
    _, c, r, _ = shape
    q = params.lq(_texels(params.query))
    vals, scores = [], []
    for src in sources:
        tex = _texels(src)
        vals.append(tex)
        scores.append(ad.tsum(q * params.lk(tex), axis=-1) * (1.0 / np.sqrt(c)))
    fused, weights = softmax_blend(ad.stack(scores), ad.stack(vals))
    out = _untexel(fused, c, r)
    if return_weights:
        return out, weights.reshape(len(sources), 3, r, r)
    return out


def write_attention_csv(weights: np.ndarray, path):
    """Debug dump: one row per (source, plane, row, col, weight)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "plane", "row", "col", "weight"])
        n, _, r, _ = weights.shape
        for idx in np.ndindex(weights.shape):
            writer.writerow([*idx, f"{weights[idx]:.17g}"])
