"""Point-based expression field.

Each sample position gathers its K nearest neural points, maps every
(point feature, encoded offset) pair through a two-layer MLP, and blends the
results with normalised inverse-distance weights.  Point positions move with
the expression coefficients, which is the only way expression reaches the
field.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .knn import BatchKnn


@dataclass(frozen=True)
class PefConfig:
    k: int = 8
    bands: int = 6
    radius_cap: float | None = None
    feature_dim: int = 32
    hidden_dim: int = 32
    activation: str = "softplus"
    eps: float = 1e-8

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("PEF needs k >= 1")
        if self.bands < 0:
            raise ValueError("frequency bands must be >= 0")

    @property
    def encoded_dim(self) -> int:
        return 3 + 2 * 3 * self.bands

    @property
    def input_dim(self) -> int:
        return self.feature_dim + self.encoded_dim


class PefLayers:
    """L_p: (C + D) -> hidden -> C."""

    def __init__(self, cfg: PefConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.lp1 = ad.Linear("pef.lp1", cfg.input_dim, cfg.hidden_dim, rng)
        self.lp2 = ad.Linear("pef.lp2", cfg.hidden_dim, cfg.feature_dim, rng)

    def parameters(self):
        return self.lp1.parameters() + self.lp2.parameters()


def init_point_features(point_count: int, dim: int = 32, rng: np.random.Generator | None = None,
                        scale: float = 0.1) -> ad.Parameter:
    data = np.zeros((point_count, dim)) if rng is None else rng.uniform(-scale, scale, (point_count, dim))
    return ad.Parameter("pef.features", data)


def _frequencies(bands: int) -> np.ndarray:
    return (2.0 ** np.arange(bands)) * np.pi


def frequency_encode(v, bands: int = 6):
    """[v, sin(2^l π v) for all l, axes, cos(2^l π v) for all l, axes].

    Sines and cosines are ordered band-major then axis.  Accepts a numpy
    array or a Tensor with trailing extent 3.
    """
    freqs = _frequencies(bands)
    if isinstance(v, ad.Tensor):
        if bands == 0:
            return v
        lead = v.shape[:-1]
        scaled = ad.reshape(ad.reshape(v, lead + (1, 3)) * freqs[:, None], lead + (3 * bands,))
        return ad.concat([v, ad.sin(scaled), ad.cos(scaled)], axis=-1)
    v = np.asarray(v, dtype=np.float64)
    if bands == 0:
        return v.copy()
    # octave doubling: sin 2a = 2 sin a cos a, cos 2a = 1 - 2 sin^2 a
    sines = np.empty(v.shape[:-1] + (bands, 3))
    cosines = np.empty_like(sines)
    sines[..., 0, :] = np.sin(np.pi * v)
    cosines[..., 0, :] = np.cos(np.pi * v)
    for band in range(1, bands):
        s, c = sines[..., band - 1, :], cosines[..., band - 1, :]
        sines[..., band, :] = 2.0 * s * c
        cosines[..., band, :] = 1.0 - 2.0 * s * s
    lead = v.shape[:-1] + (3 * bands,)
    return np.concatenate([v, sines.reshape(lead), cosines.reshape(lead)], axis=-1)


def canonical_neighbor_order(knn: BatchKnn) -> BatchKnn:
    """Re-sort each row by (distance, index); padded slots (-1, inf) go last."""
    order = np.lexsort((knn.indices, knn.distances), axis=1)
    return BatchKnn(np.take_along_axis(knn.indices, order, 1), np.take_along_axis(knn.distances, order, 1))


def neighbor_weights(dist: np.ndarray, valid: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Normalised 1/max(d, eps) weights; rows with no valid neighbour are all zero."""
    w = np.where(valid, 1.0 / np.maximum(np.where(valid, dist, 1.0), eps), 0.0)
    total = w.sum(axis=1, keepdims=True)
    return w / np.where(total > 0, total, 1.0)


def pef_sample_batch(xs: np.ndarray, cloud, knn: BatchKnn, table: ad.Tensor, layers: PefLayers,
                     cfg: PefConfig) -> tuple[ad.Tensor, np.ndarray]:
    """Expression features for sample positions ``xs`` (S, 3).

    ``cloud`` is the deformed point cloud, either a constant array or a Tensor
    (then gradients reach the point positions).  Returns ``(features (S, C),
    empty)`` where ``empty`` flags samples without neighbours under the radius
    cap; their features are zero.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
    knn = canonical_neighbor_order(knn)
    valid = knn.indices >= 0
    empty = ~valid.any(axis=1)
    idx = np.where(valid, knn.indices, 0)
    c = cfg.feature_dim

    if isinstance(cloud, ad.Tensor) and cloud.requires_grad:
        rel = ad.take_rows(cloud, idx) - xs[:, None, :]
        d2 = ad.tsum(rel * rel, axis=-1)
        dist = ad.sqrt(ad.clamp_min(d2, cfg.eps * cfg.eps))
        w = ad.div(valid.astype(np.float64), dist)
        total = ad.tsum(w, axis=1, keepdims=True) + empty[:, None].astype(np.float64)
        weights = w / total
    else:
        pts = cloud.data if isinstance(cloud, ad.Tensor) else np.asarray(cloud)
        rel = pts[idx] - xs[:, None, :]
        d = np.sqrt(np.maximum((rel * rel).sum(axis=-1), cfg.eps * cfg.eps))
        weights = neighbor_weights(d, valid, cfg.eps)

    enc = frequency_encode(rel, cfg.bands)
    w1 = layers.lp1.weight
    # the first layer acts on concat(f_i, enc); project the per-point table once, then gather
    proj = ad.linear_forward(table, w1[:c], np.zeros(w1.shape[1]))
    h = ad.take_rows(proj, idx) + ad.linear_forward(enc, w1[c:], layers.lp1.bias)
    h = ad.activation(h, cfg.activation)
    per_point = layers.lp2(h)
    weights = ad.reshape(ad.as_tensor(weights), idx.shape + (1,))
    return ad.tsum(per_point * weights, axis=1), empty


def pef_sample(x, cloud, index, table, layers: PefLayers, cfg: PefConfig) -> tuple[np.ndarray, bool]:
    """Single-position convenience wrapper; returns (32-vector, empty flag)."""
    knn = index.query_batch(np.reshape(x, (1, 3)), cfg.k, radius_cap=cfg.radius_cap)
    with ad.no_grad():
        f, empty = pef_sample_batch(np.reshape(x, (1, 3)), cloud, knn, table, layers, cfg)
    return f.data[0], bool(empty[0])
