"""Tri-plane feature storage and lookup.

Planes are stored as ``(3, C, R, R)`` in the order XY, XZ, YZ.  A position
``x`` inside the cube ``[-b, b]^3`` is divided by ``b``; the first projected
coordinate indexes columns and the second indexes rows.  Bilinear lookups use
the align-corners convention (-1 is the centre of texel 0, +1 the centre of
texel R-1) and clamp to the border outside that range.  The three plane
samples are summed.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse

from . import autodiff as ad

PLANE_AXES = ((0, 1), (0, 2), (1, 2))


def init_triplanes(seed: int, channels: int = 32, res: int = 64, scale: float = 0.05) -> np.ndarray:
    if scale < 0:
        raise ValueError("scale must be non-negative")
    rng = np.random.default_rng([seed, 0x3D])
    return rng.uniform(-scale, scale, size=(3, channels, res, res))


def _corners(u: np.ndarray, v: np.ndarray, res: int):
    col = (np.clip(u, -1.0, 1.0) + 1.0) * 0.5 * (res - 1)
    row = (np.clip(v, -1.0, 1.0) + 1.0) * 0.5 * (res - 1)
    c0 = np.clip(np.floor(col).astype(np.int64), 0, max(res - 2, 0))
    r0 = np.clip(np.floor(row).astype(np.int64), 0, max(res - 2, 0))
    fc = col - c0
    fr = row - r0
    c1 = np.minimum(c0 + 1, res - 1)
    r1 = np.minimum(r0 + 1, res - 1)
    idx = np.stack([r0 * res + c0, r0 * res + c1, r1 * res + c0, r1 * res + c1], axis=1)
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    return idx, w


def bilinear_matrix(u: np.ndarray, v: np.ndarray, res: int) -> sparse.csr_matrix:
    """Sparse (S, R*R) interpolation operator for lookups at (u, v)."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    idx, w = _corners(u, v, res)
    rows = np.repeat(np.arange(len(u)), 4)
    return sparse.csr_matrix((w.reshape(-1), (rows, idx.reshape(-1))), shape=(len(u), res * res))


def bilinear_sample(plane: np.ndarray, u: float, v: float) -> np.ndarray:
    """Feature vector (C,) of a single ``(C, R, R)`` plane at (u, v)."""
    c, res, _ = plane.shape
    idx, w = _corners(np.array([u]), np.array([v]), res)
    flat = plane.reshape(c, res * res)
    return flat[:, idx[0]] @ w[0]


def project(xs: np.ndarray, bound: float) -> list[tuple[np.ndarray, np.ndarray]]:
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3) / bound
    return [(xs[:, a], xs[:, b]) for a, b in PLANE_AXES]


def triplane_sample(planes, xs: np.ndarray, bound: float = 0.5) -> ad.Tensor:
    """Summed XY/XZ/YZ features (S, C) at positions ``xs``; differentiable in the planes."""
    planes = ad.as_tensor(planes)
    _, c, res, _ = planes.shape
    mats = [bilinear_matrix(u, v, res) for u, v in project(xs, bound)]
    flat = planes.data.reshape(3, c, res * res)
    out = sum(m @ flat[p].T for p, m in enumerate(mats))

    def bw(g):
        grad = np.stack([(m.T @ g).T for m in mats])
        return (grad.reshape(planes.shape),)

    return ad.make_op(out, "triplane_sample", (planes,), bw)


class SourceBank:
    """Per-slot learnable planes standing in for encoded input images."""

    def __init__(self, count: int, channels: int = 32, res: int = 64, scale: float = 0.05, seed: int = 0):
        if count < 1:
            raise ValueError("source bank needs at least one slot")
        self.slots = [ad.Parameter(f"bank.{i}", init_triplanes(seed * 1009 + i, channels, res, scale))
                      for i in range(count)]

    def __len__(self):
        return len(self.slots)

    def __getitem__(self, i) -> ad.Parameter:
        return self.slots[i]

    def parameters(self):
        return list(self.slots)
