"""Linear blendshape point model: template plus shape, pose and expression bases.

Global rotation/translation is not part of the model; it lives in the camera
extrinsics, so evaluated clouds stay near the origin.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .tensorio import TensorFormatError, atomic_write_bytes, decode_tensors, encode_tensors

DEFAULT_SCENE_BOUND = 0.5


class AssetError(ValueError):
    pass


@dataclass(frozen=True)
class PointModelAsset:
    template: np.ndarray      # (P, 3)
    shape_basis: np.ndarray   # (P, 3, Ns)
    pose_basis: np.ndarray    # (P, 3, Np)
    expr_basis: np.ndarray    # (P, 3, Ne)
    scene_bound: float = DEFAULT_SCENE_BOUND

    def __post_init__(self):
        p = self.template.shape[0]
        if self.template.shape != (p, 3):
            raise AssetError(f"template must be (P, 3), got {self.template.shape}")
        for name in ("shape_basis", "pose_basis", "expr_basis"):
            b = getattr(self, name)
            if b.ndim != 3 or b.shape[:2] != (p, 3):
                raise AssetError(f"{name} must be (P, 3, N) with P={p}, got {b.shape}")
        if not all(np.isfinite(a).all() for a in (self.template, self.shape_basis,
                                                   self.pose_basis, self.expr_basis)):
            raise AssetError("asset contains non-finite values")
        if np.abs(self.template).max(initial=0.0) > self.scene_bound:
            raise AssetError(
                f"template extends to {np.abs(self.template).max():.4f}, outside scene bound {self.scene_bound}")

    @property
    def point_count(self) -> int:
        return self.template.shape[0]

    @property
    def ns(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def np_(self) -> int:
        return self.pose_basis.shape[2]

    @property
    def ne(self) -> int:
        return self.expr_basis.shape[2]

    def tensors(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}template": self.template, f"{prefix}shape_basis": self.shape_basis,
                f"{prefix}pose_basis": self.pose_basis, f"{prefix}expr_basis": self.expr_basis}


@dataclass
class FlameParams:
    shape: np.ndarray
    expression: np.ndarray
    pose: np.ndarray

    @classmethod
    def zeros(cls, asset: PointModelAsset) -> "FlameParams":
        return cls(np.zeros(asset.ns), np.zeros(asset.ne), np.zeros(asset.np_))

    def validate(self, asset: PointModelAsset):
        for name, n in (("shape", asset.ns), ("expression", asset.ne), ("pose", asset.np_)):
            v = getattr(self, name)
            length = v.shape[-1] if isinstance(v, ad.Tensor) else np.shape(v)[-1]
            if length != n:
                raise AssetError(f"{name} has {length} coefficients, asset expects {n}")


def evaluate_point_model(asset: PointModelAsset, params: FlameParams):
    """template + S·shape + P·pose + E·expression.

    Returns a ``(P, 3)`` array, or a Tensor when any coefficient vector is a
    Tensor (so gradients flow back into the coefficients).
    """
    params.validate(asset)
    terms = ((asset.shape_basis, params.shape), (asset.pose_basis, params.pose),
             (asset.expr_basis, params.expression))
    if not any(isinstance(c, ad.Tensor) for _, c in terms):
        out = asset.template.copy()
        for basis, coeff in terms:
            out += basis @ np.asarray(coeff, dtype=np.float64)
        return out
    p = asset.point_count
    out = ad.Tensor(asset.template)
    for basis, coeff in terms:
        coeff = ad.as_tensor(coeff)
        flat = ad.linear_forward(ad.reshape(coeff, (1, -1)), basis.reshape(3 * p, -1).T, np.zeros(3 * p))
        out = out + ad.reshape(flat, (p, 3))
    return out


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _harmonics(dirs: np.ndarray) -> np.ndarray:
    """Real spherical-harmonic-like polynomials up to degree 2 (unnormalized)."""
    x, y, z = dirs.T
    return np.stack([np.ones_like(x), x, y, z, x * y, y * z, x * z,
                     x * x - y * y, 3 * z * z - 1.0], axis=1)


def _smooth_basis(rng: np.random.Generator, dirs: np.ndarray, ncols: int, rms: float) -> np.ndarray:
    harm = _harmonics(dirs)                                    # (P, 9)
    coeffs = rng.normal(size=(harm.shape[1], 3, ncols))
    basis = np.einsum("ph,hac->pac", harm, coeffs)
    col_rms = np.sqrt((basis ** 2).sum(axis=1).mean(axis=0))   # (ncols,)
    return basis * (rms / col_rms)


def make_toy_asset(seed: int = 0, P: int = 642, Ns: int = 8, Np: int = 6, Ne: int = 10,
                   radius: float = 0.35, column_rms: float = 0.02,
                   scene_bound: float = DEFAULT_SCENE_BOUND) -> PointModelAsset:
    """Sphere-lattice stand-in for a licensed head model."""
    if P < 4:
        raise ValueError("toy asset needs at least 4 points")
    dirs = fibonacci_sphere(P)
    rng = np.random.default_rng([seed, 0x70A5])
    shape_basis = _smooth_basis(rng, dirs, Ns, column_rms)
    pose_basis = _smooth_basis(rng, dirs, Np, column_rms)
    expr_basis = _smooth_basis(rng, dirs, Ne, column_rms)
    return PointModelAsset(radius * dirs, shape_basis, pose_basis, expr_basis, scene_bound)


def subsample_asset(asset: PointModelAsset, count: int, seed: int = 0) -> PointModelAsset:
    """Seeded uniform subset of points; surviving points keep their relative order."""
    if not 1 <= count <= asset.point_count:
        raise ValueError(f"subsample count {count} outside [1, {asset.point_count}]")
    keep = np.sort(np.random.default_rng([seed, 0x5B5]).choice(asset.point_count, count, replace=False))
    return PointModelAsset(asset.template[keep], asset.shape_basis[keep], asset.pose_basis[keep],
                           asset.expr_basis[keep], asset.scene_bound)


def save_point_model(asset: PointModelAsset, path):
    header = {"format": "gpav-asset", "point_count": asset.point_count, "ns": asset.ns,
              "np": asset.np_, "ne": asset.ne, "scene_bound": asset.scene_bound}
    data = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + encode_tensors(asset.tensors())
    atomic_write_bytes(path, data)


def load_point_model(path) -> PointModelAsset:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise AssetError(f"{path}: parse error at byte offset {len(raw)}: header line not terminated")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise AssetError(f"{path}: parse error at byte offset {exc.pos}: {exc.msg}") from None
    missing = {"point_count", "ns", "np", "ne", "scene_bound"} - set(header)
    if missing:
        raise AssetError(f"{path}: header missing keys {sorted(missing)}")
    try:
        t = decode_tensors(raw[nl + 1:], base_offset=nl + 1)
    except TensorFormatError as exc:
        raise AssetError(f"{path}: parse error: {exc}") from None
    try:
        asset = PointModelAsset(t["template"], t["shape_basis"], t["pose_basis"], t["expr_basis"],
                                float(header["scene_bound"]))
    except KeyError as exc:
        raise AssetError(f"{path}: missing tensor {exc}") from None
    dims = (asset.point_count, asset.ns, asset.np_, asset.ne)
    declared = (header["point_count"], header["ns"], header["np"], header["ne"])
    if dims != tuple(declared):
        raise AssetError(f"{path}: header declares (P, Ns, Np, Ne)={tuple(declared)}, tensors give {dims}")
    return asset
