"""Rays, two-pass hierarchical sampling, field heads, compositing and upsampling.

Camera convention: the camera looks down its local -Z axis with +X to the
right and +Y up; pixel rows grow downwards.  ``rotation``/``translation`` map
camera coordinates to world coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad

RGB = 3
FEATURE_DIM = 32


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.75
    far: float = 1.85

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        rot = np.asarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3) or np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation must be orthonormal")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def scaled(self, factor: float) -> "Camera":
        """Same pose, intrinsics for an image ``factor`` times larger."""
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                      self.rotation, self.translation, self.near, self.far)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "near": self.near, "far": self.far}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["rotation"]),
                   np.array(d["translation"]), d["near"], d["far"])


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    back = eye - target
    back /= np.linalg.norm(back)
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    return np.stack([right, true_up, back], axis=1)


def orbit_camera(azimuth_deg: float, elevation_deg: float, size: int, distance: float = 1.3,
                 fov_deg: float = 40.0, near: float = 0.75, far: float = 1.85) -> Camera:
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    eye = distance * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    focal = 0.5 * size / np.tan(0.5 * np.radians(fov_deg))
    return Camera(focal, focal, 0.5 * size, 0.5 * size, look_at(eye), eye, near, far)


def generate_rays(camera: Camera, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole rays through pixel centres, row-major; returns (origins, unit dirs), each (H*W, 3)."""
    if h < 1 or w < 1:
        raise ValueError("image must be at least 1x1")
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    d_cam = np.stack([(jj - camera.cx) / camera.fx, -(ii - camera.cy) / camera.fy, -np.ones_like(jj)], axis=-1)
    d = d_cam.reshape(-1, 3) @ camera.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(camera.translation, d.shape).copy(), d


# ---------------------------------------------------------------- sampling

def stratified_depths(near, far, u: np.ndarray) -> np.ndarray:
    """One depth per equal bin of [near, far]; ``u`` (..., n) are offsets in [0, 1)."""
    n = u.shape[-1]
    step = (far - near) / n
    return near + (np.arange(n) + u) * step


def sample_coarse(near: float, far: float, n: int, rng) -> np.ndarray:
    if n < 2:
        raise ValueError("coarse pass needs at least 2 samples")
    return stratified_depths(near, far, rng.random(n))


def bin_edges(depths: np.ndarray, near, far) -> np.ndarray:
    """Edges (..., n+1) around each depth: near, midpoints, far."""
    mids = 0.5 * (depths[..., 1:] + depths[..., :-1])
    lo = np.broadcast_to(np.asarray(near, dtype=np.float64), depths.shape[:-1])[..., None]
    hi = np.broadcast_to(np.asarray(far, dtype=np.float64), depths.shape[:-1])[..., None]
    return np.concatenate([lo, mids, hi], axis=-1)


def importance_depths(depths: np.ndarray, weights: np.ndarray, u: np.ndarray, near, far) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant pdf over the coarse bins."""
    pdf = np.asarray(weights, dtype=np.float64) + 1e-5
    pdf = pdf / pdf.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros(pdf.shape[:-1] + (1,)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[..., -1] = 1.0
    edges = bin_edges(depths, near, far)
    # bin index = number of cdf knots <= u, minus one (searchsorted side="right")
    b = np.sum(cdf[..., None, :] <= u[..., :, None], axis=-1) - 1
    b = np.clip(b, 0, pdf.shape[-1] - 1)
    c0 = np.take_along_axis(cdf, b, -1)
    c1 = np.take_along_axis(cdf, b + 1, -1)
    e0 = np.take_along_axis(edges, b, -1)
    e1 = np.take_along_axis(edges, b + 1, -1)
    frac = (u - c0) / np.maximum(c1 - c0, 1e-300)
    return e0 + np.clip(frac, 0.0, 1.0) * (e1 - e0)


def sample_fine(coarse_depths: np.ndarray, coarse_weights: np.ndarray, n: int, rng,
                near: float, far: float) -> np.ndarray:
    """Coarse depths merged with ``n`` importance draws, sorted."""
    fine = importance_depths(coarse_depths, coarse_weights, rng.random(n), near, far)
    return np.sort(np.concatenate([coarse_depths, fine]))


def ray_uniforms(seed: int, pixel_ids: np.ndarray, n_coarse: int, n_fine: int, stream: int = 0):
    """Per-ray streams keyed by (seed, stream, pixel index); independent of batching."""
    uc = np.empty((len(pixel_ids), n_coarse))
    uf = np.empty((len(pixel_ids), n_fine))
    for row, pid in enumerate(pixel_ids):
        rng = np.random.default_rng([int(seed), 0x5A17, int(stream), int(pid)])
        uc[row] = rng.random(n_coarse)
        uf[row] = rng.random(n_fine)
    return uc, uf


# ---------------------------------------------------------------- field

class FieldHeads:
    """Trunk 64->128->128->128, density 128->1, feature 128->64->32."""

    def __init__(self, rng: np.random.Generator | None = None, activation: str = "softplus",
                 in_dim: int = 2 * FEATURE_DIM, width: int = 128):
        self.activation = activation
        self.trunk = [ad.Linear("heads.trunk0", in_dim, width, rng),
                      ad.Linear("heads.trunk1", width, width, rng),
                      ad.Linear("heads.trunk2", width, width, rng)]
        self.density = ad.Linear("heads.density", width, 1, rng)
        self.feat0 = ad.Linear("heads.feat0", width, 64, rng)
        self.feat1 = ad.Linear("heads.feat1", 64, FEATURE_DIM, rng)

    def layers(self):
        return self.trunk + [self.density, self.feat0, self.feat1]

    def parameters(self):
        return [p for layer in self.layers() for p in layer.parameters()]

    def __call__(self, canonical: ad.Tensor, expression: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        h = ad.concat([canonical, expression], axis=-1)
        for layer in self.trunk:
            h = ad.activation(layer(h), self.activation)
        density = ad.softplus(self.density(h))
        feature = self.feat1(ad.activation(self.feat0(h), self.activation))
        return ad.reshape(density, density.shape[:-1]), feature


def field_eval(canonical: ad.Tensor, expression: ad.Tensor, heads: FieldHeads):
    """(density >= 0, raw 32-d feature) from the 32-d canonical and expression features."""
    return heads(canonical, expression)


# ---------------------------------------------------------------- compositing

def _squash_rgb(feature: ad.Tensor) -> ad.Tensor:
    return ad.concat([ad.sigmoid(feature[..., :RGB]), feature[..., RGB:]], axis=-1)


def composite(depths: np.ndarray, densities, features, background, far) -> tuple[ad.Tensor, np.ndarray, np.ndarray]:
    """Alpha-composite per ray.

    depths (R, N) sorted; densities (R, N); features (R, N, C) raw (the RGB
    channels are sigmoid-squashed here); background (C,) raw, squashed the
    same way so composited RGB stays in [0, 1].  Returns the
    composited (R, C) tensor plus the numpy compositing weights (R, N) and
    final transmittance (R,).
    """
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(np.diff(depths, axis=-1) < 0):
        raise ad.ContractError("composite() requires depths sorted along each ray")
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), depths.shape[:-1])[..., None]
    delta = np.diff(np.concatenate([depths, far], axis=-1), axis=-1)
    sd = ad.as_tensor(densities) * delta
    alpha = 1.0 - ad.exp(-sd)
    trans = ad.exp(-ad.cumsum(sd, axis=-1, exclusive=True))
    weights = trans * alpha
    t_final = ad.exp(-ad.tsum(sd, axis=-1, keepdims=True))
    colored = _squash_rgb(ad.as_tensor(features))
    out = ad.tsum(ad.reshape(weights, weights.shape + (1,)) * colored, axis=-2) + t_final * _squash_rgb(ad.as_tensor(background))
    return out, weights.data, t_final.data[..., 0]


def init_upsample_identity(head: ad.Linear, factor: int = 4, gain: float = 4.0):
    """Start the upsampler as nearest-neighbour replication of the RGB channels.

    ``sigmoid(gain * (v - 0.5))`` has unit slope at v = 0.5 for gain 4, so the
    head begins close to the identity on mid-range colours.
    """
    w = np.zeros((head.din, head.dout))
    for sub in range(factor * factor):
        for c in range(RGB):
            w[c, sub * RGB + c] = gain
    head.weight.data[...] = w
    head.bias.data[...] = -0.5 * gain


def upsample_to_rgb(img, head: ad.Linear, factor: int = 4) -> ad.Tensor:
    """Per-pixel linear C -> 3*s*s, depth-to-space, sigmoid.

    ``out[s*i + a, s*j + b, c] = sigmoid(lin[i, j, (a*s + b)*3 + c])``.
    """
    img = ad.as_tensor(img)
    h, w, _ = img.shape
    if head.dout != RGB * factor * factor:
        raise ad.ShapeError(f"upsample head must output {RGB * factor * factor} channels")
    lin = head(img)
    lin = ad.reshape(lin, (h, w, factor, factor, RGB))
    lin = ad.transpose(lin, (0, 2, 1, 3, 4))
    return ad.sigmoid(ad.reshape(lin, (h * factor, w * factor, RGB)))


# ---------------------------------------------------------------- full render

@dataclass
class RayBatchResult:
    features: ad.Tensor      # (R, C) composited
    densities: ad.Tensor     # (R, Nc+Nf)
    depths: np.ndarray       # (R, Nc+Nf)
    weights: np.ndarray      # (R, Nc+Nf)
    transmittance: np.ndarray  # (R,)


FieldFn = Callable[[np.ndarray], tuple[ad.Tensor, ad.Tensor]]


def plan_depths(origins, dirs, near, far, field_fn: FieldFn, uc: np.ndarray, uf: np.ndarray) -> np.ndarray:
    """Two-pass sampling plan: stratified coarse depths plus importance draws."""
    coarse = stratified_depths(near, far, uc)
    if uf.shape[-1] == 0:
        return coarse
    pts = origins[:, None, :] + coarse[..., None] * dirs[:, None, :]
    with ad.no_grad():
        dens, _ = field_fn(pts.reshape(-1, 3))
    sd = dens.data.reshape(coarse.shape) * np.diff(np.concatenate(
        [coarse, np.full(coarse.shape[:-1] + (1,), far)], axis=-1), axis=-1)
    trans = np.exp(-(np.cumsum(sd, axis=-1) - sd))
    w = trans * (1.0 - np.exp(-sd))
    fine = importance_depths(coarse, w, uf, near, far)
    return np.sort(np.concatenate([coarse, fine], axis=-1), axis=-1)


def render_with_depths(origins, dirs, depths, far, field_fn: FieldFn, background) -> RayBatchResult:
    r, n = depths.shape
    pts = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    dens, feat = field_fn(pts.reshape(-1, 3))
    dens = ad.reshape(dens, (r, n))
    feat = ad.reshape(feat, (r, n, feat.shape[-1]))
    out, weights, t_final = composite(depths, dens, feat, background, far)
    return RayBatchResult(out, dens, depths, weights, t_final)


def render_rays(origins, dirs, near, far, field_fn: FieldFn, background, uc, uf) -> RayBatchResult:
    depths = plan_depths(origins, dirs, near, far, field_fn, uc, uf)
    return render_with_depths(origins, dirs, depths, far, field_fn, background)
