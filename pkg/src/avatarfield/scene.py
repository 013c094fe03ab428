"""Analytic expression-driven radiance field used as ground truth.

Density is a Gaussian shell around the origin.  Colour is a smooth sinusoidal
field plus a Gaussian bump centred on one vertex of the toy point model, so the
bump moves exactly as that vertex moves with the expression coefficients.
Rendering uses dense uniform ray marching with its own survival-product
compositing, independent of the engine renderer.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .flame import PointModelAsset, make_toy_asset, save_point_model
from .ppm import write_ppm
from .render import Camera, generate_rays, orbit_camera
from .tensorio import atomic_write_bytes


@dataclass
class AnalyticScene:
    bump_anchor: list            # rest position of the bump vertex (3,)
    bump_basis: list             # that vertex's expression-basis rows (3, Ne)
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float = 0.35
    thickness: float = 0.05
    peak: float = 40.0
    base_offset: float = 0.5
    base_amplitude: float = 0.2
    base_freqs: list = field(default_factory=lambda: [[4.0, 2.0, 1.0], [-1.5, 4.5, 1.0], [1.0, -2.0, 4.0]])
    base_phases: list = field(default_factory=lambda: [0.3, 1.7, -0.9])
    bump_sigma: float = 0.07
    bump_color: list = field(default_factory=lambda: [0.28, -0.18, -0.15])
    background: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    asset_seed: int = 0
    bump_vertex: int = 0
    bump_column: int = 0

    @property
    def ne(self) -> int:
        return len(self.bump_basis[0])

    def bump_center(self, expr) -> np.ndarray:
        return np.asarray(self.bump_anchor) + np.asarray(self.bump_basis) @ np.asarray(expr, dtype=np.float64)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AnalyticScene":
        return cls(**json.loads(text))


def build_scene(asset: PointModelAsset, asset_seed: int = 0) -> AnalyticScene:
    """Bump on the front-facing vertex with the largest single expression displacement."""
    t = asset.template
    front = t[:, 2] / np.linalg.norm(t, axis=1) > 0.8
    disp = np.linalg.norm(asset.expr_basis, axis=1)          # (P, Ne)
    disp[~front] = -1.0
    k, j = np.unravel_index(np.argmax(disp), disp.shape)
    return AnalyticScene(bump_anchor=t[k].tolist(), bump_basis=asset.expr_basis[k].tolist(),
                         asset_seed=asset_seed, bump_vertex=int(k), bump_column=int(j))


def analytic_eval(scene: AnalyticScene, x, expr) -> tuple[np.ndarray, np.ndarray]:
    """(density (...), rgb (..., 3)) at positions ``x`` (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x - np.asarray(scene.center), axis=-1)
    density = scene.peak * np.exp(-((r - scene.radius) / scene.thickness) ** 2)
    base = scene.base_offset + scene.base_amplitude * np.sin(x @ np.asarray(scene.base_freqs).T
                                                             + np.asarray(scene.base_phases))
    q = scene.bump_center(expr)
    bump = np.exp(-np.sum((x - q) ** 2, axis=-1) / (2.0 * scene.bump_sigma ** 2))
    return density, base + bump[..., None] * np.asarray(scene.bump_color)


def oracle_depths(near: float, far: float, n: int) -> np.ndarray:
    """Uniform midpoints of n equal bins of [near, far]."""
    return near + (np.arange(n) + 0.5) * ((far - near) / n)


def march(density: np.ndarray, rgb: np.ndarray, depths: np.ndarray, far: float, background) -> np.ndarray:
    """Front-to-back compositing with an explicit survival product."""
    delta = np.append(np.diff(depths), far - depths[-1])
    alpha = 1.0 - np.exp(-density * delta)
    keep = np.cumprod(1.0 - alpha, axis=-1)
    before = np.concatenate([np.ones(keep.shape[:-1] + (1,)), keep[..., :-1]], axis=-1)
    out = np.einsum("...k,...kc->...c", before * alpha, rgb)
    return out + keep[..., -1:] * np.asarray(background)


def render_oracle_image(scene: AnalyticScene, camera: Camera, expr, h: int, w: int,
                        n_samples: int = 512, chunk: int = 2048) -> np.ndarray:
    if n_samples < 256:
        raise ValueError("oracle rendering needs at least 256 samples per ray")
    origins, dirs = generate_rays(camera, h, w)
    depths = oracle_depths(camera.near, camera.far, n_samples)
    out = np.empty((h * w, 3))
    for s in range(0, h * w, chunk):
        o, d = origins[s:s + chunk], dirs[s:s + chunk]
        pts = o[:, None, :] + depths[None, :, None] * d[:, None, :]
        dens, rgb = analytic_eval(scene, pts, expr)
        out[s:s + chunk] = march(dens, rgb, depths, camera.far, scene.background)
    return out.reshape(h, w, 3)


# ---------------------------------------------------------------- dataset

TRAIN_VIEWS = [(float(az), 12.0 if i % 2 == 0 else -12.0) for i, az in enumerate(np.linspace(-70, 70, 8))]
HOLDOUT_VIEWS = [(0.0, 0.0), (40.0, 5.0), (-40.0, -5.0)]


def expression_set(scene: AnalyticScene, amplitude: float = 3.0) -> list[list[float]]:
    rest = np.zeros(scene.ne)
    plus, minus = rest.copy(), rest.copy()
    plus[scene.bump_column] = amplitude
    minus[scene.bump_column] = -amplitude
    return [rest.tolist(), plus.tolist(), minus.tolist()]


def synthesize_dataset(out_dir, seed: int = 0, point_count: int = 642, low_res: int = 32, factor: int = 4,
                       n_samples: int = 512) -> dict:
    """Write asset, scene JSON, PPM targets and manifest.json; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    asset = make_toy_asset(seed, P=point_count)
    scene = build_scene(asset, asset_seed=seed)
    save_point_model(asset, out / "asset.bin")
    atomic_write_bytes(out / "scene.json", scene.to_json().encode("utf-8"))
    items = []
    for split, views in (("train", TRAIN_VIEWS), ("holdout", HOLDOUT_VIEWS)):
        for vi, (az, el) in enumerate(views):
            cam = orbit_camera(az, el, low_res)
            for ei, expr in enumerate(expression_set(scene)):
                name = f"{split}_v{vi}_e{ei}.ppm"
                img = render_oracle_image(scene, cam.scaled(factor), expr, low_res * factor,
                                          low_res * factor, n_samples)
                write_ppm(img, out / name)
                items.append({"split": split, "camera": cam.to_dict(), "expr": expr, "file": name})
    manifest = {"schema_version": 1, "asset": "asset.bin", "scene": "scene.json", "low_res": low_res,
                "factor": factor, "seed": seed, "items": items}
    atomic_write_bytes(out / "manifest.json", json.dumps(manifest, indent=2).encode("utf-8"))
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text())
    manifest["root"] = str(path.parent)
    return manifest
