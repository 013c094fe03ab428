"""Run configuration: a flat JSON document with documented defaults.

Unknown keys are rejected so typos fail loudly.  ``profile`` selects a block
of size defaults (toy or paper scale); explicit keys override the profile.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

SCHEMA_VERSION = 1

PROFILES = {
    "toy": {"point_count": 642, "triplane_res": 64, "render_h": 32, "render_w": 32},
    "paper": {"point_count": 5023, "triplane_res": 256, "render_h": 128, "render_w": 128},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    schema_version: int = SCHEMA_VERSION
    profile: str = "toy"
    seed: int = 0
    steps: int = 2000
    lr: float = 1e-4
    lambda_r: float = 1.0
    lambda_p: float = 0.1
    lambda_n: float = 1e-4
    knn_k: int = 8
    pef_bands: int = 6
    pef_radius_cap: float | None = None
    use_pef: bool = True
    point_count: int = 642
    point_subsample: int | None = None
    n_coarse: int = 48
    n_fine: int = 48
    n_slots: int = 2
    p_two: float = 0.7
    channels: int = 32
    triplane_res: int = 64
    plane_init_scale: float = 0.05
    plane_gain: float = 1.0
    point_gain: float = 1.0
    render_h: int = 32
    render_w: int = 32
    upsample: int = 4
    scene_bound: float = 0.5
    patch: int = 8
    eval_every: int = 250
    threads: int | None = None

    def validate(self) -> "Config":
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg} (got {getattr(self, key)!r})")

        need(self.schema_version == SCHEMA_VERSION, "schema_version", f"expected {SCHEMA_VERSION}")
        need(self.profile in PROFILES, "profile", f"expected one of {sorted(PROFILES)}")
        need(self.steps >= 0, "steps", "must be >= 0")
        need(self.lr > 0, "lr", "must be > 0")
        for key in ("lambda_r", "lambda_p", "lambda_n"):
            need(getattr(self, key) >= 0, key, "must be >= 0")
        need(self.knn_k >= 1, "knn_k", "must be >= 1")
        need(self.knn_k <= (self.point_subsample or self.point_count), "knn_k", "exceeds point count")
        need(self.pef_bands >= 0, "pef_bands", "must be >= 0")
        need(self.pef_radius_cap is None or self.pef_radius_cap > 0, "pef_radius_cap", "must be > 0 or null")
        need(self.n_coarse >= 2, "n_coarse", "must be >= 2")
        need(self.n_fine >= 0, "n_fine", "must be >= 0")
        need(self.n_slots >= 1, "n_slots", "must be >= 1")
        need(0.0 <= self.p_two <= 1.0, "p_two", "must lie in [0, 1]")
        need(self.channels >= 4, "channels", "must be >= 4")
        need(self.triplane_res >= 2, "triplane_res", "must be >= 2")
        need(self.plane_init_scale >= 0, "plane_init_scale", "must be >= 0")
        need(self.plane_gain > 0, "plane_gain", "must be > 0")
        need(self.point_gain > 0, "point_gain", "must be > 0")
        need(self.upsample >= 1, "upsample", "must be >= 1")
        need(self.render_h >= 1 and self.render_w >= 1, "render_h", "image must be at least 1x1")
        need(self.scene_bound > 0, "scene_bound", "must be > 0")
        need(self.patch >= 1 and self.render_h % self.patch == 0 and self.render_w % self.patch == 0,
             "patch", "must divide the render size")
        need(self.eval_every >= 0, "eval_every", "must be >= 0")
        need(self.threads is None or self.threads >= 1, "threads", "must be >= 1 or null")
        need(self.point_subsample is None or 1 <= self.point_subsample <= self.point_count,
             "point_subsample", "must lie in [1, point_count]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


KEYS = {f.name for f in fields(Config)}
_OPTIONAL = {"pef_radius_cap", "point_subsample", "threads"}


def _check_type(key: str, val):
    if val is None and key in _OPTIONAL:
        return
    default = getattr(Config(), key)
    if key in _OPTIONAL:
        default = 0.0 if key == "pef_radius_cap" else 0
    if isinstance(default, bool):
        ok = isinstance(val, bool)
    elif isinstance(default, int):
        ok = isinstance(val, int) and not isinstance(val, bool)
    elif isinstance(default, float):
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
    else:
        ok = isinstance(val, type(default))
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {type(val).__name__}")


def config_from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - KEYS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config key")
    profile = data.get("profile", "toy")
    if profile not in PROFILES:
        raise ConfigError(f"profile: expected one of {sorted(PROFILES)} (got {profile!r})")
    for key, val in data.items():
        _check_type(key, val)
    merged = {**PROFILES[profile], **data}
    return replace(Config(), **merged).validate()


def load_config(path=None) -> Config:
    if path is None:
        return Config().validate()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at char {exc.pos}: {exc.msg}") from None
    return config_from_dict(data)
