import json

import numpy as np
import pytest

from avatarfield.flame import FlameParams, evaluate_point_model, load_point_model, make_toy_asset
from avatarfield.ppm import read_ppm
from avatarfield.render import orbit_camera
from avatarfield.scene import (HOLDOUT_VIEWS, TRAIN_VIEWS, AnalyticScene, analytic_eval, build_scene,
                               expression_set, load_manifest, march, oracle_depths, render_oracle_image,
                               synthesize_dataset)


@pytest.fixture(scope="module")
def asset():
    return make_toy_asset(0, P=200)


@pytest.fixture(scope="module")
def scene(asset):
    return build_scene(asset)


def test_density_peaks_on_shell(scene):
    dens, _ = analytic_eval(scene, np.array([[0.35, 0, 0], [0, 0, 0], [0.5, 0.5, 0.5]]), np.zeros(scene.ne))
    assert dens[0] == scene.peak
    assert dens[1] < 1e-6 and dens[2] < 1e-6


def test_bump_follows_its_vertex(asset, scene):
    for expr in expression_set(scene):
        fp = FlameParams.zeros(asset)
        fp.expression = np.asarray(expr)
        vertex = evaluate_point_model(asset, fp)[scene.bump_vertex]
        assert np.abs(scene.bump_center(expr) - vertex).max() < 1e-15


def test_bump_vertex_faces_the_camera(asset, scene):
    t = asset.template[scene.bump_vertex]
    assert t[2] / np.linalg.norm(t) > 0.8


def test_expression_set_moves_only_bump_column(scene):
    rest, plus, minus = (np.array(e) for e in expression_set(scene))
    assert not rest.any()
    assert plus[scene.bump_column] == 3.0 and minus[scene.bump_column] == -3.0
    assert np.count_nonzero(plus) == 1


def test_march_homogeneous_closed_form():
    depths = oracle_depths(0.0, 1.0, 512)
    rgb = np.ones((512, 3))
    out = march(np.full(512, 2.0), rgb, depths, 1.0, [0.0, 0.0, 0.0])
    # midpoints put the first sample at half a bin, so the last interval is half a bin too
    assert abs(out[0] - (1 - np.exp(-2.0 * (1 - 0.5 / 512)))) < 1e-12


def test_oracle_depths_are_bin_midpoints():
    assert np.allclose(oracle_depths(1.0, 2.0, 4), [1.125, 1.375, 1.625, 1.875], atol=1e-15)


def test_empty_rays_see_background(scene):
    cam = orbit_camera(0.0, 0.0, 8)
    img = render_oracle_image(scene, cam, np.zeros(scene.ne), 8, 8, n_samples=256)
    assert np.allclose(img[0, 0], scene.background, atol=1e-6)
    assert np.abs(img[4, 4] - np.asarray(scene.background)).max() > 0.01


def test_too_few_samples_rejected(scene):
    with pytest.raises(ValueError):
        render_oracle_image(scene, orbit_camera(0, 0, 4), np.zeros(scene.ne), 4, 4, n_samples=64)


def test_scene_json_round_trip(scene):
    assert AnalyticScene.from_json(scene.to_json()) == scene


def test_view_sets():
    assert len(TRAIN_VIEWS) == 8 and len(HOLDOUT_VIEWS) == 3
    assert TRAIN_VIEWS[0] == (-70.0, 12.0) and TRAIN_VIEWS[-1] == (70.0, -12.0)
    assert not set(TRAIN_VIEWS) & set(HOLDOUT_VIEWS)


def test_small_dataset(tmp_path):
    manifest = synthesize_dataset(tmp_path, seed=1, point_count=60, low_res=4, n_samples=256)
    assert len(manifest["items"]) == (8 + 3) * 3
    loaded = load_manifest(tmp_path / "manifest.json")
    assert loaded["root"] == str(tmp_path)
    assert json.loads((tmp_path / "manifest.json").read_text())["items"] == manifest["items"]
    first = manifest["items"][0]
    assert read_ppm(tmp_path / first["file"]).shape == (16, 16, 3)
    assert load_point_model(tmp_path / "asset.bin").point_count == 60
    again = synthesize_dataset(tmp_path / "again", seed=1, point_count=60, low_res=4, n_samples=256)
    assert (tmp_path / first["file"]).read_bytes() == (tmp_path / "again" / first["file"]).read_bytes()
    assert again["items"] == manifest["items"]
