import json

import numpy as np
import pytest

from kalmanfield.scenes import (
    AnalyticScene,
    Blob,
    DatasetError,
    SceneConfig,
    composite_rgba,
    load_analytic_scene,
    load_dataset,
    load_split,
    look_at,
    render_analytic,
    write_split,
)


def test_generated_scene_layout(small_scene):
    out, train, test, scene = small_scene
    assert len(train) == 8 and len(test) == 2
    np.testing.assert_allclose(sorted(set(train.times)), np.linspace(0, 1, 4))
    assert set(test.times) <= set(train.times)
    assert train.frames[0].image.shape == (16, 16, 3)
    assert load_analytic_scene(out) == scene


def test_round_trip_is_lossless(small_scene, tmp_path):
    out, train, test, _ = small_scene
    loaded_train, loaded_test = load_dataset(out)
    for a, b in zip(train.frames, loaded_train.frames):
        np.testing.assert_array_equal(a.rgba, b.rgba)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.pose, b.pose)
        assert a.time == b.time
    write_split(loaded_test, tmp_path, "test")
    again = load_split(tmp_path, "test")
    np.testing.assert_array_equal(again.frames[0].rgba, test.frames[0].rgba)
    assert again.camera_angle_x == test.camera_angle_x


def test_loader_sorts_by_time(small_scene, tmp_path):
    out, *_ = small_scene
    meta = json.loads((out / "transforms_train.json").read_text())
    meta["frames"].reverse()
    for fr in meta["frames"]:
        fr["file_path"] = str((out / fr["file_path"]).resolve())
    (tmp_path / "transforms_train.json").write_text(json.dumps(meta))
    ds = load_split(tmp_path, "train")
    assert np.all(np.diff(ds.times) >= 0)


@pytest.mark.parametrize(
    "mutate,needle",
    [
        (lambda m: m.pop("camera_angle_x"), "camera_angle_x"),
        (lambda m: m["frames"][0].pop("time"), "time"),
        (lambda m: m["frames"][0].update(time=1.5), "time"),
        (lambda m: m["frames"][0].update(transform_matrix=[[1, 0], [0, 1]]), "transform_matrix"),
        (lambda m: m["frames"][0].update(file_path="./nope"), "not found"),
    ],
)
def test_loader_errors_name_the_field(small_scene, tmp_path, mutate, needle):
    out, *_ = small_scene
    meta = json.loads((out / "transforms_train.json").read_text())
    for fr in meta["frames"]:
        fr["file_path"] = str((out / fr["file_path"]).resolve())
    mutate(meta)
    (tmp_path / "transforms_train.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match=needle):
        load_split(tmp_path, "train")


def test_loader_missing_and_invalid_files(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_split(tmp_path, "train")
    (tmp_path / "transforms_train.json").write_text("{not json")
    with pytest.raises(DatasetError, match="invalid JSON"):
        load_split(tmp_path, "train")


def test_composite_rgba():
    rgba = np.array([[[255, 0, 0, 0], [255, 0, 0, 255]]], dtype=np.uint8)
    np.testing.assert_allclose(composite_rgba(rgba, (0.0, 0.5, 1.0)), [[[0, 0.5, 1], [1, 0, 0]]])


@pytest.mark.parametrize("motion", ["translate", "rotate", "sine"])
def test_analytic_motion_consistency(motion, rng):
    scene = AnalyticScene([Blob((0.2, 0.1, 0.0), 0.3, 10.0, (0.5, 0.5, 0.5))], motion)
    x = rng.uniform(-1, 1, (20, 3))
    np.testing.assert_allclose(scene.deformation(x, 0.0), 0.0, atol=1e-15)
    t = 0.37
    np.testing.assert_allclose(
        scene.density(x, t), scene.canonical_density(x + scene.deformation(x, t))
    )
    if motion == "translate":
        np.testing.assert_allclose(scene.deformation(x, t), np.broadcast_to([-0.8 * t, 0, 0], x.shape))
    assert AnalyticScene.from_dict(scene.to_dict()) == scene


def test_analytic_render_matches_gaussian_line_integral():
    # an axis-aligned ray through the blob centre: optical depth = peak * r * sqrt(2 pi)
    peak, r = 2.0, 0.2
    scene = AnalyticScene([Blob((0.0, 0.0, 0.0), r, peak, (0.3, 0.6, 0.9))], color_variation=0.0)
    pose = look_at((4.0, 0.0, 0.0))
    # in a 2x2 image pixel (1, 1) looks straight down the optical axis
    img, alpha = render_analytic(scene, pose, 0.0, 0.5, 2, 2, 2.0, 6.0, 4096, (1, 1, 1))
    expect = 1 - np.exp(-peak * r * np.sqrt(2 * np.pi))
    assert alpha[1, 1] == pytest.approx(expect, abs=1e-6)
    np.testing.assert_allclose(img[1, 1], expect * np.array([0.3, 0.6, 0.9]) + (1 - expect), atol=1e-6)


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(n_frames=2)
    with pytest.raises(ValueError):
        AnalyticScene([], "spin")
