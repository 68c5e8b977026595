import dataclasses
import hashlib
import json
import math

import numpy as np
import pytest

from nerfcl.errors import ConfigError, DatasetError
from nerfcl.render import CameraParams, look_at_pose
from nerfcl.scenes import (CameraLayout, ChangeSet, Primitive, SceneSpec, Transient, appearance_only_scene,
                           default_scene, generate_dataset, load_dataset, load_scene_spec,
                           make_transient_masks, oracle_opacity, oracle_render, oracle_samples)

from conftest import tiny_scene


def _front_camera(size=32, focal=45.0, dist=3.0):
    return CameraParams(look_at_pose([0.0, 0.0, dist]), focal, focal, (size - 1) / 2, (size - 1) / 2,
                        size, size)


def _dir_hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


# reference renderer

def test_empty_scene_is_background():
    spec = SceneSpec([], [ChangeSet()], background=(0.2, 0.4, 0.6))
    img = oracle_render(spec, 0, _front_camera(8), 256)
    assert np.allclose(img, [0.2, 0.4, 0.6], atol=1e-12)


def test_opaque_sphere_pixel_takes_sphere_color():
    ball = Primitive(0, "sphere", (0, 0, 0), 0.5, (0.9, 0.3, 0.1), 1e4)
    spec = SceneSpec([ball], [ChangeSet()], background=(0.0, 0.0, 1.0))
    img = oracle_render(spec, 0, _front_camera(9), 256)
    assert np.allclose(img[4, 4], [0.9, 0.3, 0.1], atol=1e-9)


def test_sample_count_convergence():
    spec = tiny_scene()
    cam = _front_camera(16, 22.5, 3.2)
    rng = np.random.default_rng(0)
    rows, cols = rng.integers(0, 16, 10), rng.integers(0, 16, 10)

    def pixels(n):
        from nerfcl.scenes import _weights_by_product
        _, deltas, sigma, color = oracle_samples(spec, 0, cam, n, rows + 0.0, cols + 0.0)
        w, _ = _weights_by_product(sigma, deltas)
        return (w[..., None] * color).sum(axis=1)

    assert np.max(np.abs(pixels(256) - pixels(512))) < 1e-3


def test_reference_renderer_needs_enough_samples():
    with pytest.raises(ValueError):
        oracle_render(tiny_scene(), 0, _front_camera(8), 64)


def test_appearance_change_keeps_geometry():
    spec = appearance_only_scene()
    cam = _front_camera(16, 22.5, 3.2)
    base = oracle_opacity(spec, 0, cam)
    for t in (1, 2):
        assert np.array_equal(oracle_opacity(spec, t, cam), base)
    assert not np.array_equal(oracle_render(spec, 1, cam), oracle_render(spec, 0, cam))


def test_color_multiplier_clamps():
    prim = Primitive(0, "sphere", (0, 0, 0), 0.3, (0.8, 0.5, 0.5), 40.0)
    spec = SceneSpec([prim], [ChangeSet(), ChangeSet(appearance={0: (3.0, 1.0, 1.0)})])
    from nerfcl.scenes import primitives_at
    assert primitives_at(spec, 1)[0].color[0] == 1.0


# scene validation

def test_zero_timesteps_rejected():
    with pytest.raises(ConfigError):
        SceneSpec([], [])


def test_primitive_outside_box_rejected():
    with pytest.raises(ConfigError, match="primitives\\[0\\]"):
        SceneSpec([Primitive(0, "sphere", (2.0, 0, 0), 0.1, (1, 1, 1), 1.0)], [ChangeSet()])


def test_negative_density_rejected():
    with pytest.raises(ConfigError):
        Primitive(0, "sphere", (0, 0, 0), 0.1, (1, 1, 1), -1.0)


def test_unknown_primitive_reference_rejected():
    with pytest.raises(ConfigError, match="unknown primitive id 9"):
        SceneSpec([], [ChangeSet(remove=[9])])


def test_spec_file_round_trip(tmp_path):
    spec = default_scene()
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(spec.to_dict(), indent=1))
    assert load_scene_spec(path).to_dict() == spec.to_dict()


def test_spec_syntax_error_names_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "primitives": [],\n  "timesteps": [{}],,\n}')
    with pytest.raises(ConfigError, match=r"bad\.json:3:"):
        load_scene_spec(path)


def test_missing_spec_file(tmp_path):
    with pytest.raises(DatasetError, match="nope.json"):
        load_scene_spec(tmp_path / "nope.json")


# transient masks

def test_no_transients_gives_empty_mask():
    spec = default_scene()
    mask = make_transient_masks(spec, 0, _front_camera(8))
    assert mask.shape == (8, 8) and not mask.any()


def test_centered_transient_mask_matches_projected_disc():
    r, dist, focal, size = 0.4, 3.0, 60.0, 48
    ball = Primitive(100, "sphere", (0, 0, 0), r, (1, 1, 1), 40.0)
    spec = SceneSpec([], [ChangeSet()], transients=[Transient(0, ball, np.zeros(3), np.zeros(3))])
    mask = make_transient_masks(spec, 0, _front_camera(size, focal, dist))
    assert set(np.unique(mask)) <= {0, 1}
    measured = math.sqrt(mask.sum() / math.pi)
    expected = focal * math.tan(math.asin(r / dist))
    assert abs(measured - expected) <= 1.0


def test_masks_are_binary():
    spec = default_scene()
    cam = CameraParams(look_at_pose([0.0, 0.5, 2.5], (0.0, -0.55, 0.65)), 30.0, 30.0, 11.5, 11.5, 24, 24,
                       timestep=1)
    mask = make_transient_masks(spec, 1, cam)
    assert mask.any() and set(np.unique(mask)) <= {0, 1}


# dataset generation and loading

def test_split_counts(tiny_dataset):
    n = sum(len(ts.images) for ts in tiny_dataset.timesteps)
    tests = [im for im in tiny_dataset.all_images() if im.split == "test"]
    assert n == 24 and len(tests) == 3
    assert [im.image_id for im in tests] == [7, 15, 23]


def test_tiny_scene_still_has_a_test_view(tmp_path):
    spec = dataclasses.replace(tiny_scene(), timesteps=[ChangeSet()], transients=[])
    generate_dataset(spec, 3, 0, tmp_path)
    ds = load_dataset(tmp_path)
    assert [im.image_id for im in ds.all_images() if im.split == "test"] == [2]


def test_too_few_cameras_rejected(tmp_path):
    with pytest.raises(ConfigError):
        generate_dataset(tiny_scene(), 1, 0, tmp_path)


def test_generation_is_deterministic(tmp_path):
    spec = dataclasses.replace(tiny_scene(), cameras=CameraLayout(width=12, height=12, focal=17.0))
    generate_dataset(spec, 3, 5, tmp_path / "a")
    generate_dataset(spec, 3, 5, tmp_path / "b")
    assert _dir_hashes(tmp_path / "a") == _dir_hashes(tmp_path / "b")


def test_lighting_change_shows_in_pixels(tmp_path):
    prim = Primitive(0, "sphere", (0, 0, 0), 0.5, (0.4, 0.3, 0.3), 40.0)
    spec = SceneSpec([prim], [ChangeSet(), ChangeSet(appearance={0: (2.0, 1.0, 1.0)})],
                     cameras=CameraLayout(width=16, height=16, focal=22.5, arcs=[[0, 90], [0, 90]]))
    generate_dataset(spec, 4, 0, tmp_path)
    ds = load_dataset(tmp_path)
    red = []
    for t in (0, 1):
        vals = [im.pixels[..., 0][oracle_opacity(spec, t, im.camera) > 0.5] for im in ds.timesteps[t].images]
        red.append(np.concatenate(vals).mean())
    assert red[1] > red[0]


def test_load_round_trips_cameras_and_pixels(tiny_dataset, tiny_dataset_dir):
    from nerfcl.scenes import orbit_cameras
    spec = tiny_scene()
    for t, ts in enumerate(tiny_dataset.timesteps):
        again = orbit_cameras(spec, t, 8, 8 * t, 0)
        for im, cam in zip(ts.images, again):
            assert im.camera.to_dict() == cam.to_dict()
    im = tiny_dataset.timesteps[0].images[0]
    truth = oracle_render(spec, 0, im.camera, 256, frame=0.5 / 8)
    assert np.max(np.abs(im.pixels - truth)) <= 0.5 / 255 + 1e-12


def test_masks_match_image_size(tiny_dataset):
    for im in tiny_dataset.all_images():
        assert im.mask.shape == im.pixels.shape[:2]
        if im.split == "test":
            assert not im.mask.any()


def test_corrupt_camera_names_image(tiny_dataset_dir, tmp_path):
    import shutil
    root = tmp_path / "copy"
    shutil.copytree(tiny_dataset_dir, root)
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["timesteps"][1]["images"][2]["camera"]["fx"] = -5.0
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="image 10"):
        load_dataset(root)


def test_zero_timestep_manifest_rejected(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format_version": "1.0", "timesteps": []}))
    with pytest.raises(DatasetError, match="zero timesteps"):
        load_dataset(tmp_path)


def test_unknown_major_version_rejected(tiny_dataset_dir, tmp_path):
    import shutil
    root = tmp_path / "copy"
    shutil.copytree(tiny_dataset_dir, root)
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["format_version"] = "2.0"
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="version"):
        load_dataset(root)


def test_missing_image_file_rejected(tiny_dataset_dir, tmp_path):
    import shutil
    root = tmp_path / "copy"
    shutil.copytree(tiny_dataset_dir, root)
    (root / "t0" / "img_3.png").unlink()
    with pytest.raises(DatasetError, match="image 3"):
        load_dataset(root)


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(DatasetError):
        generate_dataset(tiny_scene(), 2, 0, blocker / "sub")
