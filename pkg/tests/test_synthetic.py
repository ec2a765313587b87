import json
import os

import numpy as np
import pytest

from dgns.datasets import DatasetError, load_dataset
from dgns.meshing import load_obj
from dgns.synthetic import (SCENE_NAMES, SyntheticScene, camera_from_c2w,
                            circle_camera_pose, generate_synthetic,
                            render_analytic)


def test_unknown_scene_lists_valid_names():
    with pytest.raises(ValueError) as e:
        SyntheticScene("flying-teapot")
    for name in SCENE_NAMES:
        assert name in str(e.value)


def test_translating_sphere_is_exact_sdf():
    scene = SyntheticScene("translating-sphere")
    rng = np.random.default_rng(0)
    p = rng.uniform(-1, 1, size=(100, 3))
    for t in (0.0, 0.5, 1.0):
        c = scene.center(t)
        np.testing.assert_allclose(scene.sdf(p, t),
                                   np.linalg.norm(p - c, axis=-1) - 0.5,
                                   atol=1e-12)


def test_motion_scale_zero_freezes_scene():
    scene = SyntheticScene("translating-sphere", motion_scale=0.0)
    p = np.random.default_rng(1).uniform(-1, 1, (50, 3))
    np.testing.assert_array_equal(scene.sdf(p, 0.0), scene.sdf(p, 1.0))


def test_morph_endpoint_is_sphere():
    scene = SyntheticScene("torus-to-sphere-morph")
    p = np.random.default_rng(2).uniform(-1, 1, (100, 3))
    np.testing.assert_allclose(scene.sdf(p, 1.0),
                               np.linalg.norm(p, axis=-1) - 0.4, atol=1e-12)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "sphere"
    generate_synthetic("translating-sphere", n_frames=4, width=40, height=40,
                       out_dir=str(out), gt_mesh_resolution=48)
    return str(out)


def test_generate_structural_contract(tiny_dataset):
    for sub, n in (("images", 4), ("normals", 4), ("gt_meshes", 4)):
        files = os.listdir(os.path.join(tiny_dataset, sub))
        assert len(files) == n, sub
    manifest = json.loads(open(os.path.join(tiny_dataset,
                                            "transforms.json")).read())
    assert len(manifest["frames"]) == 4
    assert "camera_angle_x" in manifest and "aabb" in manifest
    times = [f["time"] for f in manifest["frames"]]
    assert times == sorted(times) and times[0] == 0.0 and times[-1] == 1.0


def test_silhouette_center_projects_to_known_point(tiny_dataset):
    """Frame 0 of the translating sphere: the sphere center projected with
    the frame camera must land inside the rendered silhouette, close to its
    centroid (analytic projection oracle)."""
    ds = load_dataset(tiny_dataset)
    fr = ds.frames[0]
    scene = SyntheticScene("translating-sphere")
    c = scene.center(0.0)
    cam = fr.camera
    pc = cam.rotation @ c + cam.translation
    px = np.array([pc[0] / pc[2] * cam.fx + cam.cx,
                   pc[1] / pc[2] * cam.fy + cam.cy])
    mask = fr.image.sum(axis=2) > 0.01
    jj, ii = np.nonzero(mask)
    centroid = np.array([ii.mean() + 0.5, jj.mean() + 0.5])
    assert np.linalg.norm(px - centroid) < 1.5  # pixels


def test_morph_final_mesh_euler_two(tmp_path):
    out = tmp_path / "morph"
    generate_synthetic("torus-to-sphere-morph", n_frames=2, width=24,
                       height=24, out_dir=str(out), gt_mesh_resolution=64)
    final = load_obj(str(out / "gt_meshes" / "frame_001.obj"))
    assert final.euler_characteristic() == 2
    first = load_obj(str(out / "gt_meshes" / "frame_000.obj"))
    assert first.euler_characteristic() == 0  # torus at t=0


def test_normal_maps_unit_and_camera_facing(tiny_dataset):
    ds = load_dataset(tiny_dataset)
    fr = ds.frames[1]
    assert fr.normal is not None
    n = fr.normal[fr.normal_valid]
    norms = np.linalg.norm(n, axis=-1)
    assert np.all(np.abs(norms - 1.0) < 0.05)  # 8-bit quantization slack
    assert np.mean(n[:, 2] < 0) > 0.95  # facing the camera (+z forward)


def test_analytic_render_depth_consistency():
    """Sphere-traced hit mask matches the analytic silhouette."""
    scene = SyntheticScene("translating-sphere", motion_scale=0.0)
    c2w = circle_camera_pose(0, 8)
    cam = camera_from_c2w(c2w, fx=50.0, width=32, height=32)
    rgb, normals, hit = render_analytic(scene, cam, 0.0)
    # silhouette: rays whose closest approach to the origin is < 0.5
    o = cam.center
    ii, jj = np.meshgrid(np.arange(32), np.arange(32))
    d_cam = np.stack([(ii.ravel() + 0.5 - cam.cx) / cam.fx,
                      (jj.ravel() + 0.5 - cam.cy) / cam.fy,
                      np.ones(1024)], axis=-1)
    d = d_cam @ cam.rotation
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    tmin = -np.sum(o * d, axis=-1)
    closest = np.linalg.norm(o[None, :] + tmin[:, None] * d, axis=-1)
    analytic = (closest < 0.5).reshape(32, 32)
    agree = (analytic == hit).mean()
    assert agree > 0.98


# ---------------------------------------------------------------------------
# loader validation
# ---------------------------------------------------------------------------

def test_roundtrip_load(tiny_dataset):
    ds = load_dataset(tiny_dataset)
    assert len(ds) == 4
    assert ds.width == ds.height == 40
    assert all(f.gt_mesh_path is not None for f in ds.frames)
    np.testing.assert_allclose(ds.box_min, [-1.1, -1.1, -1.1])


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(str(tmp_path))


def _write_manifest(path, manifest):
    with open(os.path.join(path, "transforms.json"), "w") as fh:
        json.dump(manifest, fh)


def test_missing_time_field_names_frame(tiny_dataset, tmp_path):
    src = json.loads(open(os.path.join(tiny_dataset, "transforms.json")).read())
    del src["frames"][2]["time"]
    bad = tmp_path / "bad"
    bad.mkdir()
    os.symlink(os.path.join(tiny_dataset, "images"), str(bad / "images"))
    _write_manifest(str(bad), src)
    with pytest.raises(DatasetError, match="frame 2.*'time'"):
        load_dataset(str(bad))


def test_non_monotone_timestamps_rejected(tiny_dataset, tmp_path):
    src = json.loads(open(os.path.join(tiny_dataset, "transforms.json")).read())
    src["frames"][1]["time"] = 0.9
    bad = tmp_path / "bad2"
    bad.mkdir()
    os.symlink(os.path.join(tiny_dataset, "images"), str(bad / "images"))
    _write_manifest(str(bad), src)
    with pytest.raises(DatasetError, match="strictly"):
        load_dataset(str(bad))


def test_missing_image_named(tiny_dataset, tmp_path):
    src = json.loads(open(os.path.join(tiny_dataset, "transforms.json")).read())
    src["frames"][0]["file_path"] = "./images/nonexistent"
    bad = tmp_path / "bad3"
    bad.mkdir()
    _write_manifest(str(bad), src)
    with pytest.raises(DatasetError, match="nonexistent"):
        load_dataset(str(bad))
