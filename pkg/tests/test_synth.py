import json

import numpy as np
import pytest

from voxsdf import sampler as smp
from voxsdf.synth import (PRESETS, AnalyticScene, Box, Sphere, Torus, Union, analytic_sdf, gen_dataset, gt_render,
                          load_dataset, load_scene, make_cameras, sphere_scene)


def test_analytic_sdf_examples():
    s = sphere_scene(0.5)
    assert analytic_sdf(s, np.array([[1.0, 0, 0]]))[0] == pytest.approx(0.5)
    assert analytic_sdf(s, np.zeros((1, 3)))[0] == pytest.approx(-0.5)
    a, b = Sphere((-0.3, 0, 0), 0.2), Sphere((0.4, 0.1, 0), 0.3)
    u = AnalyticScene(Union(a, b))
    p = np.random.default_rng(0).uniform(-1, 1, (200, 3))
    assert np.array_equal(analytic_sdf(u, p), np.minimum(a.sdf(p), b.sdf(p)))


def test_primitive_distances():
    box = Box(half=(0.3, 0.2, 0.1))
    assert box.sdf(np.array([[1.0, 0, 0]]))[0] == pytest.approx(0.7)
    assert box.sdf(np.zeros((1, 3)))[0] == pytest.approx(-0.1)
    assert box.sdf(np.array([[0.4, 0.3, 0.1]]))[0] == pytest.approx(np.hypot(0.1, 0.1))
    tor = Torus(major=0.4, minor=0.1)
    assert tor.sdf(np.array([[0.4, 0, 0]]))[0] == pytest.approx(-0.1)
    assert tor.sdf(np.zeros((1, 3)))[0] == pytest.approx(0.3)


def test_exact_primitives_are_1_lipschitz():
    rng = np.random.default_rng(1)
    p, q = rng.uniform(-1, 1, (2, 2000, 3))
    dist = np.linalg.norm(p - q, axis=1)
    for prim in (Sphere(), Torus(), Box()):
        assert np.all(np.abs(prim.sdf(p) - prim.sdf(q)) <= dist + 1e-12)


def test_load_scene_presets_and_dict():
    assert set(PRESETS) >= {"sphere", "two_spheres", "torus", "csg"}
    sc = load_scene({"root": {"type": "union", "a": {"type": "sphere", "radius": 0.2},
                              "b": {"type": "box", "center": [0.5, 0, 0]}}})
    assert sc.sdf(np.zeros((1, 3)))[0] == pytest.approx(-0.2)
    assert load_scene("sphere").sdf(np.zeros((1, 3)))[0] == pytest.approx(-0.5)


def test_make_cameras_single():
    (cam,) = make_cameras(1, 3.0)
    assert np.allclose(cam.center, [0, 0, 3.0])
    assert np.allclose(cam.rotation[:, 2], [0, 0, -1])


def test_make_cameras_geometry():
    target = np.array([0.1, -0.2, 0.3])
    cams = make_cameras(24, 2.0, target, width=32, height=24)
    for c in cams:
        R = c.rotation
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12) and np.linalg.det(R) == pytest.approx(1.0)
        assert np.linalg.norm(c.center - target) == pytest.approx(2.0)
        assert c.center[2] >= target[2] - 1e-12
        ray = smp.generate_rays(c, [[c.cx, c.cy]])
        v = target - ray.origins[0]
        off = np.linalg.norm(v - (v @ ray.dirs[0]) * ray.dirs[0])
        assert off < 1e-6
    with pytest.raises(ValueError):
        make_cameras(0, 2.0)


def test_gt_render_center_depth():
    scene = sphere_scene(0.5)
    cam = smp.Camera(40, 40, 16.5, 16.5, 33, 33, make_cameras(1, 2.0)[0].pose)
    rgb, depth = gt_render(scene, cam)
    assert depth[16, 16] == pytest.approx(1.5, abs=1e-4)
    assert depth[0, 0] == 0.0 and np.all(rgb[0, 0] == scene.background)
    assert np.all((rgb >= 0) & (rgb <= 1))


def test_gt_depth_consistent_with_sdf():
    scene = AnalyticScene(Union(Sphere((-0.3, 0, 0), 0.3), Torus((0.3, 0, 0))))
    cam = make_cameras(3, 2.0, width=24, height=24)[1]
    _, depth = gt_render(scene, cam)
    rays = smp.generate_rays(cam, smp.pixel_centers(24, 24))
    t = depth.ravel()
    hit = t > 0
    assert hit.sum() > 20
    p = rays.origins[hit] + t[hit, None] * rays.dirs[hit]
    assert np.all(np.abs(scene.sdf(p)) < 1e-4)


def test_sphere_depth_matches_closed_form():
    cam = make_cameras(5, 2.0, width=20, height=20)[3]
    _, depth = gt_render(sphere_scene(0.5), cam)
    rays = smp.generate_rays(cam, smp.pixel_centers(20, 20))
    b = np.einsum("ij,ij->i", rays.origins, rays.dirs)
    disc = b * b - (np.einsum("ij,ij->i", rays.origins, rays.origins) - 0.25)
    t = np.where(disc > 0, -b - np.sqrt(np.maximum(disc, 0)), 0.0)
    clear = np.abs(disc) > 1e-3
    assert np.allclose(depth.ravel()[clear], t[clear], atol=1e-4)


def test_dataset_round_trip(tmp_path):
    ds = gen_dataset("sphere", 24, 64, 64, tmp_path / "a", seed=0)
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(man["views"]) == 24
    back = load_dataset(tmp_path / "a")
    assert len(back.cameras) == 24
    for c0, c1, i0, i1, d0, d1 in zip(ds.cameras, back.cameras, ds.images, back.images, ds.depths, back.depths):
        assert np.allclose(c0.pose, c1.pose, atol=1e-7)
        assert np.array_equal(i0, i1) and np.array_equal(d0, d1)
    assert np.array_equal(back.bounds[0], ds.bounds[0])


def test_dataset_regeneration_byte_identical(tmp_path):
    gen_dataset("two_spheres", 3, 16, 12, tmp_path / "a", seed=5)
    gen_dataset("two_spheres", 3, 16, 12, tmp_path / "b", seed=5)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 7
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    gen_dataset("two_spheres", 3, 16, 12, tmp_path / "c", seed=6)
    assert (tmp_path / "c" / "manifest.json").read_bytes() != (tmp_path / "a" / "manifest.json").read_bytes()


def test_dataset_size_mismatch_rejected(tmp_path):
    gen_dataset("sphere", 1, 8, 8, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["views"][0]["width"] = 9
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ValueError):
        load_dataset(tmp_path)
