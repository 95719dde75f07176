import numpy as np
import pytest

from gridsdf.geometry import Camera, Intrinsics, Pose, SceneBounds
from gridsdf.ingest.synthetic import (NoiseConfig, Primitive, SyntheticScene, degrade_priors, project_sparse_depths,
                                      sample_sparse_points, sphere_box_scene_dict, synth_render)
from gridsdf.losses import solve_scale_shift

K = Intrinsics(40.0, 40.0, 16.5, 16.5, 33, 33)  # pixel (16, 16) is the principal ray


def _scene(prims, bounds=((-4, -4, -1), (4, 4, 8))):
    return SyntheticScene(prims, np.array([0.0, 0.0, -1.0]), SceneBounds(*bounds), K, [Pose.identity()], [0], [])


def _sphere(center=(0, 0, 3), radius=1.0):
    return Primitive("sphere", {"center": center, "radius": radius}, (1, 1, 1))


def test_on_axis_sphere_depth_and_normal():
    sc = _scene([_sphere()])
    v = synth_render(sc, sc.cameras()[0])
    assert v.valid[16, 16]
    assert abs(v.depth[16, 16] - 2.0) < 1e-5
    np.testing.assert_allclose(v.normal[16, 16], [0, 0, -1], atol=1e-5)
    # color = albedo * max(0, n . light) + ambient, clipped
    assert v.color[16, 16].tolist() == pytest.approx([1.0, 1.0, 1.0])


def test_miss_is_invalid():
    sc = _scene([_sphere(center=(0, 0, 3), radius=0.2)])
    v = synth_render(sc, sc.cameras()[0])
    assert not v.valid[0, 0]
    assert v.depth[0, 0] == 0.0 and v.color[0, 0].tolist() == [0, 0, 0]


def test_fronto_parallel_plane_closed_form():
    sc = _scene([Primitive("plane", {"normal": (0, 0, -1), "offset": -4.0}, (0.5, 0.5, 0.5))])
    v = synth_render(sc, sc.cameras()[0])
    assert v.valid.all()
    rows, cols = np.mgrid[0:33, 0:33]
    x = (cols + 0.5 - K.cx) / K.fx
    y = (rows + 0.5 - K.cy) / K.fy
    expect = 4.0 * np.sqrt(1 + x * x + y * y)
    np.testing.assert_allclose(v.depth, expect, atol=1e-6, rtol=0)
    assert v.depth[16, 16] == pytest.approx(4.0, abs=1e-12)
    np.testing.assert_allclose(v.zdepth, 4.0, atol=1e-6)


def test_lone_sphere_matches_quadratic_formula(rng):
    center, radius = np.array([0.3, -0.2, 5.0]), 1.3
    sc = _scene([_sphere(center, radius)])
    from gridsdf.ingest.synthetic import sphere_trace
    from gridsdf.geometry import clip_to_box
    n = 10_000
    o = rng.uniform(-0.5, 0.5, (n, 3)) + np.array([0, 0, 0.5])
    target = center + rng.normal(0, 0.5, (n, 3))
    d = target - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    near, far = clip_to_box(o, d, sc.bounds)
    t, hit = sphere_trace(sc.sdf, o, d, near, far, grad=sc.gradient)
    oc = o - center
    b = np.sum(oc * d, 1)
    disc = b * b - (np.sum(oc * oc, 1) - radius ** 2)
    exact_hit = disc > 1e-9
    np.testing.assert_array_equal(hit[disc > 1e-3], True)
    ok = hit & exact_hit
    t_exact = -b[ok] - np.sqrt(disc[ok])
    assert np.max(np.abs(t[ok] - t_exact)) < 1e-5
    assert ok.sum() > 5000


def test_camera_inside_solid_rejected():
    sc = _scene([_sphere(center=(0, 0, 0), radius=1.0)])
    with pytest.raises(ValueError, match="inside"):
        synth_render(sc, sc.cameras()[0])


def test_union_is_one_lipschitz(rng):
    sc = SyntheticScene.from_dict(sphere_box_scene_dict())
    a = rng.uniform(-1.5, 1.5, (5000, 3))
    b = a + rng.normal(0, 0.3, a.shape)
    lhs = np.abs(sc.sdf(a) - sc.sdf(b))
    assert np.all(lhs <= np.linalg.norm(a - b, axis=1) + 1e-12)
    g = sc.gradient(a)
    np.testing.assert_allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-12)


def test_box_sdf_exact_values():
    box = Primitive("box", {"center": (0, 0, 0), "half_size": (1, 2, 3)}, (1, 1, 1))
    np.testing.assert_allclose(box.sdf(np.array([[2.0, 0, 0], [0, 0, 0], [2, 3, 0]])), [1.0, -1.0, np.sqrt(2)])


def test_scene_parsing_errors():
    d = sphere_box_scene_dict()
    d["typo"] = 1
    with pytest.raises(ValueError, match="typo"):
        SyntheticScene.from_dict(d)
    d = sphere_box_scene_dict()
    d["primitives"][0]["type"] = "torus"
    with pytest.raises(ValueError, match="torus"):
        SyntheticScene.from_dict(d)
    d = sphere_box_scene_dict()
    d["test"] = [99]
    with pytest.raises(ValueError, match="99"):
        SyntheticScene.from_dict(d)


@pytest.fixture(scope="module")
def default_views():
    sc = SyntheticScene.from_dict(sphere_box_scene_dict())
    cams = [sc.cameras()[i] for i in sc.train]
    return sc, cams, [synth_render(sc, c) for c in cams]


def test_sparse_points_and_projection_match_oracle(default_views):
    sc, cams, views = default_views
    cloud = sample_sparse_points(views, 200, seed=0)
    assert len(cloud) == 200
    assert all(p.error == 0.0 for p in cloud.points)
    per_image = project_sparse_depths(cloud, cams)
    assert all(len(s) > 0 for s in per_image)
    for v, s in zip(views, per_image):
        r, c = s[:, 0].astype(int), s[:, 1].astype(int)
        assert v.valid[r, c].all()
        np.testing.assert_allclose(v.zdepth[r, c], s[:, 2], atol=1e-4)
    again = sample_sparse_points(views, 200, seed=0)
    np.testing.assert_array_equal(cloud.xyz, again.xyz)


def test_noiseless_priors_recover_affine_exactly(default_views):
    sc, cams, views = default_views
    noise = NoiseConfig(2.0, 0.5, 0.0, 0.0)
    per_image = project_sparse_depths(sample_sparse_points(views, 200, 0), cams)
    for k, (v, s) in enumerate(zip(views, per_image)):
        p = degrade_priors(v.zdepth, v.normal_cam, v.valid, noise, k)
        np.testing.assert_array_equal(p.normal, v.normal_cam)
        r, c = s[:, 0].astype(int), s[:, 1].astype(int)
        ss = solve_scale_shift(p.depth[r, c], s[:, 2])
        assert abs(ss.w - 2.0) < 1e-9 and abs(ss.b - 0.5) < 1e-9
        assert np.max(np.abs(ss.w * p.depth[r, c] + ss.b - s[:, 2])) < 1e-9


def test_normal_noise_rotates_and_keeps_unit_norm(default_views):
    _, _, views = default_views
    v = views[0]
    p = degrade_priors(v.zdepth, v.normal_cam, v.valid, NoiseConfig(2, 0.5, 0.0, 0.1), 3)
    m = v.valid
    np.testing.assert_allclose(np.linalg.norm(p.normal[m], axis=1), 1.0, atol=1e-12)
    cos = np.sum(p.normal[m] * v.normal_cam[m], 1)
    # Rodrigues: cos(delta) = cos(theta) + (1 - cos(theta)) (a.n)^2 with E[(a.n)^2] = 1/3
    # and E[cos(theta)] = exp(-sigma^2 / 2) for theta ~ N(0, sigma^2)
    expect = 1 / 3 + 2 / 3 * np.exp(-0.1 ** 2 / 2)
    assert 1 - cos.mean() == pytest.approx(1 - expect, rel=0.05)


def test_noisy_depth_fit_follows_errors_in_variables_prediction(default_views):
    """Multiplicative noise on the regressor attenuates the slope by var(d) / (var(d) + sigma^2 E[d^2])."""
    _, cams, views = default_views
    sigma = 0.05
    noise = NoiseConfig(2.0, 0.5, sigma, 0.0)
    per_image = project_sparse_depths(sample_sparse_points(views, 200, 0), cams)
    ws, bs, pred_w, pred_b = [], [], [], []
    for seed in range(100):
        k = seed % len(views)
        v, s = views[k], per_image[k]
        r, c = s[:, 0].astype(int), s[:, 1].astype(int)
        p = degrade_priors(v.zdepth, v.normal_cam, v.valid, noise, seed)
        ss = solve_scale_shift(p.depth[r, c], s[:, 2])
        ws.append(ss.w)
        bs.append(ss.b)
        d0 = (s[:, 2] - 0.5) / 2.0
        lam = d0.var() / (d0.var() + sigma ** 2 * np.mean(d0 ** 2))
        pred_w.append(2.0 * lam)
        pred_b.append(0.5 + (2.0 - 2.0 * lam) * d0.mean())
    assert np.mean(ws) == pytest.approx(np.mean(pred_w), rel=0.02)
    assert np.mean(bs) == pytest.approx(np.mean(pred_b), rel=0.05)
