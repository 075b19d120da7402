import numpy as np
import pytest

from affectsynth import testbed as tb
from affectsynth.fitting import (FitConfig, FitDegenerateError, FitError, FittingResult, bilinear_sample,
                                 feature_image, fit_3dmm, fit_cost_terms, initial_camera, sample_texture,
                                 visibility)
from affectsynth.geometry import CameraParams, GeometryError, Landmarks2D, TriMesh


@pytest.fixture(scope="module")
def scene(model):
    face = tb.make_face(1003)
    p = model.shape.project(face.vertices.ravel())
    lam = model.texture.project(face.per_vertex_color.ravel())
    mesh = TriMesh(model.shape.instance(p).reshape(-1, 3), model.triangles,
                   np.clip(model.texture.instance(lam).reshape(-1, 3), 0, 1))
    cam = tb.default_camera(yaw_deg=6, pitch_deg=-3)
    return mesh, cam, tb.render_face(mesh, cam), tb.ground_truth_landmarks(mesh, cam), p


@pytest.mark.parametrize("kw", [dict(c_l=-1), dict(max_iters=0), dict(feature_scale=0), dict(feature_fn="hog")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        FitConfig(**kw)


def test_config_from_dict_ignores_unknown_keys():
    cfg = FitConfig.from_dict({"c_l": 5.0, "bogus": 1})
    assert cfg.c_l == 5.0


def test_bilinear_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(9, 11, 2))
    uv = rng.uniform(1, 8, (20, 2))
    _, grad = bilinear_sample(img, uv, with_gradient=True)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (bilinear_sample(img, uv + e) - bilinear_sample(img, uv - e)) / (2 * h)
        assert np.allclose(grad[:, :, k], fd, atol=1e-6)


def test_bilinear_hits_pixel_centres():
    img = np.arange(12, dtype=float).reshape(3, 4, 1)
    assert bilinear_sample(img, np.array([[2.0, 1.0], [3.0, 2.0]]))[:, 0].tolist() == [6.0, 11.0]


def test_gradient_features_have_six_channels():
    img = np.zeros((5, 5, 3))
    img[:, :, 0] = np.arange(5)
    f = feature_image(img, "image-gradient")
    assert f.shape == (5, 5, 6) and np.allclose(f[:, :, 0], 1.0) and np.allclose(f[:, :, 3], 0.0)


def test_visibility_excludes_back_of_head(model, scene):
    mesh, cam, *_ = scene
    vis = visibility(mesh.vertices, mesh.triangles, cam, 256, 256)
    z = mesh.vertices @ cam.rotation.T
    assert vis.any()
    assert not vis[z[:, 2] > 0.5].any()          # the far side faces away from the camera


def test_sample_texture_recovers_colours(model, scene):
    mesh, cam, image, *_ = scene
    colors, vis = sample_texture(image, mesh.vertices, cam, mesh.triangles, model.texture)
    err = np.abs(colors[vis] - mesh.per_vertex_color[vis])
    assert np.sqrt(np.mean(err ** 2)) < 2 / 255
    assert colors.shape == mesh.vertices.shape


def test_initial_camera_is_close(model, scene):
    mesh, cam, image, lm, _ = scene
    cam0 = initial_camera(model, lm, 256, 256, focal=cam.f)
    assert abs(cam0.t[2] - cam.t[2]) / cam.t[2] < 0.15


def test_fit_from_truth_keeps_landmarks(model, scene):
    mesh, cam, image, lm, p = scene
    res = fit_3dmm(image, lm, model, FitConfig(), init=(p, cam))
    assert np.all(np.diff(res.cost_trace) <= 0)
    assert res.landmark_rms < 1.0
    assert res.converged


def test_fit_with_heavier_pixel_term(model, scene):
    mesh, cam, image, lm, p = scene
    res = fit_3dmm(image, lm, model, FitConfig(feature_scale=1e5), init=(p, cam))
    assert res.landmark_rms < 1.0
    assert res.pixel_rms < 3 / 255


def test_default_initialisation(model, scene):
    mesh, cam, image, lm, _ = scene
    res = fit_3dmm(image, lm, model, FitConfig(init_focal=cam.f))
    assert np.all(np.diff(res.cost_trace) <= 0)
    assert res.landmark_rms < 2.0


def test_fix_focal_keeps_focal(model, scene):
    mesh, cam, image, lm, p = scene
    res = fit_3dmm(image, lm, model, FitConfig(fix_focal=True, max_iters=10), init=(p, cam))
    assert res.camera.f == cam.f


def test_cost_terms_are_reported(model, scene):
    mesh, cam, image, lm, p = scene
    cfg = FitConfig(max_iters=5)
    res = fit_3dmm(image, lm, model, cfg, init=(p, cam))
    terms = fit_cost_terms(res, image, lm, model, cfg)
    assert set(terms) == {"pixel", "landmark", "shape_reg", "texture_reg"}
    assert all(v >= 0 for v in terms.values())


def test_result_json_round_trip(model, scene):
    mesh, cam, image, lm, p = scene
    res = fit_3dmm(image, lm, model, FitConfig(max_iters=3), init=(p, cam))
    import json
    back = FittingResult.from_dict(json.loads(res.to_json()))
    assert np.array_equal(back.p, res.p) and back.camera == res.camera
    assert back.cost_trace == res.cost_trace


def test_fit_errors(model, scene):
    mesh, cam, image, lm, p = scene
    with pytest.raises(FitError):
        fit_3dmm(np.zeros((4, 4)), lm, model)
    with pytest.raises(FitError):
        fit_3dmm(image, lm, model, FitConfig(feature_fn="image-gradient"))
    with pytest.raises(GeometryError):
        fit_3dmm(image, Landmarks2D(lm.points, np.full(68, 10 ** 6)), model)
    behind = CameraParams(cam.f, cam.q, (0, 0, -20.0), cam.principal_point)
    with pytest.raises(FitDegenerateError):
        fit_3dmm(image, lm, model, init=(p, behind))
    off = CameraParams(cam.f, cam.q, (500.0, 0, 8.0), cam.principal_point)
    with pytest.raises(FitDegenerateError):
        fit_3dmm(image, lm, model, init=(p, off))
