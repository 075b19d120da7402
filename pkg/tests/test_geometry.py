import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affectsynth.geometry import (BehindCameraError, CameraParams, DegenerateGeometryError, GeometryError,
                                  InvalidParameterError, Landmarks2D, TriMesh, axis_angle_rotation,
                                  generalized_procrustes, project, project_with_jacobians,
                                  quaternion_rotation, quaternion_rotation_derivatives, rotation_to_quaternion,
                                  similarity_align, topology_hash, vertex_normals)

unit = st.floats(-0.55, 0.55, allow_nan=False)


@given(unit, unit, unit)
def test_rotation_is_orthonormal(a, b, c):
    R = quaternion_rotation((a, b, c))
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


@given(unit, unit, unit)
def test_quaternion_round_trip(a, b, c):
    q = np.array([a, b, c])
    assert np.allclose(rotation_to_quaternion(quaternion_rotation(q)), q, atol=1e-10)


def test_rotation_derivatives_match_finite_differences():
    q = np.array([0.1, -0.2, 0.3])
    dR = quaternion_rotation_derivatives(q)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (quaternion_rotation(q + e) - quaternion_rotation(q - e)) / (2 * h)
        assert np.allclose(dR[i], fd, atol=1e-8)


def test_rotation_derivative_undefined_at_boundary():
    with pytest.raises(InvalidParameterError):
        quaternion_rotation_derivatives((1.0, 0.0, 0.0))


def test_projection_jacobians():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(7, 3))
    cam = CameraParams(500.0, (0.05, -0.1, 0.02), (0.1, -0.2, 9.0), (63.5, 47.5))
    uv, d_cam, d_vert = project_with_jacobians(X, cam)
    assert np.allclose(uv, project(X, cam))
    c = cam.to_vector()
    for k in range(7):
        h = 1e-6 * max(1.0, abs(c[k]))
        cp, cm = c.copy(), c.copy()
        cp[k] += h
        cm[k] -= h
        fd = (project(X, CameraParams.from_vector(cp, cam.principal_point))
              - project(X, CameraParams.from_vector(cm, cam.principal_point))) / (2 * h)
        assert np.allclose(d_cam[:, :, k], fd, rtol=1e-5, atol=1e-5)
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1e-6
        fd = (project(X + e, cam) - project(X - e, cam)) / 2e-6
        assert np.allclose(d_vert[:, :, j], fd, rtol=1e-5, atol=1e-5)


def test_principal_point_and_axes():
    cam = CameraParams(100.0, (0, 0, 0), (0, 0, 5.0), (10.0, 20.0))
    uv = project(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float), cam)
    assert np.allclose(uv, [[10, 20], [30, 20], [10, 40]])   # x right, y down


def test_behind_camera_reports_vertex():
    cam = CameraParams(100.0, (0, 0, 0), (0, 0, 1.0))
    with pytest.raises(BehindCameraError) as err:
        project(np.array([[0, 0, 0], [0, 0, -2.0]]), cam)
    assert err.value.vertex == 1


@pytest.mark.parametrize("kwargs", [dict(f=0.0, q=(0, 0, 0), t=(0, 0, 1)),
                                    dict(f=1.0, q=(0.9, 0.9, 0), t=(0, 0, 1)),
                                    dict(f=1.0, q=(0, 0), t=(0, 0, 1))])
def test_camera_validation(kwargs):
    with pytest.raises(InvalidParameterError):
        CameraParams(**kwargs)


def test_camera_dict_round_trip():
    cam = CameraParams(321.0, (0.1, 0.2, -0.1), (1, 2, 3), (5, 6))
    assert CameraParams.from_dict(cam.to_dict()) == cam


def test_similarity_align_recovers_transform():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(30, 3))
    R = axis_angle_rotation([1, 2, 3], 0.7)
    dst = 2.5 * src @ R.T + np.array([1, -2, 0.5])
    s, R2, t = similarity_align(src, dst)
    assert s == pytest.approx(2.5)
    assert np.allclose(R2, R)
    assert np.allclose(t, [1, -2, 0.5])


def test_similarity_align_degenerate():
    with pytest.raises(DegenerateGeometryError):
        similarity_align(np.ones((4, 3)), np.zeros((4, 3)))


def test_procrustes_invariance():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(20, 3))
    shapes = [base + 0.05 * rng.normal(size=base.shape) for _ in range(5)]
    aligned, mean = generalized_procrustes(shapes)
    R = axis_angle_rotation([0, 1, 1], 1.1)
    moved = [3.0 * s @ R.T + 7.0 for s in shapes]
    aligned2, mean2 = generalized_procrustes(moved)
    assert np.allclose(mean, mean2, atol=1e-8)
    for a, b in zip(aligned, aligned2):
        assert np.allclose(a, b, atol=1e-8)
    assert np.linalg.norm(mean) == pytest.approx(1.0)
    assert np.allclose(mean.mean(0), 0, atol=1e-12)


def test_procrustes_rejects_mismatched_topology():
    with pytest.raises(GeometryError):
        generalized_procrustes([np.zeros((3, 3)), np.zeros((4, 3))])


def test_trimesh_validation():
    with pytest.raises(GeometryError):
        TriMesh(np.array([[0, 0, np.nan]]), np.zeros((0, 3)))
    with pytest.raises(GeometryError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
    m = TriMesh(np.eye(3), np.array([[0, 1, 2]]))
    assert m.vertices.flags.writeable is False
    assert m.topology_hash() == topology_hash(np.array([[0, 1, 2]]), 3)
    assert topology_hash(np.array([[0, 2, 1]]), 3) != m.topology_hash()


def test_landmarks_need_68_points():
    with pytest.raises(GeometryError):
        Landmarks2D(np.zeros((67, 2)), np.arange(67))
    lm = Landmarks2D(np.zeros((68, 2)), np.arange(68))
    with pytest.raises(GeometryError):
        lm.validate(50)


def test_vertex_normals_face_camera():
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    n = vertex_normals(V, np.array([[0, 1, 2]]))
    assert np.allclose(np.abs(n[:, 2]), 1.0)


@settings(max_examples=30)
@given(st.floats(0.1, 3.0), st.floats(-3, 3))
def test_axis_angle(angle, z):
    R = axis_angle_rotation([0, 0, 1], angle)
    p = R @ np.array([1.0, 0.0, z])
    assert p[2] == pytest.approx(z)
    assert np.arctan2(p[1], p[0]) == pytest.approx(angle)
