import numpy as np
import pytest

from affectsynth import testbed as tb
from affectsynth.correspondence import (SingularSystemError, cylinder_frame, cylindrical_uv, mesh_edges,
                                        nicp_register, tps_apply, tps_fit)
from affectsynth.geometry import DegenerateGeometryError, TriMesh


def test_cylindrical_uv_on_a_cylinder():
    theta = np.linspace(-np.pi + 0.1, np.pi - 0.1, 12)
    h = np.array([0.0, 1.0, 2.0])
    T, H = np.meshgrid(theta, h)
    V = np.column_stack([np.sin(T.ravel()), H.ravel(), np.cos(T.ravel())])
    uv = cylindrical_uv(V)
    assert np.all((uv >= 0) & (uv <= 1))
    assert np.allclose(np.sort(np.unique(np.round(uv[:, 1], 12))), [0, 0.5, 1])
    # azimuth grows monotonically with the angle around the axis
    u = uv[:12, 0] if np.allclose(uv[:12, 1], uv[0, 1]) else uv[::3, 0]
    assert np.all(np.diff(u) > 0) or np.all(np.diff(u) < 0)


def test_cylinder_frame_axis_is_vertical_for_faces():
    c, F = cylinder_frame(tb.make_face(1))
    assert abs(F[1, 1]) > 0.9 and F[1, 1] > 0
    assert np.allclose(F @ F.T, np.eye(3), atol=1e-12)


def test_cylindrical_uv_degenerate():
    with pytest.raises(DegenerateGeometryError):
        cylindrical_uv(np.zeros((5, 3)))


def test_tps_errors():
    with pytest.raises(SingularSystemError):
        tps_fit([[0, 0], [1, 1]], [[0, 0], [1, 1]])
    with pytest.raises(SingularSystemError):
        tps_fit([[0, 0], [1, 1], [0, 0], [2, 0]], np.zeros((4, 2)))
    with pytest.raises(SingularSystemError):
        tps_fit([[0, 0], [1, 1], [2, 2], [3, 3]], np.zeros((4, 2)))


def test_tps_smooth_between_controls():
    rng = np.random.default_rng(0)
    src = rng.uniform(-1, 1, (8, 2))
    warp = tps_fit(src, src + 0.01 * rng.normal(size=src.shape))
    q = rng.uniform(-1, 1, (50, 2))
    assert np.abs(tps_apply(warp, q) - q).max() < 0.1


def test_mesh_edges_unique():
    e = mesh_edges(np.array([[0, 1, 2], [2, 1, 3]]))
    assert e.tolist() == [[0, 1], [0, 2], [1, 2], [1, 3], [2, 3]]


def test_nicp_fixed_point():
    src = tb.make_face(2)
    out, rep = nicp_register(src, src, (10.0, 1.0), inner_iters=2)
    assert np.abs(out.vertices - src.vertices).max() < 1e-9 * src.bbox_diagonal()
    assert rep.iterations == 4 and rep.to_dict()["iterations"] == 4


def test_nicp_bump_with_landmarks():
    src = tb.make_face(4)
    V = src.vertices
    c = V[tb.landmark_indices()[30]]
    bump = 0.15 * np.exp(-((V - c) ** 2).sum(1) / (2 * 0.15 ** 2))
    tgt = TriMesh(V + bump[:, None] * np.array([0, 0, -1.0]), src.triangles)
    pairs = [(int(i), tgt.vertices[i]) for i in tb.landmark_indices()]
    out, rep = nicp_register(src, tgt, landmark_pairs=pairs)
    assert rep.mean_distance < 0.01 * src.bbox_diagonal()
    assert rep.max_distance < 0.05 * src.bbox_diagonal()


def test_nicp_rejects_disconnected_source():
    V = np.vstack([np.eye(3), np.eye(3) + 5])
    mesh = TriMesh(V, np.array([[0, 1, 2], [3, 4, 5]]))
    with pytest.raises(SingularSystemError, match="2 connected components"):
        nicp_register(mesh, V)


@pytest.mark.parametrize("sched", [(), (1.0, 2.0), (1.0, -1.0)])
def test_nicp_schedule_validation(sched):
    with pytest.raises(ValueError):
        nicp_register(tb.make_face(1), tb.make_face(1), sched)
