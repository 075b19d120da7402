import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affectsynth import _pykernels, kernels

BACKENDS = kernels.backends()


def test_backend_selected():
    assert kernels.BACKEND in BACKENDS
    assert "python" in BACKENDS


def test_pure_python_switch():
    env = dict(os.environ, AFFECTSYNTH_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import affectsynth.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.booleans())
def test_rasterizer_backends_bitwise_equal(seed, cull):
    rng = np.random.default_rng(seed)
    n = 12
    xy = rng.uniform(-3, 23, (n, 2))
    xy[: n // 2] = np.rint(xy[: n // 2])
    z = rng.uniform(0.5, 3, n)
    tris = rng.integers(0, n, (15, 3))
    outs = [BACKENDS[name].rasterize_triangles(xy, z, tris, 20, 18, cull) for name in ("python", "cython")]
    for a, b in zip(*outs):
        assert np.array_equal(a, b)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 15))
def test_ward_backends_bitwise_equal(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.integers(-3, 4, (15, 2)).astype(float)      # many exact ties
    m1, h1 = BACKENDS["python"].ward_merges(X, k)
    m2, h2 = BACKENDS["cython"].ward_merges(X, k)
    assert np.array_equal(m1, m2)
    assert np.array_equal(h1, h2)


@pytest.fixture(params=sorted(BACKENDS))
def mod(request):
    return BACKENDS[request.param]


def test_perspective_correct_weights(mod):
    # vertices on the 1/256 grid so snapping is exact
    f = 50.0
    V = np.array([[-1.0, -1.0, 2.0], [3.0, -1.0, 8.0], [-1.0, 2.0, 4.0]])
    xy = f * V[:, :2] / V[:, 2:3] + 10
    xy = np.rint(xy * 256) / 256
    V[:, :2] = (xy - 10) * V[:, 2:3] / f
    tri_id, bary, zbuf = mod.rasterize_triangles(xy, V[:, 2], np.array([[0, 2, 1]]), 40, 40, False)
    ys, xs = np.nonzero(tri_id == 0)
    assert len(ys) > 20
    P = bary[ys, xs] @ V[[0, 2, 1]]               # weights follow the triangle corner order
    assert np.allclose(f * P[:, 0] / P[:, 2] + 10, xs, atol=1e-9)
    assert np.allclose(f * P[:, 1] / P[:, 2] + 10, ys, atol=1e-9)
    assert np.allclose(zbuf[ys, xs], P[:, 2])
    assert np.allclose(bary.sum(-1)[ys, xs], 1.0)


def test_first_drawn_wins_ties(mod):
    xy = np.array([[1.0, 1.0], [9.0, 1.0], [1.0, 9.0]])
    tri_id, _, _ = mod.rasterize_triangles(xy, np.ones(3), np.array([[0, 2, 1], [0, 2, 1]]), 10, 10, False)
    assert set(np.unique(tri_id)) == {-1, 0}


def test_nearer_triangle_wins(mod):
    xy = np.array([[1.0, 1.0], [9.0, 1.0], [1.0, 9.0]] * 2)
    z = np.array([5.0, 5, 5, 2, 2, 2])
    tri_id, _, zbuf = mod.rasterize_triangles(xy, z, np.array([[0, 2, 1], [3, 5, 4]]), 10, 10, False)
    assert set(np.unique(tri_id)) == {-1, 1}
    assert np.all(zbuf[tri_id == 1] == 2.0)


def test_backface_culling(mod):
    xy = np.array([[1.0, 1.0], [9.0, 1.0], [1.0, 9.0]])
    # exactly one winding survives culling
    front, _, _ = mod.rasterize_triangles(xy, np.ones(3), np.array([[0, 1, 2]]), 10, 10, True)
    back, _, _ = mod.rasterize_triangles(xy, np.ones(3), np.array([[0, 2, 1]]), 10, 10, True)
    assert (front >= 0).sum() + (back >= 0).sum() > 0
    assert min((front >= 0).sum(), (back >= 0).sum()) == 0


def test_skips_invalid_vertices(mod):
    xy = np.array([[1.0, 1.0], [9.0, 1.0], [np.nan, 9.0], [1.0, 9.0]])
    z = np.array([1.0, 1.0, 1.0, -1.0])
    tri_id, _, _ = mod.rasterize_triangles(xy, z, np.array([[0, 1, 2], [0, 1, 3]]), 10, 10, False)
    assert np.all(tri_id == -1)


def test_ward_merge_heights_are_twice_ess_increase(mod):
    X = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]])
    merges, heights = mod.ward_merges(X, 1)
    assert merges.tolist() == [[0, 1], [0, 2]]
    # {0,1}: ESS 0.5 -> 2 * 0.5 = 1.  then {0,1,2}: ESS increase 2/3 * 4.5^2
    assert np.allclose(heights, [1.0, 2 * (2 / 3) * 4.5 ** 2])


def test_ward_tie_rule(mod):
    X = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    merges, _ = mod.ward_merges(X, 2)
    assert merges.tolist() == [[0, 1], [2, 3]]


def test_subpixel_constant():
    assert _pykernels.SUBPIXEL == 256
