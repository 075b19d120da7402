import numpy as np
import pytest

from affectsynth.geometry import axis_angle_rotation
from affectsynth.morphable import (LinearModel, ModelError, MorphableModel, UnimputableError, ZeroVarianceError,
                                   build_pca_model, impute_missing, procrustes_normalise)


@pytest.fixture
def samples():
    rng = np.random.default_rng(0)
    return rng.normal(size=(10, 3)) @ rng.normal(size=(3, 24)) + rng.normal(size=24)


def test_basis_orthonormal_and_sorted(samples):
    m = build_pca_model(samples, 1.0)
    assert m.n_components == 3
    assert np.allclose(m.basis.T @ m.basis, np.eye(3), atol=1e-12)
    assert np.all(np.diff(m.eigenvalues) <= 0)


def test_first_entry_sign_rule(samples):
    m = build_pca_model(samples, 1.0)
    for k in range(m.n_components):
        col = m.basis[:, k]
        assert col[np.flatnonzero(np.abs(col) > 1e-10 * np.abs(col).max())[0]] > 0


def test_training_samples_reconstruct_exactly(samples):
    m = build_pca_model(samples, 1.0)
    for x in samples:
        assert np.allclose(m.reconstruct(x), x, atol=1e-10)
    p = m.project(samples[0])
    assert np.allclose(m.instance(p), samples[0])


def test_coefficient_variance_equals_eigenvalues(samples):
    m = build_pca_model(samples, 1.0)
    P = np.array([m.project(x) for x in samples])
    assert np.allclose(P.var(axis=0, ddof=1), m.eigenvalues)


def test_component_override(samples):
    assert build_pca_model(samples, n_components=2).n_components == 2
    assert build_pca_model(samples, n_components=50).n_components == 3


@pytest.mark.parametrize("bad", [np.zeros((1, 4)), np.ones((3, 4))])
def test_degenerate_training_sets(bad):
    with pytest.raises(ModelError):
        build_pca_model(bad)


def test_identical_samples_are_zero_variance():
    with pytest.raises(ZeroVarianceError):
        build_pca_model(np.ones((3, 4)))


def test_variance_fraction_validated(samples):
    with pytest.raises(ModelError):
        build_pca_model(samples, 0.0)


def test_instance_length_checked(samples):
    m = build_pca_model(samples)
    with pytest.raises(ModelError):
        m.instance(np.zeros(m.n_components + 1))
    with pytest.raises(ModelError):
        m.project(np.zeros(5))


def test_save_load_round_trip(tmp_path, samples):
    m = build_pca_model(samples, 0.9, kind="texture", topology="abc")
    for name in ("m.bin", "m.json"):
        m.save(tmp_path / name)
        back = LinearModel.load(tmp_path / name)
        assert np.array_equal(back.basis, m.basis)
        assert np.array_equal(back.eigenvalues, m.eigenvalues)
        assert back.kind == "texture" and back.topology == "abc"


def test_morphable_model_round_trip(tmp_path, small_model):
    small_model.save(tmp_path / "mm.bin")
    back = MorphableModel.load(tmp_path / "mm.bin")
    assert np.array_equal(back.shape.basis, small_model.shape.basis)
    assert np.array_equal(back.triangles, small_model.triangles)
    assert np.array_equal(back.landmark_vertex_map, small_model.landmark_vertex_map)


def test_truncate(samples):
    m = build_pca_model(samples, 1.0).truncate(2)
    assert m.n_components == 2 and len(m.eigenvalues) == 2


def test_impute_recovers_low_rank(samples):
    rng = np.random.default_rng(5)
    missing = rng.uniform(size=samples.shape) < 0.1
    filled, info = impute_missing(np.where(missing, 0.0, samples), missing, rank=3, tol=1e-12, max_iter=2000)
    assert np.allclose(filled, samples, atol=1e-4)
    assert np.array_equal(filled[~missing], samples[~missing])


def test_impute_nothing_missing(samples):
    out, info = impute_missing(samples, np.zeros(samples.shape, bool))
    assert np.array_equal(out, samples) and info["iterations"] == 0


def test_impute_unrecoverable_column(samples):
    missing = np.zeros(samples.shape, bool)
    missing[:, 3] = True
    with pytest.raises(UnimputableError):
        impute_missing(samples, missing)


def test_procrustes_normalise_removes_similarity():
    rng = np.random.default_rng(3)
    base = rng.normal(size=(15, 3))
    shapes = [base + 0.01 * rng.normal(size=base.shape) for _ in range(4)]
    moved = list(shapes)
    moved[2] = 1.7 * shapes[2] @ axis_angle_rotation([1, 0, 0], 0.4).T + 2.0
    a = procrustes_normalise(shapes)
    b = procrustes_normalise(moved)
    # the per-shape similarity is gone; only the common frame may differ
    assert np.allclose(a[2] - a[0], b[2] - b[0], atol=1e-2)
    assert a.shape == (4, 45)
