import numpy as np
import pytest

from affectsynth import testbed as tb
from affectsynth.blendshape import (BlendshapeError, BlendshapeModel, build_blendshapes, difference_matrix,
                                    objective, project_column, reconstruct, sparsity)


@pytest.mark.parametrize("constraint", ["two-sided", "one-sided", "none"])
def test_project_column_is_idempotent(constraint):
    b = np.array([0.5, -2.0, 1.0])
    once = project_column(b, constraint)
    assert np.array_equal(project_column(once, constraint), once)


def test_project_column_values():
    assert project_column(np.array([0.5, -2.0, 1.0]), "two-sided").tolist() == [0.25, -1.0, 0.5]
    assert project_column(np.array([0.5, -2.0, 1.0]), "one-sided").tolist() == [0.5, 0.0, 1.0]
    assert project_column(np.array([-1.0, -2.0]), "one-sided").tolist() == [0.0, 0.0]


def test_rank_one_bump_is_recovered():
    bump = np.zeros(30)
    bump[10:15] = [0.2, 0.6, 1.0, 0.6, 0.2]
    D = np.outer(bump, [0.5, 1.0, 1.5])
    model, C = build_blendshapes(D, 1, sparsity_weight=0.01)
    assert np.allclose(model.components @ C, D, atol=1e-2)
    assert np.abs(model.components).max() == pytest.approx(1.0)
    b = model.components[:, 0]
    assert np.allclose(b * np.sign(b[12]), bump, atol=1e-2)      # two-sided: sign is free


def test_sparsity_grows_with_weight():
    rng = np.random.default_rng(0)
    D = rng.normal(size=(40, 12))
    s = [sparsity(build_blendshapes(D, 6, sparsity_weight=w)[1]) for w in (0.0, 5.0, 30.0)]
    assert s[0] <= s[1] <= s[2] and s[2] > s[0]


def test_one_sided_components_nonnegative():
    rng = np.random.default_rng(1)
    model, _ = build_blendshapes(rng.normal(size=(25, 8)), 3, constraint="one-sided")
    assert model.components.min() >= 0


def test_trace_matches_objective():
    rng = np.random.default_rng(2)
    D = rng.normal(size=(20, 6))
    model, C = build_blendshapes(D, 3, sparsity_weight=1.0)
    assert model.objective_trace[-1] == pytest.approx(objective(D, model.components, C, 1.0))


def test_locality_penalty_moves_deformation_away():
    rng = np.random.default_rng(3)
    D = rng.normal(size=(30, 10))
    rho = np.zeros(30)
    rho[:10] = 100.0
    free, _ = build_blendshapes(D, 3, sparsity_weight=0.5)
    local, _ = build_blendshapes(D, 3, sparsity_weight=0.5, locality=rho)
    assert np.abs(local.components[:10]).sum() < np.abs(free.components[:10]).sum()


def test_zero_differences():
    model, C = build_blendshapes(np.zeros((9, 4)), 2)
    assert not C.any() and model.objective_trace == (0.0,)


@pytest.mark.parametrize("kw", [dict(h=0), dict(h=5), dict(h=2, constraint="wide"),
                                dict(h=2, sparsity_weight=-1.0), dict(h=2, locality=-np.ones(8))])
def test_validation(kw):
    with pytest.raises(BlendshapeError):
        build_blendshapes(np.ones((8, 4)), **kw)


def test_save_load_and_reconstruct(tmp_path):
    rng = np.random.default_rng(4)
    D = rng.normal(size=(12, 5))
    model, C = build_blendshapes(D, 2, topology="t1")
    model.save(tmp_path / "b.bin")
    back = BlendshapeModel.load(tmp_path / "b.bin")
    assert np.array_equal(back.components, model.components) and back.topology == "t1"
    neutral = rng.normal(size=12)
    assert np.allclose(reconstruct(back, C[:, 0], neutral), neutral + model.components @ C[:, 0])
    with pytest.raises(BlendshapeError):
        reconstruct(back, np.zeros(3), neutral)


def test_testbed_differences():
    ident = tb.make_face(1)
    joy = tb.make_face(1, tb.BASIC_EXPRESSIONS["joy"])
    D = difference_matrix([joy.vertices], [ident.vertices])
    assert D.shape == (3 * ident.n_vertices, 1)
    assert np.allclose(D[:, 0], tb.expression_deformation(tb.BASIC_EXPRESSIONS["joy"]).ravel())
