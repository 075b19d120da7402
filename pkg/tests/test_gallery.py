import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affectsynth import io
from affectsynth import testbed as tb
from affectsynth.gallery import (AffectGallery, GalleryError, VAAnnotation, basic_expression_face, build_gallery,
                                 nearest_cluster, query_path, query_path_clusters, query_va,
                                 read_annotations_csv, read_labels_manifest, resample_path, ward_cluster,
                                 within_cluster_ss, write_annotations_csv)


def test_ward_labels_follow_first_member():
    X = np.array([[5.0, 5.0], [0.0, 0.0], [5.1, 5.0], [0.1, 0.0]])
    res = ward_cluster(X, 2)
    assert res.assignments.tolist() == [0, 1, 0, 1]
    assert np.allclose(res.centroids, [[5.05, 5.0], [0.05, 0.0]])


def test_ward_extremes():
    X = np.random.default_rng(0).normal(size=(6, 2))
    assert ward_cluster(X, 6).assignments.tolist() == list(range(6))
    one = ward_cluster(X, 1)
    assert set(one.assignments) == {0} and np.allclose(one.centroids[0], X.mean(0))
    with pytest.raises(GalleryError):
        ward_cluster(X, 7)
    with pytest.raises(GalleryError):
        ward_cluster(np.zeros((0, 2)), 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 6))
def test_ward_heights_nondecreasing(seed, k):
    X = np.random.default_rng(seed).normal(size=(14, 2))
    res = ward_cluster(X, k)
    assert np.all(np.diff(res.heights) >= -1e-12)


def test_ward_is_greedy_in_ess():
    X = np.random.default_rng(4).normal(size=(10, 2))
    res = ward_cluster(X, 3)
    # each merge increases the within-cluster sum of squares by half its height
    total = sum(res.heights) / 2
    assert within_cluster_ss(X, res.assignments) == pytest.approx(total)


def test_annotation_range():
    with pytest.raises(GalleryError):
        VAAnnotation(1.2, 0.0, "m")


@pytest.fixture(scope="module")
def small_gallery():
    ds = tb.make_dataset(3, 10, 5)
    basic = {lab: [ds.basic_meshes[m] for m in ids] for lab, ids in ds.basic_sets.items()}
    return ds, build_gallery(ds.annotations, ds.frames, ds.template(), 5, basic)


def test_gallery_contents(small_gallery):
    ds, gal = small_gallery
    assert gal.n_clusters == 5 and gal.counts.sum() == 30
    assert set(gal.assignments) == set(ds.frames)
    assert set(gal.basic) == set(tb.BASIC_EXPRESSIONS)
    assert np.allclose(basic_expression_face(gal, "joy"),
                       tb.expression_deformation(tb.BASIC_EXPRESSIONS["joy"]).ravel())


def test_gallery_is_order_independent(small_gallery):
    ds, gal = small_gallery
    again = build_gallery(list(reversed(ds.annotations)), ds.frames, ds.template(), 5)
    assert np.array_equal(again.deformations, gal.deformations)


def test_queries(small_gallery):
    _, gal = small_gallery
    for k, (v, a) in enumerate(gal.centroids):
        assert nearest_cluster(gal, v, a) == k
        assert np.array_equal(query_va(gal, v, a), gal.deformations[k])
    with pytest.raises(GalleryError):
        nearest_cluster(gal, 1.5, 0)
    with pytest.raises(GalleryError):
        basic_expression_face(AffectGallery(gal.centroids, gal.deformations, gal.template, gal.counts), "joy")


def test_nearest_cluster_tie_goes_to_lowest_index():
    gal = AffectGallery(np.array([[0.5, 0.0], [-0.5, 0.0]]), np.zeros((2, 3)), np.zeros(3), np.ones(2))
    assert nearest_cluster(gal, 0.0, 0.3) == 0


def test_path_queries(small_gallery):
    _, gal = small_gallery
    path = [tuple(gal.centroids[0]), tuple(gal.centroids[1])]
    ks = query_path_clusters(gal, path, 4)
    assert ks[0] == 0 and ks[-1] == 1 and len(query_path(gal, path, 4)) == 4


def test_resample_path():
    pts = resample_path([(0, 0), (0.5, 0), (0.5, 0.5)], 5)
    assert np.allclose(pts, [[0, 0], [0.25, 0], [0.5, 0], [0.5, 0.25], [0.5, 0.5]])
    assert np.allclose(resample_path([(0.1, 0.2), (0.1, 0.2)], 3), [[0.1, 0.2]] * 3)
    assert np.allclose(resample_path([(0.1, 0.2), (0.9, 0.2)], 1), [[0.1, 0.2]])
    # zero-length segments are skipped
    assert np.allclose(resample_path([(0, 0), (0, 0), (1, 0)], 3), [[0, 0], [0.5, 0], [1, 0]])
    with pytest.raises(GalleryError):
        resample_path([], 3)
    with pytest.raises(GalleryError):
        resample_path([(0, 0)], 0)


def test_build_errors(small_gallery):
    ds, _ = small_gallery
    with pytest.raises(GalleryError):
        build_gallery([], ds.frames, ds.template(), 2)
    with pytest.raises(GalleryError):
        build_gallery([VAAnnotation(0, 0, "nope")], ds.frames, ds.template(), 1)
    with pytest.raises(GalleryError):
        build_gallery(ds.annotations, ds.frames, ds.template(), 2, {"boredom": [ds.template()]})


def test_save_load(tmp_path, small_gallery):
    _, gal = small_gallery
    gal.save(tmp_path / "g.bin")
    back = AffectGallery.load(tmp_path / "g.bin")
    assert np.array_equal(back.deformations, gal.deformations)
    assert back.assignments == gal.assignments
    assert np.array_equal(back.basic["fear"], gal.basic["fear"])
    io.write_container(tmp_path / "other.bin", {"type": "morphable-model"}, {})
    with pytest.raises(io.FormatError):
        AffectGallery.load(tmp_path / "other.bin")


def test_annotation_csv_round_trip(tmp_path):
    anns = [VAAnnotation(0.1, -0.2, "a"), VAAnnotation(1.0, 1 / 3, "b")]
    write_annotations_csv(tmp_path / "a.csv", anns)
    assert read_annotations_csv(tmp_path / "a.csv") == anns
    (tmp_path / "bad.csv").write_text("id,v\nx,1\n")
    with pytest.raises(io.FormatError):
        read_annotations_csv(tmp_path / "bad.csv")


def test_labels_manifest(tmp_path):
    (tmp_path / "l.json").write_text(json.dumps({"joy": ["a", "b"]}))
    assert read_labels_manifest(tmp_path / "l.json") == {"joy": ["a", "b"]}
    (tmp_path / "u.json").write_text(json.dumps({"boredom": ["a"]}))
    with pytest.raises(io.FormatError):
        read_labels_manifest(tmp_path / "u.json")
    (tmp_path / "s.json").write_text(json.dumps(["a"]))
    with pytest.raises(io.FormatError):
        read_labels_manifest(tmp_path / "s.json")
