import numpy as np
import pytest

from affectsynth import testbed as tb
from affectsynth.gallery import GalleryError, build_gallery
from affectsynth.synthesis import (AffectRequest, SynthesisError, blend_mask, synthesize,
                                   transfer_deformation)


def test_transfer_deformation():
    s = np.arange(6.0).reshape(2, 3)
    out = transfer_deformation(s, np.ones(6) * 2, np.ones(6))
    assert np.array_equal(out, s + 1) and out.shape == (2, 3)
    with pytest.raises(ValueError):
        transfer_deformation(s, np.ones(3), np.ones(6))


def test_blend_mask_erodes_by_one():
    m = np.zeros((7, 7), bool)
    m[1:6, 1:6] = True
    e = blend_mask(m)
    assert e.sum() == 9 and e[2:5, 2:5].all()


def test_request_validation():
    with pytest.raises(GalleryError):
        AffectRequest.point(1.5, 0)
    with pytest.raises(GalleryError):
        AffectRequest.sequence([(0, 0), (2, 0)], 3)
    with pytest.raises(GalleryError):
        AffectRequest.sequence([(0, 0)], 0)
    with pytest.raises(GalleryError):
        AffectRequest.basic("boredom")
    with pytest.raises(ValueError):
        AffectRequest("other")
    assert AffectRequest.sequence([[0, 0], [0.5, 0.5]], 3).to_dict() == {
        "kind": "va_path", "path": [[0.0, 0.0], [0.5, 0.5]], "frames": 3}


@pytest.fixture(scope="module")
def setup(small_model):
    ds = tb.make_dataset(4, 12, 9)
    basic = {lab: [ds.basic_meshes[m] for m in ids] for lab, ids in ds.basic_sets.items()}
    gal = build_gallery(ds.annotations, ds.frames, ds.template(), 6, basic)
    face = tb.make_face(77)
    cam = tb.default_camera((128, 128), focal=320.0)
    return gal, tb.render_face(face, cam, (128, 128)), tb.ground_truth_landmarks(face, cam)


def test_sequence_threads_match_serial(small_model, setup):
    gal, image, lm = setup
    req = AffectRequest.sequence([(-0.8, 0.5), (0.8, 0.5)], 4)
    a = synthesize(image, lm, small_model, gal, req)
    b = synthesize(image, lm, small_model, gal, req, fit=a.fit, jobs=3)
    assert len(a.frames) == 4 and a.clusters == b.clusters
    for x, y in zip(a.frames, b.frames):
        assert np.array_equal(x, y)
    man = a.manifest()
    assert man["frames"] == 4 and man["request"]["kind"] == "va_path" and len(man["blend_residual"]) == 4


def test_basic_expression_changes_only_the_face(small_model, setup):
    gal, image, lm = setup
    res = synthesize(image, lm, small_model, gal, AffectRequest.basic("surprise"))
    assert res.clusters == [None]
    assert np.array_equal(res.frames[0][~res.masks[0]], image[~res.masks[0]])
    assert not np.array_equal(res.frames[0], image)
    assert res.landmarks[0].shape == (68, 2)


def test_gallery_model_mismatch(small_model, setup):
    gal, image, lm = setup
    from affectsynth.gallery import AffectGallery
    bad = AffectGallery(gal.centroids, gal.deformations[:, :9], gal.template[:9], gal.counts)
    with pytest.raises(SynthesisError):
        synthesize(image, lm, small_model, bad, AffectRequest.point(0, 0))
