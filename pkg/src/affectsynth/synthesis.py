"""Deformation transfer and the fit, query, deform, render and blend pipeline."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .fitting import FitConfig, FittingResult, fit_3dmm
from .gallery import (BASIC_LABELS, AffectGallery, GalleryError, basic_expression_face, nearest_cluster,
                      resample_path)
from .geometry import Landmarks2D, TriMesh, project
from .morphable import MorphableModel
from .render import poisson_blend, rasterize


class SynthesisError(RuntimeError):
    pass


class BlendDegenerateError(SynthesisError):
    pass


@dataclass(frozen=True)
class AffectRequest:
    """One of: a VA point, a VA path with a frame count, or a basic expression."""

    kind: str
    va: tuple | None = None
    path: tuple | None = None
    frames: int = 1
    label: str | None = None

    def __post_init__(self):
        if self.kind == "va_point":
            v, a = self.va
            if not (-1 <= v <= 1 and -1 <= a <= 1):
                raise GalleryError(f"VA ({v}, {a}) outside [-1, 1]")
        elif self.kind == "va_path":
            pts = np.asarray(self.path, dtype=np.float64).reshape(-1, 2)
            if len(pts) == 0 or np.any(np.abs(pts) > 1):
                raise GalleryError("path points must lie in [-1, 1]^2")
            if self.frames < 1:
                raise GalleryError("frames must be at least 1")
            object.__setattr__(self, "path", tuple(map(tuple, pts.tolist())))
        elif self.kind == "basic":
            if self.label not in BASIC_LABELS:
                raise GalleryError(f"unknown expression label {self.label!r}")
        else:
            raise ValueError(f"unknown request kind {self.kind!r}")

    @classmethod
    def point(cls, v: float, a: float) -> "AffectRequest":
        return cls("va_point", va=(float(v), float(a)))

    @classmethod
    def sequence(cls, path, frames: int) -> "AffectRequest":
        return cls("va_path", path=path, frames=int(frames))

    @classmethod
    def basic(cls, label: str) -> "AffectRequest":
        return cls("basic", label=label)

    def to_dict(self) -> dict:
        if self.kind == "va_point":
            return {"kind": self.kind, "va": list(self.va)}
        if self.kind == "va_path":
            return {"kind": self.kind, "path": [list(p) for p in self.path], "frames": self.frames}
        return {"kind": self.kind, "label": self.label}


@dataclass
class SynthesisResult:
    frames: list                 # H x W x 3 images
    clusters: list               # cluster index per frame (None for basic expressions)
    landmarks: list              # projected 68 landmarks of each deformed face
    masks: list                  # blend masks
    fit: FittingResult
    request: AffectRequest
    info: list = field(default_factory=list)

    def manifest(self) -> dict:
        return {"request": self.request.to_dict(), "clusters": list(self.clusters),
                "fit": self.fit.summary(), "frames": len(self.frames),
                "blend_residual": [i.get("residual") for i in self.info]}


def transfer_deformation(s_orig, s_gen, template) -> np.ndarray:
    """``s_orig + (s_gen - template)``, in the shape of ``s_orig``."""
    s_orig = np.asarray(s_orig, dtype=np.float64)
    s_gen = np.asarray(s_gen, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    if not (s_orig.size == s_gen.size == template.size):
        raise ValueError(f"shape sizes differ: {s_orig.size}, {s_gen.size}, {template.size}")
    return s_orig + (s_gen.reshape(s_orig.shape) - template.reshape(s_orig.shape))


def blend_mask(coverage: np.ndarray) -> np.ndarray:
    """Render coverage eroded by one pixel (4-neighbourhood)."""
    return ndimage.binary_erosion(coverage, structure=ndimage.generate_binary_structure(2, 1))


def _deformations(gallery: AffectGallery, request: AffectRequest):
    if request.kind == "basic":
        return [basic_expression_face(gallery, request.label)], [None]
    if request.kind == "va_point":
        k = nearest_cluster(gallery, *request.va)
        return [gallery.deformations[k]], [k]
    pts = resample_path(request.path, request.frames)
    ks = [nearest_cluster(gallery, v, a) for v, a in pts]
    return [gallery.deformations[k] for k in ks], ks


def render_frame(image, shape: np.ndarray, deformation: np.ndarray, fit: FittingResult,
                 triangles: np.ndarray, landmark_map: np.ndarray | None):
    """Deform the fitted shape, render it over ``image`` and blend."""
    verts = shape + deformation.reshape(shape.shape)
    mesh = TriMesh(verts, triangles)
    rendered = rasterize(mesh, fit.sampled_texture, fit.camera, image)
    mask = blend_mask(rendered.mask)
    if not mask.any():
        raise BlendDegenerateError("the deformed face covers no blendable pixel")
    out, info = poisson_blend(rendered.image, image, mask)
    lms = project(verts[landmark_map], fit.camera) if landmark_map is not None else None
    return out, mask, lms, info


def synthesize(image, landmarks: Landmarks2D, model: MorphableModel, gallery: AffectGallery,
               request: AffectRequest, cfg: FitConfig | None = None, fit: FittingResult | None = None,
               jobs: int = 1) -> SynthesisResult:
    """Synthesise ``request`` on the face in ``image``.

    The face is fitted once (or ``fit`` is reused) and its texture sampled
    once; every output frame reuses them.  Frames are independent, so with
    ``jobs > 1`` they render on a thread pool; output order is fixed.
    """
    image = np.asarray(image, dtype=np.float64)
    if gallery.template.size != model.shape.dim:
        raise SynthesisError("gallery and model shapes have different sizes")
    if fit is None:
        fit = fit_3dmm(image, landmarks, model, cfg)
    shape = fit.shape(model)
    deformations, clusters = _deformations(gallery, request)
    lmap = landmarks.vertex_map if landmarks is not None else model.landmark_vertex_map

    def one(d):
        return render_frame(image, shape, d, fit, model.triangles, lmap)

    if jobs > 1 and len(deformations) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(one, deformations))
    else:
        outs = [one(d) for d in deformations]
    return SynthesisResult([o[0] for o in outs], clusters, [o[2] for o in outs], [o[1] for o in outs],
                           fit, request, [o[3] for o in outs])
