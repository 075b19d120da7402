"""Valence-arousal clustering and the affect gallery of mean faces.

Annotated expressive meshes are grouped by Ward agglomeration of their
(valence, arousal) values.  Each cluster stores its centroid and the mean of
its member meshes minus the template, which is all a synthesis request needs.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io, kernels
from .geometry import TriMesh

BASIC_LABELS = ("anger", "disgust", "fear", "joy", "sadness", "surprise")
DEFAULT_CLUSTERS = 550


class GalleryError(ValueError):
    pass


@dataclass(frozen=True)
class VAAnnotation:
    valence: float
    arousal: float
    mesh_id: str

    def __post_init__(self):
        if not (-1 <= self.valence <= 1 and -1 <= self.arousal <= 1):
            raise GalleryError(f"VA ({self.valence}, {self.arousal}) outside [-1, 1]")


@dataclass(frozen=True)
class WardResult:
    assignments: np.ndarray   # (n,) cluster label per point
    centroids: np.ndarray     # (K, 2)
    merges: np.ndarray        # (n - K, 2) merged id pairs, in order
    heights: np.ndarray       # (n - K,) merge dissimilarities


def ward_cluster(points, K: int) -> WardResult:
    """Agglomerate ``points`` with Ward linkage until ``K`` clusters remain.

    Cluster ids during merging are the smallest member index, so labels
    ``0..K-1`` follow the order of each cluster's first member.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise GalleryError("points must be a non-empty n x d array")
    n = len(X)
    if not 1 <= K <= n:
        raise GalleryError(f"K must lie in [1, {n}], got {K}")
    merges, heights = kernels.ward_merges(X, K)
    parent = np.arange(n)
    for i, j in merges:
        parent[j] = i
    root = parent.copy()
    # ids only ever point to smaller ids, so one ascending pass resolves chains
    for k in range(n):
        root[k] = root[root[k]]
    ids = np.unique(root)
    label_of = {int(r): lab for lab, r in enumerate(ids)}
    assignments = np.array([label_of[int(r)] for r in root], dtype=np.int64)
    centroids = np.stack([X[assignments == lab].mean(axis=0) for lab in range(len(ids))])
    return WardResult(assignments, centroids, merges, heights)


def within_cluster_ss(points, assignments) -> float:
    X = np.asarray(points, dtype=np.float64)
    total = 0.0
    for lab in np.unique(assignments):
        P = X[assignments == lab]
        total += float(np.sum((P - P.mean(axis=0)) ** 2))
    return total


def _vertices(mesh) -> np.ndarray:
    if isinstance(mesh, TriMesh):
        return mesh.vertices
    return np.asarray(mesh, dtype=np.float64).reshape(-1, 3)


@dataclass(frozen=True)
class AffectGallery:
    centroids: np.ndarray                 # (K, 2)
    deformations: np.ndarray              # (K, 3N)
    template: np.ndarray                  # (3N,)
    counts: np.ndarray                    # (K,)
    basic: dict = field(default_factory=dict)   # label -> (3N,)
    assignments: dict = field(default_factory=dict)  # mesh_id -> cluster

    def __post_init__(self):
        for name in ("centroids", "deformations", "template", "counts"):
            a = np.array(getattr(self, name))
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if len(self.centroids) == 0:
            raise GalleryError("a gallery needs at least one cluster")

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    def save(self, path) -> None:
        arrays = {"centroids": self.centroids, "deformations": self.deformations,
                  "template": self.template, "counts": self.counts}
        for label, d in self.basic.items():
            arrays[f"basic_{label}"] = d
        meta = {"type": "affect-gallery", "basic_labels": sorted(self.basic),
                "assignments": {k: int(v) for k, v in sorted(self.assignments.items())}}
        io.write_container(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "AffectGallery":
        meta, arrays = io.read_container(path)
        if meta.get("type") != "affect-gallery":
            raise io.FormatError(f"{path} does not hold an affect gallery")
        basic = {lab: arrays[f"basic_{lab}"] for lab in meta.get("basic_labels", [])}
        return cls(arrays["centroids"], arrays["deformations"], arrays["template"], arrays["counts"],
                   basic, dict(meta.get("assignments", {})))


def build_gallery(annotations, meshes, template, K: int = DEFAULT_CLUSTERS,
                  basic_sets=None) -> AffectGallery:
    """Cluster the annotations and average the member meshes per cluster.

    Parameters
    ----------
    annotations : iterable of VAAnnotation
    meshes : mapping mesh_id -> TriMesh or (N, 3) vertices
    template : (N, 3) or flat template shape; deformations are stored relative to it
    K : number of clusters
    basic_sets : mapping label -> list of meshes, optional
    """
    template = np.asarray(_vertices(template), dtype=np.float64).ravel()
    anns = sorted(annotations, key=lambda a: (a.mesh_id, a.valence, a.arousal))
    if not anns:
        raise GalleryError("no annotations")
    missing = [a.mesh_id for a in anns if a.mesh_id not in meshes]
    if missing:
        raise GalleryError(f"annotations reference unknown meshes: {missing[:5]}")
    shapes = []
    for a in anns:
        v = _vertices(meshes[a.mesh_id]).ravel()
        if v.shape != template.shape:
            raise GalleryError(f"mesh {a.mesh_id!r} does not share the template topology")
        shapes.append(v)
    shapes = np.stack(shapes)
    va = np.array([(a.valence, a.arousal) for a in anns])
    ward = ward_cluster(va, K)
    deformations = np.stack([shapes[ward.assignments == k].mean(axis=0) - template
                             for k in range(len(ward.centroids))])
    counts = np.bincount(ward.assignments, minlength=len(ward.centroids))
    basic = {}
    for label, group in (basic_sets or {}).items():
        if label not in BASIC_LABELS:
            raise GalleryError(f"unknown expression label {label!r}")
        group = [_vertices(m).ravel() for m in group]
        if not group:
            raise GalleryError(f"no meshes for {label!r}")
        if any(g.shape != template.shape for g in group):
            raise GalleryError(f"a {label!r} mesh does not share the template topology")
        basic[label] = np.mean(group, axis=0) - template
    assignments = {a.mesh_id: int(c) for a, c in zip(anns, ward.assignments)}
    return AffectGallery(ward.centroids, deformations, template, counts, basic, assignments)


def _check_va(v: float, a: float) -> None:
    if not (np.isfinite(v) and np.isfinite(a) and -1 <= v <= 1 and -1 <= a <= 1):
        raise GalleryError(f"VA ({v}, {a}) outside [-1, 1]")


def nearest_cluster(gallery: AffectGallery, v: float, a: float) -> int:
    """Index of the nearest centroid; the lowest index wins ties."""
    _check_va(v, a)
    d = np.sum((gallery.centroids - np.array([v, a])) ** 2, axis=1)
    return int(np.argmin(d))


def query_va(gallery: AffectGallery, v: float, a: float) -> np.ndarray:
    return gallery.deformations[nearest_cluster(gallery, v, a)]


def resample_path(path, frames: int) -> np.ndarray:
    """``frames`` points spaced uniformly in arc length along a polyline.

    One frame, a single-point path or a zero-length path all give a static
    request at the first point.
    """
    P = np.asarray(path, dtype=np.float64).reshape(-1, 2)
    if len(P) == 0:
        raise GalleryError("empty path")
    if frames < 1:
        raise GalleryError("frames must be at least 1")
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    total = seg.sum() if len(seg) else 0.0
    if frames == 1 or total == 0:
        return np.repeat(P[:1], frames, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.linspace(0.0, total, frames)
    s[-1] = total
    out = np.empty((frames, 2))
    for f, sf in enumerate(s):
        k = int(np.searchsorted(cum, sf, side="right")) - 1
        k = min(max(k, 0), len(seg) - 1)
        while seg[k] == 0 and k + 1 < len(seg):
            k += 1
        t = 0.0 if seg[k] == 0 else (sf - cum[k]) / seg[k]
        out[f] = P[k] if t <= 0 else (P[k + 1] if t >= 1 else P[k] + t * (P[k + 1] - P[k]))
    return out


def query_path_clusters(gallery: AffectGallery, path, frames: int) -> list[int]:
    pts = resample_path(path, frames)
    return [nearest_cluster(gallery, v, a) for v, a in pts]


def query_path(gallery: AffectGallery, path, frames: int) -> list[np.ndarray]:
    return [gallery.deformations[k] for k in query_path_clusters(gallery, path, frames)]


def basic_expression_face(gallery: AffectGallery, label: str) -> np.ndarray:
    if label not in gallery.basic:
        raise GalleryError(f"no mean face stored for {label!r}")
    return gallery.basic[label]


# ---------------------------------------------------------------------------
# ingestion


def read_annotations_csv(path) -> list[VAAnnotation]:
    """Read ``mesh_id,valence,arousal`` rows (header required)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"mesh_id", "valence", "arousal"} <= set(reader.fieldnames):
            raise io.FormatError(f"{path}: expected columns mesh_id,valence,arousal")
        return [VAAnnotation(float(r["valence"]), float(r["arousal"]), r["mesh_id"]) for r in reader]


def write_annotations_csv(path, annotations) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mesh_id", "valence", "arousal"])
        for a in annotations:
            w.writerow([a.mesh_id, repr(float(a.valence)), repr(float(a.arousal))])


def read_labels_manifest(path) -> dict[str, list[str]]:
    """Labeled-expression manifest: ``{"joy": ["mesh_a", ...], ...}``."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or not all(isinstance(v, list) for v in doc.values()):
        raise io.FormatError(f"{path}: expected an object mapping labels to mesh id lists")
    unknown = set(doc) - set(BASIC_LABELS)
    if unknown:
        raise io.FormatError(f"{path}: unknown labels {sorted(unknown)}")
    return {k: [str(x) for x in v] for k, v in doc.items()}
