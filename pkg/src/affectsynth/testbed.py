"""Deterministic synthetic faces with known ground truth.

The head is an ellipsoid in the camera-aligned model frame (x to the image
right, y down, the face looking toward -z), tessellated on a latitude /
longitude grid whose rows and columns are concentrated on the face.  On top
of it sit a nose, identity-specific low-frequency shape and texture
variation, and six localized Gaussian expression bumps.

All randomness comes from numpy's ``SFC64`` generator (a 64-bit "small fast
chaotic" PRNG) seeded with the identity or dataset seed.

Valence-arousal law
-------------------
The testbed defines affect directly from the expression parameters::

    valence = clamp(mouth_corner - brow_furrow, -1, 1)
    arousal = clamp(0.5 * mouth_open + 0.5 * eye_open + 0.3 * brow_raise, -1, 1)

and generates expressive frames from a target (v, a) with the linear inverse
``expr_from_va``: ``mouth_corner = v / 2``, ``brow_furrow = -v / 2`` and
``mouth_open = eye_open = brow_raise = a / 1.3``.  Because the bump field is
linear in the parameters, a cluster's mean deformation equals the law
evaluated at the cluster centroid, up to identity sampling noise.

Basic-expression parameters
---------------------------
========  ============  ==========  ==========  ===========  ========
label     mouth_corner  mouth_open  brow_raise  brow_furrow  eye_open
========  ============  ==========  ==========  ===========  ========
anger         -0.3         0.1         0.0         0.9         0.3
disgust       -0.5         0.2         0.0         0.5        -0.4
fear          -0.2         0.4         0.8         0.0         0.8
joy            0.9         0.3         0.1         0.0         0.1
sadness       -0.6         0.0         0.3         0.2        -0.3
surprise       0.0         0.9         1.0         0.0         1.0
========  ============  ==========  ==========  ===========  ========
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .gallery import BASIC_LABELS, VAAnnotation
from .geometry import CameraParams, Landmarks2D, TriMesh, axis_angle_rotation, project, rotation_to_quaternion


N_LAT = 29
N_LON = 50
RADII = np.array([0.78, 1.0, 0.86])
DEFAULT_IMAGE_SIZE = (256, 256)
DEFAULT_FOCAL = 640.0
DEFAULT_DEPTH = 8.0

IDENTITY_SCALE = 0.02
TEXTURE_SCALE = 0.06
EXPRESSION_AMPLITUDE = 0.14
BUMP_SIGMA = 0.13


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.SFC64(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True)
class ExprParams:
    mouth_corner: float = 0.0
    mouth_open: float = 0.0
    brow_raise: float = 0.0
    brow_furrow: float = 0.0
    eye_open: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.mouth_corner, self.mouth_open, self.brow_raise, self.brow_furrow, self.eye_open])

    def scaled(self, k: float) -> "ExprParams":
        return ExprParams(*(k * self.as_array()))


BASIC_EXPRESSIONS = {
    "anger": ExprParams(-0.3, 0.1, 0.0, 0.9, 0.3),
    "disgust": ExprParams(-0.5, 0.2, 0.0, 0.5, -0.4),
    "fear": ExprParams(-0.2, 0.4, 0.8, 0.0, 0.8),
    "joy": ExprParams(0.9, 0.3, 0.1, 0.0, 0.1),
    "sadness": ExprParams(-0.6, 0.0, 0.3, 0.2, -0.3),
    "surprise": ExprParams(0.0, 0.9, 1.0, 0.0, 1.0),
}


def ground_truth_va(expr: ExprParams) -> tuple[float, float]:
    v = float(np.clip(expr.mouth_corner - expr.brow_furrow, -1, 1))
    a = float(np.clip(0.5 * expr.mouth_open + 0.5 * expr.eye_open + 0.3 * expr.brow_raise, -1, 1))
    return v, a


def expr_from_va(v: float, a: float) -> ExprParams:
    return ExprParams(mouth_corner=v / 2, mouth_open=a / 1.3, brow_raise=a / 1.3,
                      brow_furrow=-v / 2, eye_open=a / 1.3)


# ---------------------------------------------------------------------------
# template topology


def _warp(s: np.ndarray, a: float) -> np.ndarray:
    # odd cubic warp: slope 1/(1+a) at 0 concentrates samples on the face
    return (s + a * s ** 3) / (1 + a)


def _face_angles(azimuth_deg, elevation_deg):
    """Unit-sphere point for an azimuth (deg, + toward image right) and an
    elevation below the horizontal (deg, + downward)."""
    az = np.radians(azimuth_deg)
    el = np.radians(elevation_deg)
    return np.stack([np.cos(el) * np.sin(az), np.sin(el), -np.cos(el) * np.cos(az)], axis=-1)


@lru_cache(maxsize=None)
def _template():
    s_lat = np.linspace(-1, 1, N_LAT + 2)[1:-1]
    elev = 90.0 * _warp(s_lat, 1.0)                      # -90 top .. +90 bottom
    s_lon = np.linspace(-1, 1, N_LON, endpoint=False)
    azim = 180.0 * _warp(s_lon, 2.0)
    pts = [_face_angles(0.0, -90.0)]
    for e in elev:
        pts.append(_face_angles(azim, np.full_like(azim, e)))
    pts.append(_face_angles(0.0, 90.0))
    unit = np.vstack([np.atleast_2d(p) for p in pts])
    n = len(unit)
    top, bottom = 0, n - 1

    def ring(i, j):
        return 1 + i * N_LON + (j % N_LON)

    tris = []
    for j in range(N_LON):
        tris.append((top, ring(0, j), ring(0, j + 1)))
        tris.append((bottom, ring(N_LAT - 1, j + 1), ring(N_LAT - 1, j)))
    for i in range(N_LAT - 1):
        for j in range(N_LON):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            tris.append((a, c, b))
            tris.append((b, c, d))
    tris = np.array(tris, dtype=np.int64)
    # orient every triangle so its right-hand normal points outward
    P = unit * RADII
    nrm = np.cross(P[tris[:, 1]] - P[tris[:, 0]], P[tris[:, 2]] - P[tris[:, 0]])
    flip = np.einsum("ij,ij->i", nrm, P[tris].mean(1)) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    unit.setflags(write=False)
    tris.setflags(write=False)
    return unit, tris


def template_topology() -> tuple[np.ndarray, np.ndarray]:
    """``(unit_sphere_points, triangles)`` of the testbed head."""
    return _template()


def _gauss(points: np.ndarray, center: np.ndarray, sigma: float) -> np.ndarray:
    d2 = ((points - center) ** 2).sum(-1)
    return np.exp(-0.5 * d2 / sigma ** 2)


@lru_cache(maxsize=None)
def _base_surface():
    unit, _ = _template()
    P = unit * RADII
    nose = _gauss(unit, _face_angles(0.0, 4.0), 0.16)
    normal = unit / RADII
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    P = P + 0.22 * nose[:, None] * normal
    P.setflags(write=False)
    normal.setflags(write=False)
    return P, normal


def _at(az, el):
    return _face_angles(az, el) * RADII


@lru_cache(maxsize=None)
def identity_fields() -> np.ndarray:
    """(10, N) radial displacement fields spanning identity shape variation."""
    unit, _ = _template()
    x, y, z = unit.T
    P = unit * RADII
    fields = [
        y, x * x - 0.3, y * y - 0.4, z, y * z, x * x * y,
        _gauss(P, _at(0, 4), 0.18),                                  # nose size
        _gauss(P, _at(0, 50), 0.25),                                 # chin
        _gauss(P, _at(-35, 15), 0.22) + _gauss(P, _at(35, 15), 0.22),  # cheeks
        _gauss(P, _at(0, -20), 0.3),                                 # brow ridge
    ]
    F = np.array(fields)
    F /= np.abs(F).max(axis=1, keepdims=True)
    F.setflags(write=False)
    return F


@lru_cache(maxsize=None)
def expression_fields() -> np.ndarray:
    """(5, N, 3) displacement per unit of each ExprParams entry."""
    base, _ = _base_surface()
    s = BUMP_SIGMA
    A = EXPRESSION_AMPLITUDE
    n = len(base)
    out = np.zeros((5, n, 3))
    left_c, right_c = _at(-20, 30), _at(20, 30)
    g = _gauss(base, left_c, s)
    out[0] += g[:, None] * np.array([-0.5, -1.0, 0.0])
    g = _gauss(base, right_c, s)
    out[0] += g[:, None] * np.array([0.5, -1.0, 0.0])
    out[1] += _gauss(base, _at(0, 36), s)[:, None] * np.array([0.0, 1.0, 0.0])
    brow_l, brow_r = _at(-24, -22), _at(24, -22)
    gl, gr = _gauss(base, brow_l, s), _gauss(base, brow_r, s)
    out[2] += (gl + gr)[:, None] * np.array([0.0, -1.0, 0.0])
    out[3] += gl[:, None] * np.array([0.5, 0.6, 0.0]) + gr[:, None] * np.array([-0.5, 0.6, 0.0])
    eyes = _gauss(base, _at(-24, -13), 0.8 * s) + _gauss(base, _at(24, -13), 0.8 * s)
    out[4] += eyes[:, None] * np.array([0.0, -1.0, 0.0])
    out *= A
    out.setflags(write=False)
    return out


def expression_deformation(expr: ExprParams) -> np.ndarray:
    """N x 3 displacement of the bump field; exactly linear in ``expr``."""
    return np.tensordot(expr.as_array(), expression_fields(), axes=1)


def va_deformation(v: float, a: float) -> np.ndarray:
    """The testbed's published VA -> deformation law (N x 3)."""
    return expression_deformation(expr_from_va(v, a))


@lru_cache(maxsize=None)
def texture_fields() -> np.ndarray:
    unit, _ = _template()
    x, y, z = unit.T
    F = np.array([x, y, z, x * y, y * y - 0.4, x * x - 0.3])
    F /= np.abs(F).max(axis=1, keepdims=True)
    F.setflags(write=False)
    return F


@lru_cache(maxsize=None)
def _feature_colours():
    """Fixed darkening/tinting of lips, brows and eyes (N x 3 additive)."""
    base, _ = _base_surface()
    out = np.zeros((len(base), 3))
    lips = _gauss(base, _at(0, 30), 0.09)
    out += lips[:, None] * np.array([0.12, -0.18, -0.15])
    for az in (-24, 24):
        out += _gauss(base, _at(az, -22), 0.07)[:, None] * np.array([-0.3, -0.28, -0.25])
        out += _gauss(base, _at(az, -12), 0.05)[:, None] * np.array([-0.25, -0.2, -0.15])
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# faces


def identity_coefficients(identity_seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = rng_for(identity_seed)
    shape = rng.standard_normal(identity_fields().shape[0])
    tone = np.array([0.72, 0.55, 0.45]) + 0.06 * rng.standard_normal(3)
    tex = rng.standard_normal((texture_fields().shape[0], 3))
    return shape, tone, tex


def neutral_vertices(identity_seed: int) -> np.ndarray:
    base, normal = _base_surface()
    shape, _, _ = identity_coefficients(identity_seed)
    radial = IDENTITY_SCALE * (shape @ identity_fields())
    return base + radial[:, None] * normal


def identity_texture(identity_seed: int) -> np.ndarray:
    _, tone, tex = identity_coefficients(identity_seed)
    col = tone + TEXTURE_SCALE * (texture_fields().T @ tex) + _feature_colours()
    return np.clip(col, 0.0, 1.0)


def make_face(identity_seed: int, expr: ExprParams | None = None) -> TriMesh:
    """Testbed head for an identity with an expression applied (default neutral)."""
    expr = expr or ExprParams()
    _, tris = _template()
    v = neutral_vertices(identity_seed) + expression_deformation(expr)
    return TriMesh(v, tris, identity_texture(identity_seed))


# ---------------------------------------------------------------------------
# landmarks

def _landmark_angles() -> np.ndarray:
    pts = []
    tau = np.linspace(np.pi, 0, 17)
    pts += list(zip(68 * np.cos(tau), 52 * np.sin(tau)))                 # jaw 0-16
    pts += [(a, -23 - 4 * np.sin(np.pi * k / 4)) for k, a in enumerate(np.linspace(-42, -10, 5))]
    pts += [(a, -23 - 4 * np.sin(np.pi * k / 4)) for k, a in enumerate(np.linspace(10, 42, 5))]
    pts += [(0, e) for e in (-12, -6, 0, 6)]                             # nose bridge 27-30
    pts += [(a, 13) for a in (-10, -5, 0, 5, 10)]                        # nostrils 31-35
    for cx in (-24, 24):                                                 # eyes 36-47
        for ang in (180, 120, 60, 0, -60, -120):
            t = np.radians(ang)
            pts.append((cx + 9 * np.cos(t), -12 - 3.5 * np.sin(t)))
    for ang in np.linspace(180, -150, 12):                               # outer lip 48-59
        t = np.radians(ang)
        pts.append((21 * np.cos(t), 30 - 7 * np.sin(t)))
    for ang in np.linspace(180, -135, 8):                                # inner lip 60-67
        t = np.radians(ang)
        pts.append((14 * np.cos(t), 30 - 2.5 * np.sin(t)))
    return np.array(pts)


@lru_cache(maxsize=None)
def landmark_indices() -> np.ndarray:
    """The published 68-entry landmark vertex table (iBUG ordering)."""
    base, _ = _base_surface()
    targets = _face_angles(*_landmark_angles().T) * RADII
    used = set()
    idx = []
    for t in targets:
        d = ((base - t) ** 2).sum(1)
        for k in np.argsort(d, kind="stable"):
            if int(k) not in used:
                used.add(int(k))
                idx.append(int(k))
                break
    out = np.array(idx, dtype=np.int64)
    out.setflags(write=False)
    return out


def ground_truth_landmarks(mesh: TriMesh, cam: CameraParams) -> Landmarks2D:
    idx = landmark_indices()
    return Landmarks2D(project(mesh.vertices[idx], cam), idx)


# ---------------------------------------------------------------------------
# cameras and images


def default_camera(image_size=DEFAULT_IMAGE_SIZE, yaw_deg=0.0, pitch_deg=0.0, roll_deg=0.0,
                   focal=DEFAULT_FOCAL, depth=DEFAULT_DEPTH, offset=(0.0, 0.0)) -> CameraParams:
    w, h = image_size
    R = (axis_angle_rotation([0, 0, 1], np.radians(roll_deg))
         @ axis_angle_rotation([1, 0, 0], np.radians(pitch_deg))
         @ axis_angle_rotation([0, 1, 0], np.radians(yaw_deg)))
    return CameraParams(focal, tuple(rotation_to_quaternion(R)), (offset[0], offset[1], depth),
                        ((w - 1) / 2.0, (h - 1) / 2.0))


def random_camera(rng: np.random.Generator, image_size=DEFAULT_IMAGE_SIZE, max_angle=10.0) -> CameraParams:
    yaw, pitch, roll = rng.uniform(-max_angle, max_angle, 3) * np.array([1.0, 0.6, 0.4])
    off = rng.uniform(-0.1, 0.1, 2)
    depth = DEFAULT_DEPTH * (1 + rng.uniform(-0.05, 0.05))
    return default_camera(image_size, yaw, pitch, roll, DEFAULT_FOCAL, depth, off)


def background(image_size=DEFAULT_IMAGE_SIZE) -> np.ndarray:
    w, h = image_size
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.empty((h, w, 3))
    img[..., 0] = 0.30 + 0.15 * yy / max(h - 1, 1)
    img[..., 1] = 0.35 + 0.10 * xx / max(w - 1, 1)
    img[..., 2] = 0.45 - 0.10 * yy / max(h - 1, 1)
    return img


def render_face(mesh: TriMesh, cam: CameraParams, image_size=DEFAULT_IMAGE_SIZE, colors=None) -> np.ndarray:
    from .render import rasterize

    colors = mesh.per_vertex_color if colors is None else colors
    return rasterize(mesh, colors, cam, background(image_size)).image


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    identity_seeds: dict[str, int]
    neutrals: dict[str, TriMesh]
    frames: dict[str, TriMesh]
    frame_identity: dict[str, str]
    frame_expr: dict[str, ExprParams]
    annotations: list[VAAnnotation]
    basic_sets: dict[str, list[str]]
    basic_meshes: dict[str, TriMesh] = field(default_factory=dict)

    def template(self) -> np.ndarray:
        """Mean neutral shape (N x 3)."""
        return np.mean([m.vertices for m in self.neutrals.values()], axis=0)


def _va_sample(rng: np.random.Generator, min_radius: float) -> tuple[float, float]:
    while True:
        v, a = rng.uniform(-1, 1, 2)
        if np.hypot(v, a) >= min_radius:
            return float(v), float(a)


def make_dataset(n_identities: int, frames_per_identity: int, seed: int,
                 min_radius: float = 0.3, basic_per_label: int | None = None,
                 shared_script: bool = True) -> Dataset:
    """Deterministic corpus of identities, VA-annotated frames and basic-expression sets.

    Frame VA values are drawn uniformly from [-1, 1]^2 outside a disc of
    ``min_radius`` around neutral; each frame's expression is
    ``expr_from_va(v, a)`` so its annotation is exactly ``ground_truth_va``.

    With ``shared_script`` every identity performs the same list of VA
    targets, as in a scripted recording session.  Every VA cluster then holds
    all identities in equal proportion, so a cluster's mean mesh minus the
    mean neutral is exactly the law at the cluster centroid.  Otherwise each
    identity draws its own targets.
    """
    rng = rng_for(seed)
    id_seeds = {f"id{k:04d}": int(s) for k, s in
                enumerate(rng.integers(0, 2 ** 63 - 1, size=n_identities, dtype=np.int64))}
    script = [_va_sample(rng, min_radius) for _ in range(frames_per_identity)] if shared_script else None
    neutrals, frames, frame_identity, frame_expr, anns = {}, {}, {}, {}, []
    for ident, s in id_seeds.items():
        neutrals[ident] = make_face(s)
        for f in range(frames_per_identity):
            v, a = script[f] if script is not None else _va_sample(rng, min_radius)
            e = expr_from_va(v, a)
            mid = f"{ident}_f{f:04d}"
            frames[mid] = make_face(s, e)
            frame_identity[mid] = ident
            frame_expr[mid] = e
            gv, ga = ground_truth_va(e)
            anns.append(VAAnnotation(gv, ga, mid))
    basic_sets, basic_meshes = {}, {}
    ids = list(id_seeds)[: basic_per_label or len(id_seeds)]
    for label in BASIC_LABELS:
        basic_sets[label] = []
        for ident in ids:
            mid = f"{ident}_{label}"
            basic_meshes[mid] = make_face(id_seeds[ident], BASIC_EXPRESSIONS[label])
            basic_sets[label].append(mid)
    return Dataset(id_seeds, neutrals, frames, frame_identity, frame_expr, anns, basic_sets, basic_meshes)


def build_models(n_identities: int = 40, seed: int = 1, variance_fraction: float = 0.995,
                 expressions: bool = True, procrustes: bool = True):
    """Shape and texture models trained on testbed identities.

    With ``expressions`` the shape training set also holds each identity with
    each of the six basic expressions and the two pure VA extremes (randomly
    scaled), so the shape model spans expression deformation as well as
    identity.
    """
    from .morphable import MorphableModel, build_pca_model, procrustes_normalise
    from .geometry import topology_hash

    rng = rng_for(seed)
    seeds = [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=n_identities, dtype=np.int64)]
    _, tris = _template()
    shapes, textures = [], []
    extras = list(BASIC_EXPRESSIONS.values()) + [expr_from_va(1, 0), expr_from_va(0, 1)]
    for k, s in enumerate(seeds):
        shapes.append(make_face(s).vertices.ravel())
        textures.append(identity_texture(s).ravel())
        if expressions:
            for e in extras:
                shapes.append(make_face(s, e.scaled(rng.uniform(0.5, 1.2))).vertices.ravel())
    topo = topology_hash(tris, len(_template()[0]))
    if procrustes:
        shapes = procrustes_normalise(shapes)
    shape = build_pca_model(shapes, variance_fraction, "shape", topo)
    texture = build_pca_model(textures, variance_fraction, "texture", topo)
    return MorphableModel(shape, texture, tris, landmark_indices())


def expr_dict(e: ExprParams) -> dict:
    return asdict(e)
