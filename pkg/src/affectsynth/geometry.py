"""Mesh and camera primitives.

Coordinate convention (used everywhere in the package): the camera sits at
the origin looking down +z, image x grows to the right and image y grows
downward.  A vertex ``s_i`` is mapped to view space by ``v = R s_i + t`` and
then to pixels by ``principal_point + f * (v_x, v_y) / v_z``.  Pixel centres
lie on integer coordinates, so the default principal point of a ``W x H``
image is ``((W - 1) / 2, (H - 1) / 2)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Base class for invalid geometric input."""


class InvalidParameterError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    def __init__(self, vertex: int, depth: float):
        super().__init__(f"vertex {vertex} has view depth {depth:.6g} <= 0")
        self.vertex = vertex
        self.depth = depth


class DegenerateGeometryError(GeometryError):
    pass


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    per_vertex_color: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError(f"vertices must be N x 3, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GeometryError("vertices contain NaN or Inf")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise GeometryError("triangle index out of range")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.per_vertex_color is not None:
            c = np.ascontiguousarray(self.per_vertex_color, dtype=np.float64)
            if c.shape != v.shape:
                raise GeometryError("per_vertex_color must match vertices")
            c.setflags(write=False)
            object.__setattr__(self, "per_vertex_color", c)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(np.asarray(vertices).reshape(-1, 3), self.triangles, self.per_vertex_color)

    def with_colors(self, colors: np.ndarray | None) -> "TriMesh":
        return TriMesh(self.vertices, self.triangles, colors)

    def flat(self) -> np.ndarray:
        """Vertices as a 3N vector ``[x1, y1, z1, x2, ...]``."""
        return self.vertices.reshape(-1).copy()

    def topology_hash(self) -> str:
        return topology_hash(self.triangles, self.n_vertices)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


def topology_hash(triangles: np.ndarray, n_vertices: int) -> str:
    h = hashlib.sha256()
    h.update(np.int64(n_vertices).tobytes())
    h.update(np.ascontiguousarray(triangles, dtype="<i8").tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class CameraParams:
    f: float
    q: tuple[float, float, float]
    t: tuple[float, float, float]
    principal_point: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        q = tuple(float(x) for x in self.q)
        t = tuple(float(x) for x in self.t)
        if len(q) != 3 or len(t) != 3:
            raise InvalidParameterError("q and t must have three components")
        if not self.f > 0:
            raise InvalidParameterError(f"focal length must be positive, got {self.f}")
        if q[0] ** 2 + q[1] ** 2 + q[2] ** 2 > 1.0 + 1e-12:
            raise InvalidParameterError("reduced quaternion norm exceeds 1")
        object.__setattr__(self, "f", float(self.f))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "principal_point", tuple(float(x) for x in self.principal_point))

    def to_vector(self) -> np.ndarray:
        """The 7 free parameters ``[f, q1, q2, q3, tx, ty, tz]``."""
        return np.array([self.f, *self.q, *self.t])

    @classmethod
    def from_vector(cls, c, principal_point) -> "CameraParams":
        c = np.asarray(c, dtype=np.float64)
        return cls(c[0], tuple(c[1:4]), tuple(c[4:7]), tuple(principal_point))

    @property
    def rotation(self) -> np.ndarray:
        return quaternion_rotation(self.q)

    def to_dict(self) -> dict:
        return {"f": self.f, "q": list(self.q), "t": list(self.t),
                "principal_point": list(self.principal_point)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        return cls(d["f"], tuple(d["q"]), tuple(d["t"]), tuple(d["principal_point"]))


def default_principal_point(width: int, height: int) -> tuple[float, float]:
    return ((width - 1) / 2.0, (height - 1) / 2.0)


@dataclass(frozen=True)
class Landmarks2D:
    points: np.ndarray
    vertex_map: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        m = np.asarray(self.vertex_map, dtype=np.int64).reshape(-1)
        if len(p) != 68 or len(m) != 68:
            raise GeometryError(f"expected 68 landmarks, got {len(p)} points / {len(m)} indices")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "vertex_map", m)

    def validate(self, n_vertices: int) -> None:
        if self.vertex_map.min() < 0 or self.vertex_map.max() >= n_vertices:
            raise GeometryError("landmark vertex_map index out of range for model topology")


# ---------------------------------------------------------------------------
# rotations


def quaternion_rotation(q) -> np.ndarray:
    """Rotation matrix of the unit quaternion ``(sqrt(1 - |q|^2), q1, q2, q3)``."""
    q1, q2, q3 = (float(x) for x in q)
    n2 = q1 * q1 + q2 * q2 + q3 * q3
    if n2 > 1.0 + 1e-12:
        raise InvalidParameterError(f"reduced quaternion norm {np.sqrt(n2):.6g} exceeds 1")
    q0 = np.sqrt(max(0.0, 1.0 - n2))
    return np.array([
        [1 - 2 * (q2 * q2 + q3 * q3), 2 * (q1 * q2 - q0 * q3), 2 * (q1 * q3 + q0 * q2)],
        [2 * (q1 * q2 + q0 * q3), 1 - 2 * (q1 * q1 + q3 * q3), 2 * (q2 * q3 - q0 * q1)],
        [2 * (q1 * q3 - q0 * q2), 2 * (q2 * q3 + q0 * q1), 1 - 2 * (q1 * q1 + q2 * q2)],
    ])


def quaternion_rotation_derivatives(q) -> np.ndarray:
    """``dR/dq_i`` for the reduced parametrisation, shape ``(3, 3, 3)``.

    Undefined on the boundary ``|q| = 1`` where ``q0 = 0``.
    """
    q1, q2, q3 = (float(x) for x in q)
    q0 = np.sqrt(max(0.0, 1.0 - q1 * q1 - q2 * q2 - q3 * q3))
    if q0 == 0.0:
        raise InvalidParameterError("rotation derivative undefined at |q| = 1")
    # partials of R wrt the full quaternion (q0, q1, q2, q3)
    dR0 = 2 * np.array([[0, -q3, q2], [q3, 0, -q1], [-q2, q1, 0]])
    dR1 = 2 * np.array([[0, q2, q3], [q2, -2 * q1, -q0], [q3, q0, -2 * q1]])
    dR2 = 2 * np.array([[-2 * q2, q1, q0], [q1, 0, q3], [-q0, q3, -2 * q2]])
    dR3 = 2 * np.array([[-2 * q3, -q0, q1], [q0, -2 * q3, q2], [q1, q2, 0]])
    out = np.empty((3, 3, 3))
    for i, (dRi, qi) in enumerate(((dR1, q1), (dR2, q2), (dR3, q3))):
        out[i] = dRi + dR0 * (-qi / q0)
    return out


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Reduced quaternion ``(q1, q2, q3)`` with ``q0 >= 0`` for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q[1:]


def axis_angle_rotation(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


# ---------------------------------------------------------------------------
# projection


def view_transform(vertices: np.ndarray, cam: CameraParams) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    return v @ cam.rotation.T + np.asarray(cam.t)


def project(vertices: np.ndarray, cam: CameraParams) -> np.ndarray:
    """Perspective projection of N x 3 vertices to N x 2 pixel coordinates."""
    v = view_transform(vertices, cam)
    bad = np.flatnonzero(v[:, 2] <= 0)
    if bad.size:
        raise BehindCameraError(int(bad[0]), float(v[bad[0], 2]))
    return np.asarray(cam.principal_point) + cam.f * v[:, :2] / v[:, 2:3]


def project_with_jacobians(vertices: np.ndarray, cam: CameraParams):
    """Project vertices and return the derivatives needed by the fitter.

    Returns
    -------
    uv : (N, 2) pixel coordinates
    d_cam : (N, 2, 7) derivative wrt ``[f, q1, q2, q3, tx, ty, tz]``
    d_vertex : (N, 2, 3) derivative wrt the model-space vertex position
    """
    X = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    R = cam.rotation
    v = X @ R.T + np.asarray(cam.t)
    z = v[:, 2]
    bad = np.flatnonzero(z <= 0)
    if bad.size:
        raise BehindCameraError(int(bad[0]), float(z[bad[0]]))
    f = cam.f
    inv_z = 1.0 / z
    uv = np.asarray(cam.principal_point) + f * v[:, :2] * inv_z[:, None]

    # d(uv)/d(view-space v), (N, 2, 3)
    d_view = np.zeros((len(X), 2, 3))
    d_view[:, 0, 0] = f * inv_z
    d_view[:, 1, 1] = f * inv_z
    d_view[:, 0, 2] = -f * v[:, 0] * inv_z ** 2
    d_view[:, 1, 2] = -f * v[:, 1] * inv_z ** 2

    d_cam = np.empty((len(X), 2, 7))
    d_cam[:, :, 0] = v[:, :2] * inv_z[:, None]
    dR = quaternion_rotation_derivatives(cam.q)
    for i in range(3):
        dv = X @ dR[i].T
        d_cam[:, :, 1 + i] = np.einsum("nij,nj->ni", d_view, dv)
    d_cam[:, :, 4:7] = d_view
    d_vertex = d_view @ R
    return uv, d_cam, d_vertex


# ---------------------------------------------------------------------------
# similarity alignment


def _center_and_normalise(X: np.ndarray) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    norm = np.linalg.norm(Xc)
    if norm < 1e-300:
        raise DegenerateGeometryError("all vertices coincide")
    return Xc / norm


def similarity_align(src: np.ndarray, dst: np.ndarray):
    """Least-squares similarity ``dst ~ s * src @ R.T + t`` (Umeyama).

    Works for point sets of any dimension.  Returns ``(s, R, t)``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    A, B = src - mu_s, dst - mu_d
    var = (A * A).sum()
    if var < 1e-300:
        raise DegenerateGeometryError("source points coincide")
    U, S, Vt = np.linalg.svd(B.T @ A)
    D = np.eye(src.shape[1])
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[-1, -1] = -1
    R = U @ D @ Vt
    s = np.trace(np.diag(S) @ D) / var
    t = mu_d - s * mu_s @ R.T
    return s, R, t


def _canonical_frame(X: np.ndarray) -> np.ndarray:
    """Rotation taking a centred shape to its principal-axis frame.

    Axis signs are fixed by the first vertex with a non-negligible
    coordinate, so the frame depends only on the shape and its vertex order.
    """
    _, vecs = np.linalg.eigh(X.T @ X)
    axes = vecs[:, ::-1].T.copy()
    scale = np.abs(X).max()
    for k in range(2):
        proj = X @ axes[k]
        idx = np.flatnonzero(np.abs(proj) > 1e-6 * scale)
        if idx.size and proj[idx[0]] < 0:
            axes[k] = -axes[k]
    axes[2] = np.cross(axes[0], axes[1])
    return axes


def generalized_procrustes(meshes, tol: float = 1e-9, max_iter: int = 100):
    """Align a set of corresponding meshes to their iteratively refined mean.

    The mean is kept centred with unit Frobenius norm and expressed in its
    principal-axis frame, which makes the output independent of any common
    similarity applied to the inputs.

    Parameters
    ----------
    meshes : list of TriMesh or (N, 3) arrays
    tol : float
        Stop once the mean moves less than this (Frobenius norm).
    max_iter : int

    Returns
    -------
    aligned : list of (N, 3) arrays
    mean : (N, 3) array
    """
    shapes = [np.asarray(m.vertices if isinstance(m, TriMesh) else m, dtype=np.float64).reshape(-1, 3)
              for m in meshes]
    if not shapes:
        raise GeometryError("need at least one mesh")
    n = shapes[0].shape[0]
    if any(s.shape[0] != n for s in shapes):
        raise GeometryError("meshes do not share topology")
    shapes = [_center_and_normalise(s) for s in shapes]

    mean = shapes[0]
    mean = mean @ _canonical_frame(mean).T
    aligned = shapes
    for _ in range(max_iter):
        aligned = []
        for s in shapes:
            sc, R, t = similarity_align(s, mean)
            aligned.append(sc * s @ R.T + t)
        new_mean = _center_and_normalise(np.mean(aligned, axis=0))
        new_mean = new_mean @ _canonical_frame(new_mean).T
        delta = np.linalg.norm(new_mean - mean)
        mean = new_mean
        if delta < tol:
            break
    aligned = []
    for s in shapes:
        sc, R, t = similarity_align(s, mean)
        aligned.append(sc * s @ R.T + t)
    return aligned, mean


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals using the right-hand rule on triangle winding."""
    V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    T = np.asarray(triangles, dtype=np.int64)
    fn = np.cross(V[T[:, 1]] - V[T[:, 0]], V[T[:, 2]] - V[T[:, 0]])
    n = np.zeros_like(V)
    for k in range(3):
        np.add.at(n, T[:, k], fn)
    norms = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norms > 0, norms, 1.0)
