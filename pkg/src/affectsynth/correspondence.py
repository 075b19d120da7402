"""Registration tools: cylindrical UV embedding, thin-plate splines, non-rigid ICP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .geometry import DegenerateGeometryError, TriMesh

DEFAULT_SCHEDULE = (50.0, 20.0, 5.0, 2.0)
DEFAULT_INNER_ITERS = 10
DEFAULT_LANDMARK_WEIGHT = 10.0


class SingularSystemError(DegenerateGeometryError):
    pass


def _points(mesh) -> np.ndarray:
    if isinstance(mesh, TriMesh):
        return mesh.vertices
    return np.asarray(mesh, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# cylindrical UV


def cylinder_frame(vertices) -> tuple[np.ndarray, np.ndarray]:
    """Centroid and orthonormal frame ``(x', axis, z')`` of the cylinder.

    The axis is the principal direction closest to the y axis (sign chosen
    so it agrees with +y).  ``z'`` is +z made orthogonal to the axis and
    ``x' = axis x z'``.
    """
    V = _points(vertices)
    c = V.mean(axis=0)
    X = V - c
    cov = X.T @ X / max(len(V), 1)
    w, E = np.linalg.eigh(cov)
    if w[-1] <= 0:
        raise DegenerateGeometryError("mesh has zero extent")
    axis = E[:, int(np.argmax(np.abs(E[1])))]
    if axis[1] < 0:
        axis = -axis
    ref = np.array([0.0, 0.0, 1.0])
    if abs(ref @ axis) > 0.99:
        ref = np.array([1.0, 0.0, 0.0])
    z = ref - (ref @ axis) * axis
    z /= np.linalg.norm(z)
    x = np.cross(axis, z)
    return c, np.stack([x, axis, z])


def cylindrical_uv(mesh) -> np.ndarray:
    """(N, 2) coordinates: azimuth ``u = (atan2(x', z') + pi) / 2pi`` and normalised height ``v``."""
    V = _points(mesh)
    c, F = cylinder_frame(V)
    L = (V - c) @ F.T
    radial = np.hypot(L[:, 0], L[:, 2])
    if radial.max() <= 1e-12 * max(np.abs(L).max(), 1e-300):
        raise DegenerateGeometryError("mesh has no extent around its vertical axis")
    u = (np.arctan2(L[:, 0], L[:, 2]) + np.pi) / (2 * np.pi)
    h = L[:, 1]
    span = h.max() - h.min()
    v = (h - h.min()) / span if span > 0 else np.full(len(h), 0.5)
    return np.stack([u, v], axis=1)


# ---------------------------------------------------------------------------
# thin-plate splines


@dataclass(frozen=True)
class TPSWarp:
    controls: np.ndarray   # (K, 2)
    weights: np.ndarray    # (K, 2) radial kernel weights
    affine: np.ndarray     # (3, 2): rows for 1, x, y


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r = 0.5 r^2 log r^2, with U(0) = 0
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = 0.5 * r2[nz] * np.log(r2[nz])
    return out


def tps_fit(src, dst) -> TPSWarp:
    """Interpolating thin-plate spline taking ``src`` control points to ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    k = len(src)
    if k < 3 or dst.shape != src.shape:
        raise SingularSystemError("need at least 3 source/destination pairs of equal count")
    if len(np.unique(src, axis=0)) < k:
        raise SingularSystemError("duplicate control points")
    centred = src - src.mean(axis=0)
    if np.linalg.matrix_rank(centred, tol=1e-10 * max(np.abs(centred).max(), 1e-300)) < 2:
        raise SingularSystemError("control points are collinear")
    r2 = np.sum((src[:, None] - src[None]) ** 2, axis=-1)
    P = np.hstack([np.ones((k, 1)), src])
    A = np.zeros((k + 3, k + 3))
    A[:k, :k] = _tps_kernel(r2)
    A[:k, k:] = P
    A[k:, :k] = P.T
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = dst
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    return TPSWarp(src.copy(), sol[:k], sol[k:])


def tps_apply(warp: TPSWarp, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    r2 = np.sum((pts[:, None] - warp.controls[None]) ** 2, axis=-1)
    return warp.affine[0] + pts @ warp.affine[1:] + _tps_kernel(r2) @ warp.weights


# ---------------------------------------------------------------------------
# non-rigid ICP


@dataclass
class NICPReport:
    objective: list = field(default_factory=list)    # (stiffness, before, after) per solve
    mean_distance: float = float("nan")
    max_distance: float = float("nan")
    iterations: int = 0

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "mean_distance": self.mean_distance,
                "max_distance": self.max_distance,
                "objective": [{"stiffness": s, "before": b, "after": a} for s, b, a in self.objective]}


def mesh_edges(triangles: np.ndarray) -> np.ndarray:
    t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _check_connected(n: int, edges: np.ndarray) -> None:
    G = sp.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    k, labels = connected_components(G, directed=False)
    if k > 1:
        sizes = np.bincount(labels)
        parts = ", ".join(f"component {c}: {s} vertices (first vertex {int(np.argmax(labels == c))})"
                          for c, s in enumerate(sizes[:10]))
        raise SingularSystemError(f"source mesh graph has {k} connected components; {parts}")


def nicp_register(source: TriMesh, target, stiffness_schedule=DEFAULT_SCHEDULE,
                  landmark_pairs=None, inner_iters: int = DEFAULT_INNER_ITERS,
                  landmark_weight: float = DEFAULT_LANDMARK_WEIGHT, gamma: float = 1.0):
    """Deform ``source`` onto ``target`` with per-vertex affine transforms.

    Each vertex ``i`` carries a 4 x 3 affine ``X_i``.  For every stiffness
    ``alpha`` in the schedule and every inner iteration, correspondences are
    the nearest target vertices (point to point) and the quadratic

        alpha^2 ||(M kron G) X||^2 + ||D X - U||^2 + w_l^2 ||D_l X - U_l||^2

    is minimised exactly (``M`` edge incidence, ``G = diag(1, 1, 1, gamma)``,
    ``D`` maps transforms to deformed source vertices).

    Parameters
    ----------
    landmark_pairs : iterable of (source vertex index, target 3D point), optional

    Returns
    -------
    (deformed TriMesh with the source topology, NICPReport)
    """
    V = source.vertices
    n = len(V)
    T = _points(target)
    sched = [float(a) for a in stiffness_schedule]
    if not sched or any(a <= 0 for a in sched) or any(b >= a for a, b in zip(sched, sched[1:])):
        raise ValueError("stiffness schedule must be strictly decreasing positive values")
    if len(T) == 0 or n == 0:
        raise DegenerateGeometryError("empty mesh")
    edges = mesh_edges(source.triangles)
    _check_connected(n, edges)
    tree = cKDTree(T)

    m = len(edges)
    rows = np.repeat(np.arange(m), 2)
    cols = edges.ravel()
    vals = np.tile([-1.0, 1.0], m)
    M = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
    G = sp.diags([1.0, 1.0, 1.0, gamma])
    MG = sp.kron(M, G, format="csr")
    Vh = np.hstack([V, np.ones((n, 1))])
    D = sp.csr_matrix((Vh.ravel(), (np.repeat(np.arange(n), 4), np.arange(4 * n))), shape=(n, 4 * n))
    lm_idx = lm_pts = None
    if landmark_pairs is not None:
        pairs = list(landmark_pairs)
        if pairs:
            lm_idx = np.array([int(i) for i, _ in pairs])
            lm_pts = np.array([np.asarray(p, dtype=np.float64) for _, p in pairs]).reshape(-1, 3)
    Dl = D[lm_idx] if lm_idx is not None else None

    X = np.tile(np.vstack([np.eye(3), np.zeros((1, 3))]), (n, 1))
    report = NICPReport()
    DtD = (D.T @ D).tocsc()
    MtM = (MG.T @ MG).tocsc()
    LtL = (Dl.T @ Dl).tocsc() * landmark_weight ** 2 if Dl is not None else None

    def energy(Xc, U, alpha):
        e = alpha ** 2 * float(np.sum((MG @ Xc) ** 2)) + float(np.sum((D @ Xc - U) ** 2))
        if Dl is not None:
            e += landmark_weight ** 2 * float(np.sum((Dl @ Xc - lm_pts) ** 2))
        return e

    for alpha in sched:
        A = alpha ** 2 * MtM + DtD
        if LtL is not None:
            A = A + LtL
        try:
            lu = splu(A.tocsc())
        except RuntimeError as exc:
            raise SingularSystemError(f"registration system is singular: {exc}") from exc
        for _ in range(inner_iters):
            cur = D @ X
            _, nn = tree.query(cur)
            U = T[nn]
            before = energy(X, U, alpha)
            rhs = D.T @ U
            if Dl is not None:
                rhs = rhs + landmark_weight ** 2 * (Dl.T @ lm_pts)
            X_new = lu.solve(np.asarray(rhs))
            if not np.all(np.isfinite(X_new)):
                raise SingularSystemError("registration produced non-finite transforms")
            after = energy(X_new, U, alpha)
            report.objective.append((alpha, before, after))
            report.iterations += 1
            X = X_new
    out = D @ X
    dist, _ = tree.query(out)
    report.mean_distance = float(dist.mean())
    report.max_distance = float(dist.max())
    return TriMesh(out, source.triangles, source.per_vertex_color), report
