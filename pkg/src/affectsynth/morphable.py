"""Linear (PCA) shape and texture models."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import io
from .geometry import generalized_procrustes, similarity_align

DEFAULT_VARIANCE_FRACTION = 0.995


class ModelError(ValueError):
    pass


class ZeroVarianceError(ModelError):
    pass


class UnimputableError(ModelError):
    pass


@dataclass(frozen=True)
class LinearModel:
    """``mean + basis @ coeffs`` with column-orthonormal ``basis``.

    ``eigenvalues`` are the variances of the coefficients over the training
    set, in descending order.
    """

    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    kind: str = "shape"
    topology: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        basis = np.asarray(self.basis, dtype=np.float64).reshape(len(mean), -1)
        ev = np.asarray(self.eigenvalues, dtype=np.float64).ravel()
        if basis.shape[1] != len(ev):
            raise ModelError("basis columns and eigenvalues disagree")
        for a in (mean, basis, ev):
            a.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "eigenvalues", ev)

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return len(self.mean)

    def instance(self, coeffs) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=np.float64).ravel()
        if len(coeffs) != self.n_components:
            raise ModelError(f"expected {self.n_components} coefficients, got {len(coeffs)}")
        return self.mean + self.basis @ coeffs

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).ravel()
        if len(x) != self.dim:
            raise ModelError(f"expected a {self.dim}-vector, got {len(x)}")
        return self.basis.T @ (x - self.mean)

    def reconstruct(self, x) -> np.ndarray:
        return self.instance(self.project(x))

    def truncate(self, k: int) -> "LinearModel":
        return LinearModel(self.mean, self.basis[:, :k], self.eigenvalues[:k], self.kind,
                           self.topology, dict(self.meta))

    def to_arrays(self, prefix: str = "") -> tuple[dict, dict]:
        meta = {"kind": self.kind, "topology": self.topology, "n_components": self.n_components,
                **self.meta}
        arrays = {f"{prefix}mean": self.mean, f"{prefix}basis": self.basis,
                  f"{prefix}eigenvalues": self.eigenvalues}
        return meta, arrays

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict, prefix: str = "") -> "LinearModel":
        extra = {k: v for k, v in meta.items() if k not in ("kind", "topology", "n_components")}
        return cls(arrays[f"{prefix}mean"], arrays[f"{prefix}basis"], arrays[f"{prefix}eigenvalues"],
                   meta.get("kind", "shape"), meta.get("topology", ""), extra)

    def save(self, path) -> None:
        meta, arrays = self.to_arrays()
        io.write_container(path, {"type": "linear-model", **meta}, arrays)

    @classmethod
    def load(cls, path) -> "LinearModel":
        meta, arrays = io.read_container(path)
        meta = dict(meta)
        meta.pop("type", None)
        return cls.from_arrays(meta, arrays)


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    """Make the first clearly nonzero entry of every column positive."""
    out = basis.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        idx = np.flatnonzero(np.abs(col) > 1e-10 * np.abs(col).max())
        if idx.size and col[idx[0]] < 0:
            out[:, k] = -col
    return out


def _select_components(variances: np.ndarray, fraction: float) -> int:
    total = variances.sum()
    cum = np.cumsum(variances)
    # relative slack absorbs eigen-solver rounding at an exact boundary
    k = int(np.searchsorted(cum, fraction * total * (1 - 1e-10), side="left")) + 1
    return min(k, len(variances))


def build_pca_model(samples, variance_fraction: float = DEFAULT_VARIANCE_FRACTION,
                    kind: str = "shape", topology: str = "",
                    n_components: int | None = None) -> LinearModel:
    """PCA model from training vectors via the Gram-matrix (snapshot) method.

    Parameters
    ----------
    samples : (m, D) array or list of D-vectors, m >= 2
    variance_fraction : float
        Keep the shortest prefix of components whose cumulative variance
        reaches this fraction of the total.
    n_components : int, optional
        Fixed component count; overrides ``variance_fraction``.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2:
        X = np.stack([np.asarray(s, dtype=np.float64).ravel() for s in samples])
    m = len(X)
    if m < 2:
        raise ModelError("need at least two samples")
    if not 0 < variance_fraction <= 1:
        raise ModelError("variance_fraction must lie in (0, 1]")
    mean = X.mean(axis=0)
    Xc = X - mean
    gram = Xc @ Xc.T
    mu, V = np.linalg.eigh(gram)
    order = np.argsort(mu)[::-1]
    mu, V = mu[order], V[:, order]
    if mu[0] <= 0 or not np.isfinite(mu[0]):
        raise ZeroVarianceError("all samples are identical")
    rank = int(np.sum(mu > mu[0] * 1e-12))
    mu, V = mu[:rank], V[:, :rank]
    if n_components is not None:
        k = min(int(n_components), rank)
    else:
        k = _select_components(mu, variance_fraction)
    basis = (Xc.T @ V[:, :k]) / np.sqrt(mu[:k])
    # one re-orthonormalisation pass cleans up snapshot rounding
    basis, r = np.linalg.qr(basis)
    basis = basis * np.sign(np.diag(r))
    basis = _fix_signs(basis)
    eigenvalues = mu[:k] / (m - 1)
    meta = {"variance_fraction": float(variance_fraction), "n_samples": m,
            "retained_variance": float(mu[:k].sum() / mu.sum())}
    return LinearModel(mean, basis, eigenvalues, kind, topology, meta)


def procrustes_normalise(shapes) -> np.ndarray:
    """Remove similarity differences between corresponding shapes.

    Generalized Procrustes alignment works at unit scale; one similarity
    taking the aligned mean back onto the raw mean restores the input units,
    position and orientation.  Returns an (m, 3N) array.
    """
    raw = [np.asarray(x, dtype=np.float64).reshape(-1, 3) for x in shapes]
    aligned, mean = generalized_procrustes(raw)
    s, R, t = similarity_align(mean, np.mean(raw, axis=0))
    return np.stack([(s * a @ R.T + t).ravel() for a in aligned])


def shape_instance(model: LinearModel, p) -> np.ndarray:
    return model.instance(p)


def texture_instance(model: LinearModel, lam) -> np.ndarray:
    """Texture vector ``mean + basis @ lam``; colours are not clamped here."""
    return model.instance(lam)


def impute_missing(samples, missing, rank: int | None = None, tol: float = 1e-6,
                   max_iter: int = 50):
    """Fill missing entries by iterated low-rank PCA reconstruction.

    Parameters
    ----------
    samples : (m, D) array; values at missing positions are ignored
    missing : (m, D) boolean mask, True where the entry is unobserved
    rank : int, optional
        Rank of the PCA fit.  By default the component count explaining
        99.5% of the variance of the mean-filled data, capped at ``m - 2``.

    Returns
    -------
    completed : (m, D) array
    info : dict with ``iterations`` and final ``change``
    """
    X = np.array(samples, dtype=np.float64)
    M = np.asarray(missing, dtype=bool)
    if X.shape != M.shape:
        raise ModelError("samples and mask shapes differ")
    if not M.any():
        return X, {"iterations": 0, "change": 0.0}
    observed = ~M
    never = np.flatnonzero(~observed.any(axis=0))
    if never.size:
        raise UnimputableError(f"coordinates {never[:10].tolist()} are missing in every sample")
    col_mean = np.where(observed, X, 0.0).sum(0) / observed.sum(0)
    X[M] = np.broadcast_to(col_mean, X.shape)[M]
    m = len(X)
    if rank is None:
        Xc = X - X.mean(0)
        s = np.linalg.svd(Xc, compute_uv=False) ** 2
        rank = _select_components(s, DEFAULT_VARIANCE_FRACTION) if s.sum() > 0 else 0
        rank = max(0, min(rank, m - 2))
    change = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        mean = X.mean(0)
        Xc = X - mean
        if rank > 0:
            U, S, Vt = np.linalg.svd(Xc, full_matrices=False)
            recon = mean + (U[:, :rank] * S[:rank]) @ Vt[:rank]
        else:
            recon = np.broadcast_to(mean, X.shape)
        new_fill = recon[M]
        change = float(np.max(np.abs(new_fill - X[M])))
        X[M] = new_fill
        if change < tol:
            break
    return X, {"iterations": it, "change": change, "rank": rank}


@dataclass(frozen=True)
class MorphableModel:
    """Shape model, texture model and the shared triangulation."""

    shape: LinearModel
    texture: LinearModel
    triangles: np.ndarray
    landmark_vertex_map: np.ndarray | None = None

    @property
    def n_vertices(self) -> int:
        return self.shape.dim // 3

    def save(self, path) -> None:
        ms, arrays = self.shape.to_arrays("shape_")
        mt, at = self.texture.to_arrays("texture_")
        arrays.update(at)
        arrays["triangles"] = np.asarray(self.triangles, dtype=np.int64)
        if self.landmark_vertex_map is not None:
            arrays["landmark_vertex_map"] = np.asarray(self.landmark_vertex_map, dtype=np.int64)
        io.write_container(path, {"type": "morphable-model", "shape": ms, "texture": mt}, arrays)

    @classmethod
    def load(cls, path) -> "MorphableModel":
        meta, arrays = io.read_container(path)
        if meta.get("type") != "morphable-model":
            raise io.FormatError(f"{path} holds a {meta.get('type')!r}, not a morphable model")
        return cls(LinearModel.from_arrays(meta["shape"], arrays, "shape_"),
                   LinearModel.from_arrays(meta["texture"], arrays, "texture_"),
                   arrays["triangles"], arrays.get("landmark_vertex_map"))
