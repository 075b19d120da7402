"""Sparse expression components learned from expression difference vectors.

Each column of ``D`` is an expressive mesh minus the same subject's neutral
mesh.  We look for ``D ~ B @ C`` where ``B`` (3N x h) holds deformation
components and ``C`` (h x m) holds per-sample activations, minimising

    ||D - B C||_F^2 + w * sum_k ||C[k, :]||_2 + sum_k ||C[k, :]||^2 * sum_i rho_i B[i, k]^2

The group norm on the rows of ``C`` switches whole components off as ``w``
grows.  The last term is an optional per-entry locality penalty (``rho``,
default zero) that discourages deformation where ``rho`` is large.  It is
invariant to rescaling ``B[:, k] -> s B[:, k]``, ``C[k] -> C[k] / s``, which
is what keeps the alternation monotone.

Optimisation alternates exact block updates:

* row ``k`` of ``C``: closed-form group shrinkage of the least-squares row;
* column ``k`` of ``B``: per-entry least squares clipped to the constraint
  box, then scaled up so the column attains its bound, with ``C[k]`` scaled
  down by the same factor (``B C`` unchanged, the penalty can only drop).

Constraints per column: ``"two-sided"`` (``max |B_k| = 1``), ``"one-sided"``
(``B_k >= 0`` and ``max B_k = 1``) or ``"none"`` (plain least squares).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import io

CONSTRAINTS = ("two-sided", "one-sided", "none")
DEFAULT_SPARSITY = 5.0
MAX_ALTERNATIONS = 200
REL_TOL = 1e-7


class BlendshapeError(ValueError):
    pass


@dataclass(frozen=True)
class BlendshapeModel:
    components: np.ndarray
    constraint: str = "two-sided"
    sparsity_weight: float = DEFAULT_SPARSITY
    topology: str = ""
    objective_trace: tuple = field(default=(), compare=False)

    def __post_init__(self):
        B = np.asarray(self.components, dtype=np.float64)
        if B.ndim != 2:
            raise BlendshapeError("components must be a 3N x h matrix")
        if not np.all(np.isfinite(B)):
            raise BlendshapeError("components contain non-finite values")
        if self.constraint not in CONSTRAINTS:
            raise BlendshapeError(f"unknown constraint {self.constraint!r}")
        B = B.copy()
        B.setflags(write=False)
        object.__setattr__(self, "components", B)
        object.__setattr__(self, "objective_trace", tuple(float(x) for x in self.objective_trace))

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    def save(self, path) -> None:
        io.write_container(path, {"type": "linear-model", "kind": "blendshape",
                                  "constraint": self.constraint,
                                  "sparsity_weight": self.sparsity_weight,
                                  "topology": self.topology,
                                  "objective_trace": list(self.objective_trace)},
                           {"components": self.components})

    @classmethod
    def load(cls, path) -> "BlendshapeModel":
        meta, arrays = io.read_container(path)
        if meta.get("kind") != "blendshape":
            raise io.FormatError(f"{path} does not hold a blendshape model")
        return cls(arrays["components"], meta["constraint"], meta["sparsity_weight"],
                   meta.get("topology", ""), meta.get("objective_trace", ()))


def project_column(b: np.ndarray, constraint: str) -> np.ndarray:
    """Map a column onto its constraint set by sign/scale normalisation.

    Idempotent; a column with nothing left after clipping comes back as zeros.
    """
    b = np.asarray(b, dtype=np.float64)
    if constraint == "none":
        return b.copy()
    if constraint == "one-sided":
        b = np.maximum(b, 0.0)
        m = b.max() if b.size else 0.0
    else:
        m = np.abs(b).max() if b.size else 0.0
    return b / m if m > 0 else np.zeros_like(b)


def _clip(b: np.ndarray, constraint: str) -> np.ndarray:
    if constraint == "two-sided":
        return np.clip(b, -1.0, 1.0)
    if constraint == "one-sided":
        return np.clip(b, 0.0, 1.0)
    return b


def objective(D, B, C, sparsity_weight: float, rho=None) -> float:
    R = D - B @ C
    val = float(np.sum(R * R)) + sparsity_weight * float(np.sum(np.linalg.norm(C, axis=1)))
    if rho is not None:
        val += float(np.sum(np.sum(C * C, axis=1) * (rho @ (B * B))))
    return val


def _init(D: np.ndarray, h: int, constraint: str):
    U, s, Vt = np.linalg.svd(D, full_matrices=False)
    B = np.zeros((D.shape[0], h))
    for k in range(h):
        u = U[:, k] if k < U.shape[1] else np.zeros(D.shape[0])
        if u.size and u[np.argmax(np.abs(u))] < 0:
            u = -u
        b = project_column(u, constraint)
        if not np.any(b):
            b = project_column(np.abs(u), constraint)
        B[:, k] = b
    return B, B.T @ D


def build_blendshapes(D, h: int, sparsity_weight: float = DEFAULT_SPARSITY,
                      constraint: str = "two-sided", max_alternations: int = MAX_ALTERNATIONS,
                      locality=None, topology: str = "", tol: float = REL_TOL):
    """Learn ``h`` sparse deformation components from the 3N x m matrix ``D``.

    Parameters
    ----------
    locality : (3N,) nonnegative array, optional
        Per-entry penalty ``rho``; zero everywhere reproduces the plain
        objective.

    Returns
    -------
    model : BlendshapeModel (its ``objective_trace`` starts at the initial
        objective and has one entry per alternation)
    C : (h, m) activations
    """
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2:
        raise BlendshapeError("D must be a 3N x m matrix")
    n, m = D.shape
    if not 1 <= h <= m:
        raise BlendshapeError(f"need 1 <= h <= m, got h={h}, m={m}")
    if constraint not in CONSTRAINTS:
        raise BlendshapeError(f"unknown constraint {constraint!r}")
    if sparsity_weight < 0:
        raise BlendshapeError("sparsity_weight must be nonnegative")
    if not np.all(np.isfinite(D)):
        raise BlendshapeError("D contains non-finite values")
    rho = None
    if locality is not None:
        rho = np.asarray(locality, dtype=np.float64).ravel()
        if rho.shape != (n,) or np.any(rho < 0):
            raise BlendshapeError("locality must be a nonnegative 3N vector")
        if not np.any(rho):
            rho = None

    if not np.any(D):
        B = np.zeros((n, h))
        B[np.arange(h) % max(n, 1), np.arange(h)] = 1.0 if n else 0.0
        model = BlendshapeModel(B, constraint, sparsity_weight, topology, (0.0,))
        return model, np.zeros((h, m))

    B, C = _init(D, h, constraint)
    slack = 1e-12 * float(np.sum(D * D))  # rounding allowance for the monotonicity check
    trace = [objective(D, B, C, sparsity_weight, rho)]
    for _ in range(max_alternations):
        R = D - B @ C
        # C-step: exact minimisation over each row in turn
        for k in range(h):
            b = B[:, k]
            R += np.outer(b, C[k])
            denom = float(b @ b) + (float(rho @ (b * b)) if rho is not None else 0.0)
            if denom <= 0:
                C[k] = 0.0
                continue
            c_hat = (b @ R) / denom
            norm = np.linalg.norm(c_hat)
            shrink = 0.0 if norm == 0 else max(0.0, 1.0 - sparsity_weight / (2.0 * denom * norm))
            C[k] = shrink * c_hat
            R -= np.outer(b, C[k])
        # B-step: exact minimisation over each column in the constraint box
        for k in range(h):
            ck = C[k]
            cc = float(ck @ ck)
            if cc == 0:
                continue
            R += np.outer(B[:, k], ck)
            b = (R @ ck) / cc
            if rho is not None:
                b = b / (1.0 + rho)
            b = _clip(b, constraint)
            if constraint != "none":
                peak = np.abs(b).max() if constraint == "two-sided" else b.max()
                if peak > 0:
                    b = b / peak
                    C[k] = ck * peak
                else:
                    # nothing admissible survives: the component drops out
                    C[k] = 0.0
                    b = B[:, k]
            B[:, k] = b
            R -= np.outer(B[:, k], C[k])
        val = objective(D, B, C, sparsity_weight, rho)
        prev = trace[-1]
        if val > prev + slack:
            raise AssertionError(f"blendshape objective increased: {prev!r} -> {val!r}")
        trace.append(val)
        if (prev - val) <= tol * prev or val <= slack:
            break
    return BlendshapeModel(B, constraint, sparsity_weight, topology, trace), C


def difference_matrix(expressive, neutrals) -> np.ndarray:
    """Stack ``expressive[j] - neutrals[j]`` (flattened) as columns."""
    cols = [np.asarray(e, dtype=np.float64).ravel() - np.asarray(s, dtype=np.float64).ravel()
            for e, s in zip(expressive, neutrals, strict=True)]
    return np.stack(cols, axis=1)


def reconstruct(model: BlendshapeModel, c, neutral) -> np.ndarray:
    """``neutral + B c`` as a flat 3N vector."""
    c = np.asarray(c, dtype=np.float64).ravel()
    neutral = np.asarray(neutral, dtype=np.float64).ravel()
    if len(c) != model.n_components or len(neutral) != model.components.shape[0]:
        raise BlendshapeError("coefficient or neutral length does not match the model")
    return neutral + model.components @ c


def sparsity(C, eps: float = 1e-8) -> float:
    """Fraction of activations with magnitude below ``eps``."""
    C = np.asarray(C)
    return float(np.mean(np.abs(C) < eps)) if C.size else 0.0
