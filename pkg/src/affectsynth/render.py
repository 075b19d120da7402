"""Z-buffered perspective rasteriser and gradient-domain (Poisson) compositing.

Images are H x W x 3 float arrays with values in [0, 1].
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import cg

from . import kernels
from .geometry import CameraParams, TriMesh, view_transform


class RenderError(ValueError):
    pass


class BlendWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RenderOutput:
    image: np.ndarray
    mask: np.ndarray
    zbuffer: np.ndarray
    triangle_id: np.ndarray
    barycentric: np.ndarray


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise RenderError(f"expected a non-empty H x W x 3 image, got shape {image.shape}")
    return image


def screen_coordinates(vertices: np.ndarray, cam: CameraParams):
    """Pixel coordinates and view depth; vertices behind the camera get NaN pixels."""
    v = view_transform(vertices, cam)
    z = v[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = np.asarray(cam.principal_point) + cam.f * v[:, :2] / z[:, None]
    xy[z <= 0] = np.nan
    return xy, z


def rasterize_buffers(mesh: TriMesh, cam: CameraParams, width: int, height: int,
                      cull_backfaces: bool = True):
    """Triangle id, perspective-correct barycentrics and depth per pixel."""
    if width <= 0 or height <= 0:
        raise RenderError("zero-area image")
    if len(mesh.triangles) == 0:
        return (np.full((height, width), -1, dtype=np.int64), np.zeros((height, width, 3)),
                np.full((height, width), np.inf))
    xy, z = screen_coordinates(mesh.vertices, cam)
    return kernels.rasterize_triangles(xy, z, mesh.triangles, width, height, cull_backfaces)


def rasterize(mesh: TriMesh, colors, cam: CameraParams, background: np.ndarray,
              cull_backfaces: bool = True) -> RenderOutput:
    """Render per-vertex colours over ``background``.

    The nearest triangle wins each pixel; colours are interpolated with
    perspective-correct barycentrics.  Uncovered pixels are copied from the
    background unchanged.
    """
    background = check_image(background)
    h, w = background.shape[:2]
    tri_id, bary, zbuf = rasterize_buffers(mesh, cam, w, h, cull_backfaces)
    image = background.copy()
    mask = tri_id >= 0
    if mask.any():
        colors = np.asarray(colors, dtype=np.float64).reshape(mesh.n_vertices, 3)
        corners = mesh.triangles[tri_id[mask]]
        b = bary[mask]
        image[mask] = (b[:, 0:1] * colors[corners[:, 0]] + b[:, 1:2] * colors[corners[:, 1]]
                       + b[:, 2:3] * colors[corners[:, 2]])
    return RenderOutput(image, mask, zbuf, tri_id, bary)


# ---------------------------------------------------------------------------
# Poisson blending


def _laplacian_system(interior: np.ndarray):
    """5-point Laplacian restricted to the interior pixels (Dirichlet outside)."""
    idx = -np.ones(interior.shape, dtype=np.int64)
    rows, cols = np.nonzero(interior)
    n = len(rows)
    idx[rows, cols] = np.arange(n)
    data = [np.full(n, 4.0)]
    ii = [np.arange(n)]
    jj = [np.arange(n)]
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = idx[rows + dr, cols + dc]
        inside = nb >= 0
        data.append(np.full(inside.sum(), -1.0))
        ii.append(np.flatnonzero(inside))
        jj.append(nb[inside])
    A = sp.csr_matrix((np.concatenate(data), (np.concatenate(ii), np.concatenate(jj))), shape=(n, n))
    return A, rows, cols


def poisson_blend(source: np.ndarray, target: np.ndarray, mask: np.ndarray,
                  mixed_gradients: bool = False, tol: float = 1e-8, clamp: bool = True):
    """Composite ``source`` into ``target`` over ``mask`` in the gradient domain.

    Solves, per channel, for ``x`` on the mask interior with the 5-point
    Laplacian, guidance field from the source gradients and Dirichlet values
    from the target just outside the mask.  The unknown is written as
    ``source + delta`` so that ``delta`` is harmonic with boundary values
    ``target - source``; when those vanish the source is returned exactly.

    Returns
    -------
    image : (H, W, 3) blended result (clamped to [0, 1] unless ``clamp=False``)
    info : dict with ``residual`` (max-abs of ``A x - b`` over all channels),
        ``iterations`` and ``empty`` (True when the mask had no interior)
    """
    source = check_image(source)
    target = check_image(target)
    mask = np.asarray(mask, dtype=bool)
    if source.shape != target.shape or mask.shape != target.shape[:2]:
        raise RenderError("source, target and mask shapes differ")
    h, w = mask.shape
    # pad so the interior never touches the image border
    pad = 1
    M = np.zeros((h + 2 * pad, w + 2 * pad), dtype=bool)
    M[pad:-pad, pad:-pad] = mask
    S = np.pad(source, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    T = np.pad(target, ((pad, pad), (pad, pad), (0, 0)), mode="edge")

    if not M.any():
        warnings.warn("poisson_blend: mask has no interior; returning target", BlendWarning)
        return target.copy(), {"residual": 0.0, "iterations": 0, "empty": True}

    A, rows, cols = _laplacian_system(M)
    n = len(rows)
    diag_inv = 1.0 / A.diagonal()
    precond = sp.diags(diag_inv)
    out = T.copy()
    worst = 0.0
    iters = 0
    for ch in range(3):
        s = S[:, :, ch]
        t = T[:, :, ch]
        if mixed_gradients:
            # guidance: per-edge pick the larger of source/target differences
            guide = np.zeros(n)
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                gs = s[rows, cols] - s[rows + dr, cols + dc]
                gt = t[rows, cols] - t[rows + dr, cols + dc]
                guide += np.where(np.abs(gs) > np.abs(gt), gs, gt)
            base = s
        else:
            guide = None
            base = s
        # boundary term: delta = target - source on neighbours outside the mask
        b = np.zeros(n)
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = rows + dr, cols + dc
            outside = ~M[rr, cc]
            b[outside] += (t[rr[outside], cc[outside]] - s[rr[outside], cc[outside]])
        if guide is not None:
            # rewrite the mixed guidance relative to the source Laplacian
            lap_s = 4 * s[rows, cols] - s[rows - 1, cols] - s[rows + 1, cols] - s[rows, cols - 1] - s[rows, cols + 1]
            b += guide - lap_s
        if not np.any(b):
            delta = np.zeros(n)
        else:
            count = [0]

            def _cb(_):
                count[0] += 1

            delta, status = cg(A, b, rtol=tol, atol=0.0, maxiter=10 * n, M=precond, callback=_cb)
            iters = max(iters, count[0])
            res = np.max(np.abs(A @ delta - b))
            if res >= 1e-6:
                # tighten once; CG's relative 2-norm criterion can miss the max-norm target
                delta, status = cg(A, b, x0=delta, rtol=tol * 1e-3, atol=0.0, maxiter=10 * n, M=precond)
        worst = max(worst, float(np.max(np.abs(A @ delta - b))) if n else 0.0)
        out[rows, cols, ch] = base[rows, cols] + delta
    out = out[pad:-pad, pad:-pad]
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out, {"residual": worst, "iterations": iters, "empty": False}
