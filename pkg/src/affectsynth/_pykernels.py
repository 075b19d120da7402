"""Pure-Python (numpy) implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors them loop for
loop and must produce bitwise-identical output.
"""
import numpy as np

SUBPIXEL = 256
# projected coordinates beyond this many pixels are not rasterised
MAX_COORD = 1 << 22


def _is_top_left(dx, dy):
    return (dy < 0) or (dy == 0 and dx > 0)


def rasterize_triangles(xy, z, triangles, width, height, cull_backfaces=True):
    """Z-buffered coverage of projected triangles.

    Parameters
    ----------
    xy : (V, 2) float64 pixel coordinates (pixel centres on integers)
    z : (V,) float64 view-space depth
    triangles : (M, 3) int64
    width, height : int
    cull_backfaces : bool
        Skip triangles whose image-space winding is non-negative
        (outward normal pointing away from the camera).

    Returns
    -------
    tri_id : (H, W) int64, -1 where nothing was drawn
    bary : (H, W, 3) float64 perspective-correct weights per triangle corner
    zbuf : (H, W) float64, +inf where nothing was drawn
    """
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    tris = np.ascontiguousarray(triangles, dtype=np.int64)
    tri_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    zbuf = np.full((height, width), np.inf, dtype=np.float64)

    finite = np.all(np.isfinite(xy), axis=1) & np.isfinite(z)
    fx = np.zeros(len(xy), dtype=np.int64)
    fy = np.zeros(len(xy), dtype=np.int64)
    ok = finite & (np.abs(xy[:, 0]) < MAX_COORD) & (np.abs(xy[:, 1]) < MAX_COORD)
    fx[ok] = np.rint(xy[ok, 0] * SUBPIXEL).astype(np.int64)
    fy[ok] = np.rint(xy[ok, 1] * SUBPIXEL).astype(np.int64)

    for t in range(len(tris)):
        i0, i1, i2 = int(tris[t, 0]), int(tris[t, 1]), int(tris[t, 2])
        if not (ok[i0] and ok[i1] and ok[i2]):
            continue
        if z[i0] <= 0 or z[i1] <= 0 or z[i2] <= 0:
            continue
        x0, y0, x1, y1, x2, y2 = int(fx[i0]), int(fy[i0]), int(fx[i1]), int(fy[i1]), int(fx[i2]), int(fy[i2])
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0:
            continue
        if area > 0 and cull_backfaces:
            continue
        # corner slots: a/b/c map back to the triangle's own 0/1/2 order
        sa, sb, sc = 0, 1, 2
        if area < 0:
            x1, y1, x2, y2 = x2, y2, x1, y1
            sb, sc = 2, 1
            area = -area
        za = z[(i0, i1, i2)[sa]]
        zb = z[(i0, i1, i2)[sb]]
        zc = z[(i0, i1, i2)[sc]]

        xmin = max(0, -((-min(x0, x1, x2)) // SUBPIXEL))
        xmax = min(width - 1, max(x0, x1, x2) // SUBPIXEL)
        ymin = max(0, -((-min(y0, y1, y2)) // SUBPIXEL))
        ymax = min(height - 1, max(y0, y1, y2) // SUBPIXEL)
        if xmin > xmax or ymin > ymax:
            continue

        px = np.arange(xmin, xmax + 1, dtype=np.int64) * SUBPIXEL
        py = np.arange(ymin, ymax + 1, dtype=np.int64)[:, None] * SUBPIXEL
        # edge functions opposite each corner
        e_a = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        e_b = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
        e_c = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        in_a = (e_a > 0) | ((e_a == 0) & _is_top_left(x2 - x1, y2 - y1))
        in_b = (e_b > 0) | ((e_b == 0) & _is_top_left(x0 - x2, y0 - y2))
        in_c = (e_c > 0) | ((e_c == 0) & _is_top_left(x1 - x0, y1 - y0))
        inside = in_a & in_b & in_c
        if not inside.any():
            continue
        rows, cols = np.nonzero(inside)
        fa = area
        la = (e_a[rows, cols] / fa) / za
        lb = (e_b[rows, cols] / fa) / zb
        lc = (e_c[rows, cols] / fa) / zc
        s = (la + lb) + lc
        depth = 1.0 / s
        gy = rows + ymin
        gx = cols + xmin
        win = depth < zbuf[gy, gx]
        if not win.any():
            continue
        gy, gx = gy[win], gx[win]
        zbuf[gy, gx] = depth[win]
        tri_id[gy, gx] = t
        w = np.empty((win.sum(), 3))
        w[:, sa] = la[win] / s[win]
        w[:, sb] = lb[win] / s[win]
        w[:, sc] = lc[win] / s[win]
        bary[gy, gx] = w
    return tri_id, bary, zbuf


def ward_merges(points, n_clusters):
    """Greedy Ward agglomeration with the Lance-Williams update.

    Cluster ids are the smallest original index of their members; a merge of
    ``i < j`` keeps id ``i``.  At each step the pair with minimal
    dissimilarity is merged, ties going to the lexicographically smallest
    ``(i, j)``.  The dissimilarity is twice the increase in within-cluster
    sum of squares.

    Returns
    -------
    merges : (n - n_clusters, 2) int64 pairs ``(i, j)`` in merge order
    heights : (n - n_clusters,) float64 merge dissimilarities
    """
    X = np.ascontiguousarray(points, dtype=np.float64)
    n = len(X)
    diff = X[:, None, :] - X[None, :, :]
    D = (diff * diff).sum(-1)
    iu = np.tril_indices(n)
    D[iu] = np.inf
    size = np.ones(n, dtype=np.float64)
    active = np.ones(n, dtype=bool)
    n_merge = n - n_clusters
    merges = np.zeros((n_merge, 2), dtype=np.int64)
    heights = np.zeros(n_merge, dtype=np.float64)
    for step in range(n_merge):
        flat = int(np.argmin(D))
        i, j = divmod(flat, n)
        dij = D[i, j]
        merges[step] = (i, j)
        heights[step] = dij
        ni, nj = size[i], size[j]
        others = np.flatnonzero(active)
        others = others[(others != i) & (others != j)]
        nk = size[others]
        d_ik = np.where(others < i, D[others, i], D[i, others])
        d_jk = np.where(others < j, D[others, j], D[j, others])
        new = ((ni + nk) * d_ik + (nj + nk) * d_jk - nk * dij) / ((ni + nj) + nk)
        lo = others < i
        D[others[lo], i] = new[lo]
        D[i, others[~lo]] = new[~lo]
        D[j, :] = np.inf
        D[:, j] = np.inf
        active[j] = False
        size[i] = ni + nj
    return merges, heights
