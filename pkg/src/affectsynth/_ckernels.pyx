# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``; outputs match bitwise."""
import numpy as np
cimport numpy as cnp
from libc.math cimport isfinite, fabs, INFINITY, llrint

cnp.import_array()

DEF SUBPIXEL = 256
DEF MAX_COORD = 4194304  # 1 << 22


cdef inline bint _top_left(long long dx, long long dy) nogil:
    return dy < 0 or (dy == 0 and dx > 0)


cdef inline long long _floor_div(long long a, long long b) nogil:
    cdef long long q = a / b
    if (a % b != 0) and ((a < 0) != (b < 0)):
        q -= 1
    return q


def rasterize_triangles(xy, z, triangles, int width, int height, bint cull_backfaces=True):
    cdef const double[:, ::1] cxy = np.ascontiguousarray(xy, dtype=np.float64)
    cdef const double[::1] cz = np.ascontiguousarray(z, dtype=np.float64)
    cdef const long long[:, ::1] tris = np.ascontiguousarray(triangles, dtype=np.int64)

    tri_id_arr = np.full((height, width), -1, dtype=np.int64)
    bary_arr = np.zeros((height, width, 3), dtype=np.float64)
    zbuf_arr = np.full((height, width), np.inf, dtype=np.float64)
    cdef long long[:, ::1] tri_id = tri_id_arr
    cdef double[:, :, ::1] bary = bary_arr
    cdef double[:, ::1] zbuf = zbuf_arr

    cdef Py_ssize_t nv = cxy.shape[0]
    ok_arr = np.zeros(nv, dtype=np.uint8)
    fx_arr = np.zeros(nv, dtype=np.int64)
    fy_arr = np.zeros(nv, dtype=np.int64)
    cdef unsigned char[::1] ok = ok_arr
    cdef long long[::1] fx = fx_arr
    cdef long long[::1] fy = fy_arr
    cdef Py_ssize_t v
    for v in range(nv):
        if isfinite(cxy[v, 0]) and isfinite(cxy[v, 1]) and isfinite(cz[v]) \
                and fabs(cxy[v, 0]) < MAX_COORD and fabs(cxy[v, 1]) < MAX_COORD:
            ok[v] = 1
            fx[v] = llrint(cxy[v, 0] * SUBPIXEL)
            fy[v] = llrint(cxy[v, 1] * SUBPIXEL)

    cdef Py_ssize_t t, r, c
    cdef long long i0, i1, i2, x0, y0, x1, y1, x2, y2, tmp, area
    cdef long long xmin, xmax, ymin, ymax, px, py, e_a, e_b, e_c
    cdef int sa, sb, sc
    cdef long long idx[3]
    cdef double za, zb, zc, fa, la, lb, lc, s, depth
    cdef bint tl_a, tl_b, tl_c, in_a, in_b, in_c

    with nogil:
        for t in range(tris.shape[0]):
            i0 = tris[t, 0]
            i1 = tris[t, 1]
            i2 = tris[t, 2]
            if not (ok[i0] and ok[i1] and ok[i2]):
                continue
            if cz[i0] <= 0 or cz[i1] <= 0 or cz[i2] <= 0:
                continue
            x0 = fx[i0]; y0 = fy[i0]
            x1 = fx[i1]; y1 = fy[i1]
            x2 = fx[i2]; y2 = fy[i2]
            area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
            if area == 0:
                continue
            if area > 0 and cull_backfaces:
                continue
            sa = 0; sb = 1; sc = 2
            if area < 0:
                tmp = x1; x1 = x2; x2 = tmp
                tmp = y1; y1 = y2; y2 = tmp
                sb = 2; sc = 1
                area = -area
            idx[0] = i0; idx[1] = i1; idx[2] = i2
            za = cz[idx[sa]]
            zb = cz[idx[sb]]
            zc = cz[idx[sc]]

            xmin = -_floor_div(-min(x0, min(x1, x2)), SUBPIXEL)
            if xmin < 0:
                xmin = 0
            xmax = _floor_div(max(x0, max(x1, x2)), SUBPIXEL)
            if xmax > width - 1:
                xmax = width - 1
            ymin = -_floor_div(-min(y0, min(y1, y2)), SUBPIXEL)
            if ymin < 0:
                ymin = 0
            ymax = _floor_div(max(y0, max(y1, y2)), SUBPIXEL)
            if ymax > height - 1:
                ymax = height - 1
            if xmin > xmax or ymin > ymax:
                continue

            tl_a = _top_left(x2 - x1, y2 - y1)
            tl_b = _top_left(x0 - x2, y0 - y2)
            tl_c = _top_left(x1 - x0, y1 - y0)
            fa = <double>area
            for r in range(ymin, ymax + 1):
                py = r * SUBPIXEL
                for c in range(xmin, xmax + 1):
                    px = c * SUBPIXEL
                    e_a = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
                    in_a = e_a > 0 or (e_a == 0 and tl_a)
                    if not in_a:
                        continue
                    e_b = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
                    in_b = e_b > 0 or (e_b == 0 and tl_b)
                    if not in_b:
                        continue
                    e_c = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
                    in_c = e_c > 0 or (e_c == 0 and tl_c)
                    if not in_c:
                        continue
                    la = (<double>e_a / fa) / za
                    lb = (<double>e_b / fa) / zb
                    lc = (<double>e_c / fa) / zc
                    s = (la + lb) + lc
                    depth = 1.0 / s
                    if depth < zbuf[r, c]:
                        zbuf[r, c] = depth
                        tri_id[r, c] = t
                        bary[r, c, sa] = la / s
                        bary[r, c, sb] = lb / s
                        bary[r, c, sc] = lc / s
    return tri_id_arr, bary_arr, zbuf_arr


cdef void _row_min(double[:, ::1] D, unsigned char[::1] active, Py_ssize_t r,
                   double* best, Py_ssize_t* arg) nogil:
    cdef Py_ssize_t c, n = D.shape[0]
    best[0] = INFINITY
    arg[0] = -1
    for c in range(r + 1, n):
        if active[c] and (D[r, c] < best[0] or arg[0] < 0):
            best[0] = D[r, c]
            arg[0] = c


def ward_merges(points, Py_ssize_t n_clusters):
    X = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0]
    diff = X[:, None, :] - X[None, :, :]
    D_arr = np.ascontiguousarray((diff * diff).sum(-1))
    cdef double[:, ::1] D = D_arr
    size_arr = np.ones(n, dtype=np.float64)
    active_arr = np.ones(n, dtype=np.uint8)
    rowmin_arr = np.full(n, np.inf)
    rowarg_arr = np.full(n, -1, dtype=np.intp)
    cdef double[::1] size = size_arr
    cdef unsigned char[::1] active = active_arr
    cdef double[::1] rowmin = rowmin_arr
    cdef Py_ssize_t[::1] rowarg = rowarg_arr
    cdef Py_ssize_t n_merge = n - n_clusters
    merges_arr = np.zeros((n_merge, 2), dtype=np.int64)
    heights_arr = np.zeros(n_merge, dtype=np.float64)
    cdef long long[:, ::1] merges = merges_arr
    cdef double[::1] heights = heights_arr

    cdef Py_ssize_t step, r, k, i, j, lo, hi
    cdef double best, dij, ni, nj, nk, d_ik, d_jk, new
    cdef Py_ssize_t arg

    with nogil:
        for r in range(n):
            _row_min(D, active, r, &rowmin[r], &rowarg[r])
        for step in range(n_merge):
            i = -1
            best = INFINITY
            for r in range(n):
                if active[r] and rowarg[r] >= 0 and (i < 0 or rowmin[r] < best):
                    best = rowmin[r]
                    i = r
            j = rowarg[i]
            dij = D[i, j]
            merges[step, 0] = i
            merges[step, 1] = j
            heights[step] = dij
            ni = size[i]
            nj = size[j]
            for k in range(n):
                if not active[k] or k == i or k == j:
                    continue
                nk = size[k]
                d_ik = D[k, i] if k < i else D[i, k]
                d_jk = D[k, j] if k < j else D[j, k]
                new = ((ni + nk) * d_ik + (nj + nk) * d_jk - nk * dij) / ((ni + nj) + nk)
                if k < i:
                    D[k, i] = new
                else:
                    D[i, k] = new
            active[j] = 0
            size[i] = ni + nj
            _row_min(D, active, i, &rowmin[i], &rowarg[i])
            for k in range(j):
                if not active[k] or k == i:
                    continue
                if k < i:
                    if rowarg[k] == i or rowarg[k] == j:
                        _row_min(D, active, k, &rowmin[k], &rowarg[k])
                    elif D[k, i] < rowmin[k] or (D[k, i] == rowmin[k] and i < rowarg[k]):
                        rowmin[k] = D[k, i]
                        rowarg[k] = i
                elif rowarg[k] == j:
                    _row_min(D, active, k, &rowmin[k], &rowarg[k])
    return merges_arr, heights_arr
