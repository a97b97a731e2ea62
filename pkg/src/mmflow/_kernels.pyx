# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels; same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


cdef inline double _dot(double x0, double x1, double x2, double y0, double y1, double y2) nogil:
    return x0 * y0 + x1 * y1 + x2 * y2


cdef double _tri_dist(double px, double py, double pz, const double[:, ::1] tri) nogil:
    cdef double ax = tri[0, 0], ay = tri[0, 1], az = tri[0, 2]
    cdef double bx = tri[1, 0], by = tri[1, 1], bz = tri[1, 2]
    cdef double cx = tri[2, 0], cy = tri[2, 1], cz = tri[2, 2]
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double qx, qy, qz, t, v, w, denom
    cdef double d1 = _dot(abx, aby, abz, px - ax, py - ay, pz - az)
    cdef double d2 = _dot(acx, acy, acz, px - ax, py - ay, pz - az)
    cdef double d3 = _dot(abx, aby, abz, px - bx, py - by, pz - bz)
    cdef double d4 = _dot(acx, acy, acz, px - bx, py - by, pz - bz)
    cdef double d5 = _dot(abx, aby, abz, px - cx, py - cy, pz - cz)
    cdef double d6 = _dot(acx, acy, acz, px - cx, py - cy, pz - cz)
    cdef double vc = d1 * d4 - d3 * d2
    cdef double vb = d5 * d2 - d1 * d6
    cdef double va = d3 * d6 - d5 * d4
    if d1 <= 0 and d2 <= 0:
        qx, qy, qz = ax, ay, az
    elif d3 >= 0 and d4 <= d3:
        qx, qy, qz = bx, by, bz
    elif vc <= 0 and d1 >= 0 and d3 <= 0:
        t = d1 / (d1 - d3)
        qx, qy, qz = ax + t * abx, ay + t * aby, az + t * abz
    elif d6 >= 0 and d5 <= d6:
        qx, qy, qz = cx, cy, cz
    elif vb <= 0 and d2 >= 0 and d6 <= 0:
        t = d2 / (d2 - d6)
        qx, qy, qz = ax + t * acx, ay + t * acy, az + t * acz
    elif va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx, qy, qz = bx + t * (cx - bx), by + t * (cy - by), bz + t * (cz - bz)
    else:
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        qx = ax + abx * v + acx * w
        qy = ay + aby * v + acy * w
        qz = az + abz * v + acz * w
    return sqrt((px - qx) * (px - qx) + (py - qy) * (py - qy) + (pz - qz) * (pz - qz))


def point_triangle_distances(points, triangles):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, :, ::1] F = np.ascontiguousarray(triangles, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], nf = F.shape[0], i, f
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] O = out
    cdef double best, d
    with nogil:
        for i in range(n):
            best = INFINITY
            for f in range(nf):
                d = _tri_dist(P[i, 0], P[i, 1], P[i, 2], F[f])
                if d < best:
                    best = d
            O[i] = best
    return out


def min_distances(queries, points):
    cdef const double[:, ::1] Q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t nq = Q.shape[0], npt = P.shape[0], dim = Q.shape[1], i, j, k
    out = np.empty(nq, dtype=np.float64)
    cdef double[::1] O = out
    cdef double best, s, diff
    with nogil:
        for i in range(nq):
            best = INFINITY
            for j in range(npt):
                s = 0.0
                for k in range(dim):
                    diff = Q[i, k] - P[j, k]
                    s = s + diff * diff
                if s < best:
                    best = s
            O[i] = sqrt(best)
    return out


def mean_pairwise_distance(a, b):
    cdef const double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t na = A.shape[0], nb = B.shape[0], dim = A.shape[1], i, j, k
    cdef double total = 0.0, row, s, diff
    with nogil:
        for i in range(na):
            row = 0.0
            for j in range(nb):
                s = 0.0
                for k in range(dim):
                    diff = A[i, k] - B[j, k]
                    s = s + diff * diff
                row = row + sqrt(s)
            total = total + row
    return total / (na * nb)
