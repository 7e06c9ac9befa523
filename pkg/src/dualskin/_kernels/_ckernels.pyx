# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops in :mod:`._pykernels`."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, ceil, INFINITY

cnp.import_array()

DEF SS = 4


def pcg_csr(const long[::1] indptr, const int[::1] indices, const double[::1] data,
            const double[::1] b, const double[::1] x0, const double[::1] diag_inv,
            double tol, long maxiter):
    cdef Py_ssize_t n = b.shape[0], i, k
    cdef double[::1] x = np.array(x0, dtype=np.float64, copy=True)
    cdef double[::1] r = np.empty(n)
    cdef double[::1] z = np.empty(n)
    cdef double[::1] p = np.empty(n)
    cdef double[::1] ap = np.empty(n)
    cdef double s, bnorm = 0.0, rnorm, rz, rz_new, alpha, beta, pap
    cdef long it = 0
    for i in range(n):
        bnorm += b[i] * b[i]
    bnorm = sqrt(bnorm)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    rnorm = 0.0
    rz = 0.0
    for i in range(n):
        s = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            s += data[k] * x[indices[k]]
        r[i] = b[i] - s
        z[i] = diag_inv[i] * r[i]
        p[i] = z[i]
        rz += r[i] * z[i]
        rnorm += r[i] * r[i]
    rnorm = sqrt(rnorm)
    while rnorm > tol * bnorm and it < maxiter:
        pap = 0.0
        for i in range(n):
            s = 0.0
            for k in range(indptr[i], indptr[i + 1]):
                s += data[k] * p[indices[k]]
            ap[i] = s
            pap += p[i] * s
        alpha = rz / pap
        rz_new = 0.0
        rnorm = 0.0
        for i in range(n):
            x[i] += alpha * p[i]
            r[i] -= alpha * ap[i]
            z[i] = diag_inv[i] * r[i]
            rz_new += r[i] * z[i]
            rnorm += r[i] * r[i]
        rnorm = sqrt(rnorm)
        beta = rz_new / rz
        rz = rz_new
        for i in range(n):
            p[i] = z[i] + beta * p[i]
        it += 1
    return np.asarray(x), it, rnorm / bnorm


def rasterize_disks(centers, radii, int width, int height):
    cdef double[:, ::1] c = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 2)
    cdef double[::1] rad = np.ascontiguousarray(radii, dtype=np.float64).reshape(-1)
    cdef cnp.int32_t[:, ::1] out = np.zeros((height, width), dtype=np.int32)
    cdef unsigned char[:, ::1] canvas = np.zeros((height * SS, width * SS), dtype=np.uint8)
    cdef Py_ssize_t m, u, v, a, bq
    cdef int s
    cdef int u0, u1, v0, v1
    cdef double cu, cv, r, us, vs, du, dv
    cdef double off[SS]
    for a in range(SS):
        off[a] = (a + 0.5) / SS - 0.5
    for m in range(c.shape[0]):
        cu = c[m, 0]
        cv = c[m, 1]
        r = rad[m]
        if not (cu == cu and cv == cv) or cu == INFINITY or cu == -INFINITY \
                or cv == INFINITY or cv == -INFINITY or r <= 0:
            continue
        u0 = max(<int>floor(cu - r) - 1, 0)
        u1 = min(<int>ceil(cu + r) + 1, width - 1)
        v0 = max(<int>floor(cv - r) - 1, 0)
        v1 = min(<int>ceil(cv + r) + 1, height - 1)
        for v in range(v0, v1 + 1):
            for bq in range(SS):
                vs = v + off[bq]
                dv = vs - cv
                for u in range(u0, u1 + 1):
                    for a in range(SS):
                        us = u + off[a]
                        du = us - cu
                        if dv * dv + du * du <= r * r:
                            canvas[v * SS + bq, u * SS + a] = 1
    for v in range(height):
        for u in range(width):
            s = 0
            for bq in range(SS):
                for a in range(SS):
                    s += canvas[v * SS + bq, u * SS + a]
            out[v, u] = s
    return np.asarray(out)


cdef inline double _sphere_t(double ox, double oy, double oz,
                             double dx, double dy, double dz, double dd,
                             double cx, double cy, double cz, double r) nogil:
    cdef double ocx = ox - cx, ocy = oy - cy, ocz = oz - cz
    cdef double bq = dx * ocx + dy * ocy + dz * ocz
    cdef double cq = ocx * ocx + ocy * ocy + ocz * ocz - r * r
    cdef double disc = bq * bq - dd * cq
    cdef double sq, t0, t1
    if disc < 0:
        return INFINITY
    sq = sqrt(disc)
    t0 = (-bq - sq) / dd
    t1 = (-bq + sq) / dd
    if t0 > 0:
        return t0
    if t1 > 0:
        return t1
    return INFINITY


def raycast(origin, dirs, spheres, capsules, boxes):
    cdef double[::1] o = np.ascontiguousarray(origin, dtype=np.float64).reshape(3)
    cdef double[:, ::1] d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    cdef double[:, ::1] sp = np.ascontiguousarray(spheres, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] cp = np.ascontiguousarray(capsules, dtype=np.float64).reshape(-1, 7)
    cdef double[:, ::1] bx = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 6)
    cdef Py_ssize_t n = d.shape[0], i, q, ax
    cdef double[::1] best = np.full(n, np.inf)
    cdef double ox = o[0], oy = o[1], oz = o[2]
    cdef double dx, dy, dz, dd, t, tb
    cdef double axx, axy, axz, la2, oax, oay, oaz, dpar, opar
    cdef double dpx, dpy, dpz, opx, opy, opz, qa, qb, qc, disc, sq, s, sign
    cdef int si
    cdef double lo, hi, dcomp, ocomp, t0, t1, tnear, tfar, tmp
    cdef bint miss
    for i in range(n):
        dx = d[i, 0]
        dy = d[i, 1]
        dz = d[i, 2]
        dd = dx * dx + dy * dy + dz * dz
        tb = INFINITY
        for q in range(sp.shape[0]):
            t = _sphere_t(ox, oy, oz, dx, dy, dz, dd, sp[q, 0], sp[q, 1], sp[q, 2], sp[q, 3])
            if t < tb:
                tb = t
        for q in range(cp.shape[0]):
            t = _sphere_t(ox, oy, oz, dx, dy, dz, dd, cp[q, 0], cp[q, 1], cp[q, 2], cp[q, 6])
            if t < tb:
                tb = t
            t = _sphere_t(ox, oy, oz, dx, dy, dz, dd, cp[q, 3], cp[q, 4], cp[q, 5], cp[q, 6])
            if t < tb:
                tb = t
            axx = cp[q, 3] - cp[q, 0]
            axy = cp[q, 4] - cp[q, 1]
            axz = cp[q, 5] - cp[q, 2]
            la2 = axx * axx + axy * axy + axz * axz
            if la2 == 0:
                continue
            oax = ox - cp[q, 0]
            oay = oy - cp[q, 1]
            oaz = oz - cp[q, 2]
            dpar = (dx * axx + dy * axy + dz * axz) / la2
            opar = (oax * axx + oay * axy + oaz * axz) / la2
            dpx = dx - dpar * axx
            dpy = dy - dpar * axy
            dpz = dz - dpar * axz
            opx = oax - opar * axx
            opy = oay - opar * axy
            opz = oaz - opar * axz
            qa = dpx * dpx + dpy * dpy + dpz * dpz
            qb = dpx * opx + dpy * opy + dpz * opz
            qc = opx * opx + opy * opy + opz * opz - cp[q, 6] * cp[q, 6]
            disc = qb * qb - qa * qc
            if disc < 0 or qa <= 0:
                continue
            sq = sqrt(disc)
            for si in range(2):
                sign = 2.0 * si - 1.0
                t = (-qb + sign * sq) / qa
                s = opar + t * dpar
                if t > 0 and s >= 0 and s <= 1 and t < tb:
                    tb = t
        for q in range(bx.shape[0]):
            tnear = -INFINITY
            tfar = INFINITY
            miss = False
            for ax in range(3):
                lo = bx[q, ax]
                hi = bx[q, ax + 3]
                dcomp = d[i, ax]
                ocomp = o[ax]
                if dcomp == 0:
                    if ocomp < lo or ocomp > hi:
                        miss = True
                    continue
                t0 = (lo - ocomp) / dcomp
                t1 = (hi - ocomp) / dcomp
                if t0 > t1:
                    tmp = t0
                    t0 = t1
                    t1 = tmp
                if t0 > tnear:
                    tnear = t0
                if t1 < tfar:
                    tfar = t1
            if miss or tnear > tfar or tfar <= 0:
                continue
            t = tnear if tnear > 0 else tfar
            if t < tb:
                tb = t
        best[i] = tb
    return np.asarray(best)
