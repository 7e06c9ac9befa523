"""Pure numpy implementations of the hot kernels.

Bit-compatible with the compiled versions where both are deterministic
(rasterization and ray casting); the CG loop agrees to solver tolerance.
"""
from __future__ import annotations

import numpy as np

SUBSAMPLE = 4
_OFFSETS = (np.arange(SUBSAMPLE) + 0.5) / SUBSAMPLE - 0.5


def pcg_csr(indptr, indices, data, b, x0, diag_inv, tol, maxiter):
    """Jacobi-preconditioned CG on a CSR matrix.

    Returns ``(x, iterations, relative_residual)``; stops when
    ``|r| <= tol * |b|``.
    """
    import scipy.sparse as sp

    n = b.shape[0]
    A = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    x = np.array(x0, dtype=float, copy=True)
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    z = diag_inv * r
    p = z.copy()
    rz = r @ z
    it = 0
    res = np.linalg.norm(r) / bnorm
    while res > tol and it < maxiter:
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = diag_inv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
        res = np.linalg.norm(r) / bnorm
    return x, it, res


def rasterize_disks(centers, radii, width, height):
    """Count 4x4 subsamples covered by any disk, per pixel.

    Pixel ``(row v, col u)`` has its centre at integer ``(u, v)``. Returns an
    int32 ``(height, width)`` array of counts in ``[0, 16]``.
    """
    ss = SUBSAMPLE
    canvas = np.zeros((height * ss, width * ss), dtype=bool)
    for (cu, cv), r in zip(centers, radii):
        if not (np.isfinite(cu) and np.isfinite(cv)) or r <= 0:
            continue
        u0 = max(int(np.floor(cu - r)) - 1, 0)
        u1 = min(int(np.ceil(cu + r)) + 1, width - 1)
        v0 = max(int(np.floor(cv - r)) - 1, 0)
        v1 = min(int(np.ceil(cv + r)) + 1, height - 1)
        if u0 > u1 or v0 > v1:
            continue
        us = (np.arange(u0, u1 + 1)[:, None] + _OFFSETS[None, :]).ravel()
        vs = (np.arange(v0, v1 + 1)[:, None] + _OFFSETS[None, :]).ravel()
        du = us - cu
        dv = vs - cv
        inside = (dv[:, None] * dv[:, None] + du[None, :] * du[None, :]) <= r * r
        canvas[v0 * ss:(v1 + 1) * ss, u0 * ss:(u1 + 1) * ss] |= inside
    return canvas.reshape(height, ss, width, ss).sum(axis=(1, 3)).astype(np.int32)


def raycast(origin, dirs, spheres, capsules, boxes):
    """Nearest positive ray parameter per ray against analytic primitives.

    ``dirs`` is ``(n, 3)`` (not necessarily unit); ``spheres`` rows are
    ``(cx, cy, cz, r)``, ``capsules`` rows ``(ax, ay, az, bx, by, bz, r)``,
    ``boxes`` rows ``(x0, y0, z0, x1, y1, z1)`` (axis aligned). Misses are
    ``inf``.
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(dirs, dtype=float)
    best = np.full(d.shape[0], np.inf)
    dd = np.einsum("ij,ij->i", d, d)

    def _sphere(c, r):
        oc = o - c
        bq = d @ oc
        cq = oc @ oc - r * r
        disc = bq * bq - dd * cq
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-bq - sq) / dd
        t1 = (-bq + sq) / dd
        t = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
        return np.where(hit, t, np.inf)

    for s in np.asarray(spheres, dtype=float).reshape(-1, 4):
        best = np.minimum(best, _sphere(s[:3], s[3]))

    for c in np.asarray(capsules, dtype=float).reshape(-1, 7):
        a, b, r = c[:3], c[3:6], c[6]
        best = np.minimum(best, _sphere(a, r))
        best = np.minimum(best, _sphere(b, r))
        ax = b - a
        la2 = ax @ ax
        if la2 == 0:
            continue
        oa = o - a
        # Infinite cylinder about the segment, clipped to its extent.
        dpar = d @ ax / la2
        opar = oa @ ax / la2
        dp = d - dpar[:, None] * ax
        op = oa - opar * ax
        qa = np.einsum("ij,ij->i", dp, dp)
        qb = dp @ op
        qc = op @ op - r * r
        disc = qb * qb - qa * qc
        ok = (disc >= 0) & (qa > 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        qa_safe = np.where(qa > 0, qa, 1.0)
        for sign in (-1.0, 1.0):
            t = (-qb + sign * sq) / qa_safe
            s = opar + t * dpar
            good = ok & (t > 0) & (s >= 0) & (s <= 1)
            best = np.minimum(best, np.where(good, t, np.inf))

    for bx in np.asarray(boxes, dtype=float).reshape(-1, 6):
        lo, hi = bx[:3], bx[3:]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        # Rays parallel to a slab: inside -> unbounded, outside -> miss.
        par = d == 0
        inside = (o >= lo) & (o <= hi)
        tmin_ax = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
        tmax_ax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
        tnear = tmin_ax.max(axis=1)
        tfar = tmax_ax.min(axis=1)
        hit = (tnear <= tfar) & (tfar > 0)
        t = np.where(tnear > 0, tnear, tfar)
        best = np.minimum(best, np.where(hit, t, np.inf))
    return best
