"""Hot numerical kernels: compiled if the extension is built, numpy otherwise.

Set ``DUALSKIN_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
if not os.environ.get("DUALSKIN_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels


def pcg_csr(A, b, x0=None, tol=1e-8, maxiter=None, backend=None):
    """Jacobi-preconditioned CG on a scipy CSR matrix; ``(x, iters, rel_res)``."""
    impl = _select(backend)
    A = A.tocsr()
    n = A.shape[0]
    b = np.ascontiguousarray(b, dtype=np.float64)
    x0 = np.zeros(n) if x0 is None else np.ascontiguousarray(x0, dtype=np.float64)
    diag = A.diagonal()
    diag_inv = np.where(diag != 0, 1.0 / np.where(diag != 0, diag, 1.0), 1.0)
    if maxiter is None:
        maxiter = 10 * n
    return impl.pcg_csr(
        np.ascontiguousarray(A.indptr, dtype=np.int64),
        np.ascontiguousarray(A.indices, dtype=np.int32),
        np.ascontiguousarray(A.data, dtype=np.float64),
        b, x0, np.ascontiguousarray(diag_inv), float(tol), int(maxiter),
    )


def rasterize_disks(centers, radii, width, height, backend=None):
    return _select(backend).rasterize_disks(
        np.asarray(centers, dtype=np.float64).reshape(-1, 2),
        np.asarray(radii, dtype=np.float64).reshape(-1),
        int(width), int(height),
    )


def raycast(origin, dirs, spheres=(), capsules=(), boxes=(), backend=None):
    return _select(backend).raycast(
        np.asarray(origin, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3),
        np.asarray(spheres, dtype=np.float64).reshape(-1, 4),
        np.asarray(capsules, dtype=np.float64).reshape(-1, 7),
        np.asarray(boxes, dtype=np.float64).reshape(-1, 6),
    )


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        if BACKEND != "cython":
            raise RuntimeError("compiled kernels are not available")
        return _impl
    raise ValueError(f"unknown backend {backend!r}")


def available_backends():
    return ["python", "cython"] if BACKEND == "cython" else ["python"]
