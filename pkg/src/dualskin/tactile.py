"""Tactile inference: marker tracking, displacement-field estimation, contact depth.

Two estimators recover the free-node displacement field from marker
centroid shifts:

* :func:`estimate_displacements_lsq` solves a Laplacian-regularized
  least-squares problem against a finite-difference observation Jacobian;
* :class:`LinearRegressor` is a closed-form ridge map trained on simulator
  records.

The forward model behind the Jacobian treats the skin as a thin shell: every
node on a free node's through-thickness grid line moves with it.
"""
from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.ndimage as ndi
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import MarkerSet, SkinMesh, marker_world_positions, surface_laplacian
from .render import TactileImage, normalize_tactile, render_tactile_image

__all__ = [
    "MarkerObservation",
    "DisplacementEstimate",
    "ContactDepth",
    "LinearRegressor",
    "AmbiguousMatchError",
    "BehindCameraError",
    "SingularSystemError",
    "ConvergenceError",
    "detect_marker_centroids",
    "debias_image",
    "observation_vector",
    "concat_views",
    "lift_free_field",
    "build_observation_jacobian",
    "regularizer",
    "estimate_displacements_lsq",
    "LeastSquaresEstimator",
    "train_linear_regressor",
    "contact_depth",
    "write_regressor",
    "read_regressor",
    "TactilePipeline",
]

DETECT_THRESHOLD = 8      # raw intensity; AA edges down to 1/16 coverage pass
WEIGHT_SATURATION = 192   # centroid weights clip here
DEFAULT_MU = 1e-2
DEFAULT_PASSES = 3


class AmbiguousMatchError(RuntimeError):
    pass


class BehindCameraError(RuntimeError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MarkerObservation:
    displacements: np.ndarray   # (M, 2) px, zero where invisible
    visible: np.ndarray         # (M,) bool
    camera_id: str = "cam1"

    @property
    def n_markers(self) -> int:
        return self.visible.shape[0]


@dataclass(frozen=True, eq=False)
class DisplacementEstimate:
    D: np.ndarray               # (N, 3) mm over the free set
    estimator: str = "lsq"
    view: str = "dual"
    nodes: np.ndarray | None = None


@dataclass(frozen=True)
class ContactDepth:
    value: float
    index: int                  # row of the arg-max in the estimate
    node: int | None = None


# -- marker tracking ----------------------------------------------------------

def _components(px: np.ndarray, threshold: int):
    labels, n = ndi.label(px > threshold)
    if n == 0:
        return labels, np.zeros((0, 2))
    w = np.minimum(px, WEIGHT_SATURATION).astype(np.float64) / WEIGHT_SATURATION
    com = ndi.center_of_mass(w, labels, np.arange(1, n + 1))
    cents = np.array([(c[1], c[0]) for c in com], dtype=float)  # (u, v)
    return labels, cents


def detect_marker_centroids(image: TactileImage, reference: TactileImage,
                            anchors_px=None, threshold: int = DETECT_THRESHOLD,
                            tie_tol: float = 1e-9, predicted=None) -> MarkerObservation:
    """Centroid shifts of thresholded marker blobs relative to ``reference``.

    Without ``anchors_px`` the output is indexed by reference blob (label
    order). With it, entry ``m`` is the reference blob under anchor pixel
    ``m``; anchors off-image, on background, or sharing a blob are invisible.

    Each marker has a target position: its reference centroid, plus
    ``predicted[m]`` when a motion prior is given. Blobs are matched to the
    nearest target inside half that target's nearest-neighbour spacing. A
    match must be mutual (the target's nearest blob is the same blob) and
    blobs covering several targets count as merged and are skipped.
    """
    if image.shape != reference.shape:
        raise ValueError("image and reference differ in size")
    ref_labels, ref_c = _components(reference.pixels, threshold)
    n_ref = ref_c.shape[0]

    if anchors_px is None:
        order = np.arange(n_ref)
        n_out = n_ref
    else:
        anchors_px = np.asarray(anchors_px, dtype=float)
        n_out = anchors_px.shape[0]
        order = np.full(n_out, -1)
        h, w = reference.shape
        finite = np.all(np.isfinite(anchors_px), axis=1)
        ij = np.rint(np.where(finite[:, None], anchors_px, -1)).astype(int)
        inside = finite & (ij[:, 0] >= 0) & (ij[:, 0] < w) & (ij[:, 1] >= 0) & (ij[:, 1] < h)
        lab = np.zeros(n_out, dtype=int)
        lab[inside] = ref_labels[ij[inside, 1], ij[inside, 0]]
        counts = np.bincount(lab[lab > 0], minlength=n_ref + 1)
        ok = (lab > 0) & (counts[lab] == 1)
        order[ok] = lab[ok] - 1

    disp = np.zeros((n_out, 2))
    visible = np.zeros(n_out, dtype=bool)
    live = np.flatnonzero(order >= 0)
    if live.size == 0:
        return MarkerObservation(disp, visible, image.camera_id)
    labels, cur_c = _components(image.pixels, threshold)
    if cur_c.shape[0] == 0:
        return MarkerObservation(disp, visible, image.camera_id)

    base = ref_c[order[live]]
    targets = base.copy()
    if predicted is not None:
        shift = np.asarray(predicted, dtype=float).reshape(n_out, 2)[live]
        targets = targets + np.where(np.isfinite(shift), shift, 0.0)
    tree = cKDTree(targets)
    gate = (0.5 * tree.query(targets, k=2)[0][:, 1] if live.size > 1
            else np.full(1, np.inf))

    h, w = image.shape
    tij = np.rint(targets).astype(int)
    tin = (tij[:, 0] >= 0) & (tij[:, 0] < w) & (tij[:, 1] >= 0) & (tij[:, 1] < h)
    under = np.zeros(live.size, dtype=int)
    under[tin] = labels[tij[tin, 1], tij[tin, 0]]
    cover = np.bincount(under[under > 0], minlength=cur_c.shape[0] + 1)

    dist, nearest = tree.query(cur_c)
    back = cKDTree(cur_c).query(targets)[1]
    claims: dict[int, list] = {}
    for comp, (dd, t) in enumerate(zip(dist, nearest)):
        if cover[comp + 1] > 1 or dd > gate[t]:
            continue
        claims.setdefault(int(t), []).append((float(dd), comp))
    for t, lst in claims.items():
        lst.sort()
        if len(lst) > 1 and lst[1][0] - lst[0][0] <= tie_tol:
            raise AmbiguousMatchError(f"two blobs claim reference marker {live[t]} equally")
        comp = lst[0][1]
        if back[t] != comp:
            continue
        m = live[t]
        disp[m] = cur_c[comp] - base[t]
        visible[m] = True
    return MarkerObservation(disp, visible, image.camera_id)


def debias_image(image: TactileImage, reference: TactileImage) -> TactileImage:
    """Remove the constant channel of the normalized difference image.

    The median of ``normalize_tactile(image, reference)`` is the uniform
    offset (most pixels are backdrop); subtracting it and re-adding the
    reference gives an offset-free frame on the 8-bit grid.
    """
    n = normalize_tactile(image, reference)
    offset = np.median(n)
    px = np.clip(np.rint(255.0 * (n - offset)) + reference.pixels, 0, 255).astype(np.uint8)
    return TactileImage(px, image.camera_id, image.mode)


def observation_vector(obs: MarkerObservation):
    """Flattened ``(u, v)`` per marker and the matching row mask."""
    return obs.displacements.reshape(-1).copy(), np.repeat(obs.visible, 2)


def concat_views(obs_1: MarkerObservation, obs_2: MarkerObservation):
    """Dual-view feature: camera-1 block then camera-2 block."""
    if obs_1.n_markers != obs_2.n_markers:
        raise ValueError("views observe different marker counts")
    y1, m1 = observation_vector(obs_1)
    y2, m2 = observation_vector(obs_2)
    return np.concatenate([y1, y2]), np.concatenate([m1, m2])


# -- forward model ------------------------------------------------------------

def lift_free_field(mesh: SkinMesh, D) -> np.ndarray:
    """Thin-shell lift of a free-set field ``(N, 3)`` to all nodes."""
    D = np.asarray(D, dtype=float)
    per_layer = mesh.n_theta * mesh.n_axial
    outer = np.zeros((per_layer, 3))
    outer[mesh.free_set] = D
    return np.tile(outer, (mesh.n_layers, 1))


def build_observation_jacobian(mesh: SkinMesh, markers: MarkerSet, cameras, h: float = 0.1):
    """``d(marker pixel)/d(free-node displacement)`` by central differences.

    Rows: camera-major, then marker, then ``(u, v)``. Columns: free-set
    order, node-major ``(x, y, z)``. A perturbation of free node ``i`` moves
    the whole grid line of ``i`` (thin-shell lift), so only markers whose
    interpolation stencil touches that line respond.
    """
    pos = mesh.free_position()
    N = mesh.n_free
    M = len(markers)
    rest = markers.rest_positions
    trip = []  # (marker, free index, weight)
    for m, a in enumerate(markers.anchors):
        for n, w in zip(a.nodes, a.weights):
            i = pos.get(int(mesh.outer_partner(n)))
            if i is not None and w != 0.0:
                trip.append((m, i, w))
    trip = np.array(trip, dtype=float).reshape(-1, 3)
    mk = trip[:, 0].astype(int)
    fi = trip[:, 1].astype(int)
    wt = trip[:, 2]
    J = np.zeros((2 * M * len(cameras), 3 * N))
    for ci, cam in enumerate(cameras):
        for c in range(3):
            e = np.zeros(3)
            e[c] = h
            plus = rest[mk] + wt[:, None] * e
            minus = rest[mk] - wt[:, None] * e
            up, fp = cam.project(plus)
            um, fm = cam.project(minus)
            if np.any(fp != fm):
                raise BehindCameraError(f"marker perturbation crosses the image plane of {cam.name}")
            g = np.where(fp[:, None], (up - um) / (2 * h), 0.0)
            rows = 2 * (ci * M + mk)
            np.add.at(J, (rows, 3 * fi + c), g[:, 0])
            np.add.at(J, (rows + 1, 3 * fi + c), g[:, 1])
    return J


def regularizer(mesh: SkinMesh) -> sp.csr_matrix:
    """Surface Laplacian acting on every displacement component, ``(3N, 3N)``."""
    return sp.kron(surface_laplacian(mesh), sp.identity(3), format="csr")


def _pcg_dense(A, b, precond, tol, maxiter):
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, 0, 0.0
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = r @ z
    res = 1.0
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            return x, it, res
        z = precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter, res


class LeastSquaresEstimator:
    """``argmin |J d - y|^2 + mu |L d|^2`` over visible rows.

    The normal equations are solved by CG to relative residual ``tol``,
    preconditioned by a Cholesky factor cached per visibility pattern.
    """

    def __init__(self, J: np.ndarray, L, mu: float = DEFAULT_MU, tol: float = 1e-8,
                 nodes=None, view: str = "dual"):
        self.J = np.asarray(J, dtype=float)
        if L.shape[1] != self.J.shape[1]:
            if L.shape[1] * 3 == self.J.shape[1]:
                L = sp.kron(sp.csr_matrix(L), sp.identity(3), format="csr")
            else:
                raise ValueError("regularizer does not match the Jacobian columns")
        if sp.issparse(L):
            self.LtL = np.asarray((L.T @ L).todense())
        else:
            L = np.asarray(L, dtype=float)
            self.LtL = L.T @ L
        self.mu = float(mu)
        self.tol = tol
        self.nodes = nodes
        self.view = view
        self._cache = {}

    def _system(self, mask):
        key = hashlib.sha1(np.packbits(mask).tobytes()).hexdigest()
        if key not in self._cache:
            Jv = self.J[mask]
            A = Jv.T @ Jv + self.mu * self.LtL
            try:
                cf = scipy.linalg.cho_factor(A)
                pre = lambda r, cf=cf: scipy.linalg.cho_solve(cf, r)
            except np.linalg.LinAlgError:
                d = np.diag(A).copy()
                d[d == 0] = 1.0
                pre = lambda r, d=d: r / d
            if len(self._cache) > 32:
                self._cache.clear()
            self._cache[key] = (Jv, A, pre)
        return self._cache[key]

    def estimate(self, y, mask=None) -> DisplacementEstimate:
        y = np.asarray(y, dtype=float)
        mask = np.ones(y.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if mask.sum() < 6:
            warnings.warn(f"only {int(mask.sum())} visible observation rows; estimate is "
                          "underdetermined", RuntimeWarning, stacklevel=2)
        n = self.J.shape[1]
        if not mask.any():
            return DisplacementEstimate(np.zeros((n // 3, 3)), "lsq", self.view, self.nodes)
        Jv, A, pre = self._system(mask)
        b = Jv.T @ y[mask]
        x, it, res = _pcg_dense(A, b, pre, self.tol, 10 * n)
        if res > self.tol:
            raise ConvergenceError(f"normal-equation CG stalled at residual {res:.2e}")
        return DisplacementEstimate(x.reshape(-1, 3), "lsq", self.view, self.nodes)


def estimate_displacements_lsq(obs, J, L, mu: float = DEFAULT_MU, mask=None,
                               tol: float = 1e-8) -> DisplacementEstimate:
    """One-shot Laplacian-regularized least-squares estimate.

    ``obs`` is either a :class:`MarkerObservation`, a ``(vector, mask)``
    pair, or a bare vector (all rows visible).
    """
    if isinstance(obs, MarkerObservation):
        y, mask = observation_vector(obs)
    elif isinstance(obs, tuple):
        y, mask = obs
    else:
        y = obs
    return LeastSquaresEstimator(J, L, mu, tol).estimate(y, mask)


# -- contact depth ------------------------------------------------------------

def contact_depth(estimate) -> ContactDepth:
    """Largest nodal displacement norm; ties resolve to the lowest row."""
    D = estimate.D if isinstance(estimate, DisplacementEstimate) else np.asarray(estimate)
    if D.size == 0:
        raise ValueError("empty displacement estimate")
    # fixed (x^2 + y^2) + z^2 order, so the result matches a scalar loop bit for bit
    norms = np.sqrt(D[:, 0] * D[:, 0] + D[:, 1] * D[:, 1] + D[:, 2] * D[:, 2])
    i = int(np.argmax(norms))
    node = None
    if isinstance(estimate, DisplacementEstimate) and estimate.nodes is not None:
        node = int(estimate.nodes[i])
    return ContactDepth(float(norms[i]), i, node)


# -- learned estimator --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearRegressor:
    weights: np.ndarray         # (F, 3N)
    lam: float
    feature_tag: str = "marker_shift_dual"
    holdout_rmse: float = float("nan")
    n_train: int = 0
    n_holdout: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights.shape[1]

    def predict(self, features, nodes=None, view: str = "dual") -> DisplacementEstimate:
        f = np.asarray(features, dtype=float)
        if f.shape[-1] != self.feature_dim:
            raise ValueError(f"feature dim {f.shape[-1]} != {self.feature_dim}")
        return DisplacementEstimate((f @ self.weights).reshape(-1, 3), "ridge", view, nodes)


def train_linear_regressor(features, targets, lam: float, holdout_fraction: float = 0.2,
                           seed: int = 0, feature_tag: str = "marker_shift_dual"):
    """Closed-form ridge regression ``min (1/n)|XW - Y|^2 + lam |W|^2``.

    Exact duplicate records are collapsed first. A seeded permutation holds
    out ``holdout_fraction`` of the unique records for validation; the rest
    train the map.
    """
    X = np.asarray(features, dtype=float)
    Y = np.asarray(targets, dtype=float).reshape(X.shape[0], -1)
    if X.shape[0] < 2:
        raise ValueError("need at least two samples")
    XY = np.ascontiguousarray(np.concatenate([X, Y], axis=1))
    _, first = np.unique(XY, axis=0, return_index=True)
    first = np.sort(first)
    X, Y = X[first], Y[first]
    n = X.shape[0]
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(holdout_fraction * n)) if n >= 5 else 0
    hold, train = perm[:n_hold], np.sort(perm[n_hold:])
    Xt, Yt = X[train], Y[train]
    nt = Xt.shape[0]
    A = Xt.T @ Xt + nt * lam * np.eye(X.shape[1])
    rhs = Xt.T @ Yt
    if lam == 0:
        if np.linalg.matrix_rank(Xt) < X.shape[1]:
            raise SingularSystemError("features are rank-deficient and lam = 0")
        W = np.linalg.solve(A, rhs)
    else:
        W = scipy.linalg.solve(A, rhs, assume_a="pos")
    rmse = float("nan")
    if n_hold:
        err = X[hold] @ W - Y[hold]
        rmse = float(np.sqrt(np.mean(err ** 2)))
    meta = {"holdout": tuple(int(i) for i in np.sort(first[hold])),
            "train": tuple(int(i) for i in first[train])}
    return LinearRegressor(W, float(lam), feature_tag, rmse, int(nt), int(n_hold), meta)


_REG_HEADER = struct.Struct("<QQd")


def write_regressor(reg: LinearRegressor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_REG_HEADER.pack(reg.feature_dim, reg.output_dim, reg.lam))
        fh.write(np.ascontiguousarray(reg.weights, dtype="<f8").tobytes())


def read_regressor(path) -> LinearRegressor:
    with open(path, "rb") as fh:
        f, o, lam = _REG_HEADER.unpack(fh.read(_REG_HEADER.size))
        W = np.frombuffer(fh.read(8 * f * o), dtype="<f8")
    if W.size != f * o:
        raise ValueError("truncated regressor file")
    return LinearRegressor(W.reshape(f, o).copy(), lam)


# -- end-to-end tactile chain -------------------------------------------------

class TactilePipeline:
    """Render, track and estimate for a fixed mesh, marker layout and camera pair."""

    def __init__(self, mesh: SkinMesh, markers: MarkerSet, cameras, mu: float = DEFAULT_MU,
                 backend: str | None = None):
        self.mesh = mesh
        self.markers = markers
        self.cameras = tuple(cameras)
        self.backend = backend
        zero = np.zeros((mesh.n_nodes, 3))
        self.references = [render_tactile_image(c, markers, zero, backend=backend)
                           for c in self.cameras]
        self.anchor_px = [c.project(markers.rest_positions)[0] for c in self.cameras]
        self.J = build_observation_jacobian(mesh, markers, self.cameras)
        self.L = regularizer(mesh)
        rows = 2 * len(markers)
        self._lsq = {
            "dual": LeastSquaresEstimator(self.J, self.L, mu, nodes=mesh.free_set, view="dual"),
            "single": LeastSquaresEstimator(self.J[:rows], self.L, mu, nodes=mesh.free_set,
                                            view="single"),
        }

    def render(self, full_field, offset: int = 0):
        imgs = [render_tactile_image(c, self.markers, full_field, backend=self.backend)
                for c in self.cameras]
        if offset:
            imgs = [im.with_offset(offset) for im in imgs]
        return imgs

    def predicted_shifts(self, estimate: DisplacementEstimate):
        """Per-camera pixel shifts ``(M, 2)`` the forward model gives for ``estimate``."""
        pts = marker_world_positions(self.markers, lift_free_field(self.mesh, estimate.D))
        return [c.project(pts)[0] - apx for c, apx in zip(self.cameras, self.anchor_px)]

    def observe(self, images, normalized: bool = True, predicted=None):
        out = []
        pred = predicted if predicted is not None else [None] * len(images)
        for img, ref, apx, pr in zip(images, self.references, self.anchor_px, pred):
            if normalized:
                img = debias_image(img, ref)
            out.append(detect_marker_centroids(img, ref, anchors_px=apx, predicted=pr))
        return out

    def track(self, images, view: str = "dual", normalized: bool = True,
              passes: int = DEFAULT_PASSES):
        """Alternate matching and estimation; later passes match near predictions."""
        obs = self.observe(images, normalized)
        est = self.estimate(obs, view)
        for _ in range(passes - 1):
            obs = self.observe(images, normalized, self.predicted_shifts(est))
            est = self.estimate(obs, view)
        return obs, est

    def features(self, observations, view: str = "dual"):
        if view == "single":
            return observation_vector(observations[0])
        return concat_views(observations[0], observations[1])

    def estimate(self, observations, view: str = "dual") -> DisplacementEstimate:
        y, mask = self.features(observations, view)
        return self._lsq[view].estimate(y, mask)

    def contact_depth(self, full_field, view: str = "dual", normalized: bool = True,
                      offset: int = 0) -> ContactDepth:
        _, est = self.track(self.render(full_field, offset), view, normalized)
        return contact_depth(est)
