"""See-through proximity pipeline.

depth map -> near-bright intensity -> Otsu mask -> back-projected points ->
radial clearance from the skin -> closest distance, with affine depth
calibration and two-view fusion on top.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .camera import CameraModel
from .render import DepthMap

__all__ = [
    "AllInvalidDepthError",
    "RankDeficientError",
    "ObstacleMask",
    "ObstaclePointCloud",
    "ProximityEstimate",
    "RELIABLE_RANGE",
    "depth_to_intensity",
    "otsu_threshold",
    "masked_obstacle_points",
    "normal_distances",
    "closest_distance",
    "calibrate_depth_affine",
    "apply_calibration",
    "fuse_views",
    "quantization_bound",
    "estimate_proximity",
]

RELIABLE_RANGE = (20.0, 100.0)


class AllInvalidDepthError(ValueError):
    pass


class RankDeficientError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ObstacleMask:
    mask: np.ndarray            # (h, w) bool
    threshold: int
    degenerate: bool = False

    @property
    def count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True, eq=False)
class ObstaclePointCloud:
    points: np.ndarray          # (K, 3) link frame, mm
    pixels: np.ndarray          # (K, 2) integer (u, v), row-major order
    radial: np.ndarray          # (K,)
    normal: np.ndarray | None = None
    camera_id: str = "cam1"

    def __len__(self):
        return self.points.shape[0]

    def subset(self, idx) -> "ObstaclePointCloud":
        n = None if self.normal is None else self.normal[idx]
        return ObstaclePointCloud(self.points[idx], self.pixels[idx], self.radial[idx], n,
                                  self.camera_id)


@dataclass(frozen=True)
class ProximityEstimate:
    distance: float             # NaN when invalid
    pixel: tuple | None = None
    view: str | None = None
    valid: bool = False
    contact_imminent: bool = False
    low_confidence: bool = False


# -- mask ---------------------------------------------------------------------

def depth_to_intensity(depth: DepthMap) -> np.ndarray:
    """Near pixels bright, far pixels dark, invalid pixels 0. A flat map is all 255."""
    valid = depth.valid
    if not valid.any():
        raise AllInvalidDepthError("depth map has no valid pixel")
    g = depth.depth[valid]
    lo, hi = g.min(), g.max()
    out = np.zeros(depth.shape, dtype=np.uint8)
    if hi == lo:
        out[valid] = 255
    else:
        out[valid] = np.floor(255.0 * (hi - g) / (hi - lo) + 0.5).astype(np.uint8)
    return out


def otsu_threshold(image) -> ObstacleMask:
    """Histogram Otsu threshold with the mask ``image > t``.

    The between-class variance for a split at ``t`` is proportional to
    ``(s0*n1 - s1*n0)^2 / (n0*n1)`` (counts ``n``, intensity sums ``s``).
    Candidates are compared as exact integer fractions, so equal variances
    tie exactly and the lower threshold wins. A single-valued image is
    flagged degenerate: the mask is all ones if that value is positive.
    """
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError("Otsu expects an 8-bit image")
    hist = np.bincount(img.ravel(), minlength=256).astype(np.int64)
    present = np.flatnonzero(hist)
    if present.size < 2:
        v = int(present[0]) if present.size else 0
        t = v - 1 if v > 0 else 0
        return ObstacleMask(img > t, t, True)
    n0 = np.cumsum(hist)
    s0 = np.cumsum(hist * np.arange(256))
    n_tot, s_tot = int(n0[-1]), int(s0[-1])
    best_t, best_num, best_den = -1, 0, 1
    for t in range(255):
        a, sa = int(n0[t]), int(s0[t])
        b = n_tot - a
        if a == 0 or b == 0:
            continue
        num = (sa * b - (s_tot - sa) * a) ** 2
        den = a * b
        if best_t < 0 or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return ObstacleMask(img > best_t, best_t, False)


# -- geometry -----------------------------------------------------------------

def masked_obstacle_points(camera: CameraModel, depth: DepthMap, mask) -> ObstaclePointCloud:
    """Back-project every valid, masked pixel in row-major order."""
    m = mask.mask if isinstance(mask, ObstacleMask) else np.asarray(mask, dtype=bool)
    if m.shape != depth.shape:
        raise ValueError(f"mask shape {m.shape} != depth shape {depth.shape}")
    v, u = np.nonzero(m & depth.valid)
    pix = np.stack([u, v], axis=-1)
    if pix.shape[0] == 0:
        empty = np.zeros((0, 3))
        return ObstaclePointCloud(empty, pix.reshape(0, 2), np.zeros(0), None, camera.name)
    pts = camera.back_project(pix.astype(float), depth.depth[v, u])
    r = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2)
    return ObstaclePointCloud(pts, pix, r, None, camera.name)


def normal_distances(cloud: ObstaclePointCloud, skin_radius: float) -> ObstaclePointCloud:
    if not skin_radius > 0:
        raise ValueError("skin radius must be positive")
    return replace(cloud, normal=cloud.radial - skin_radius)


def closest_distance(cloud: ObstaclePointCloud, valid_range=RELIABLE_RANGE,
                     view: str | None = None) -> ProximityEstimate:
    """Smallest normal distance; ties go to the earliest pixel in row-major order."""
    if len(cloud) == 0:
        return ProximityEstimate(float("nan"), None, view or cloud.camera_id, False)
    n = cloud.normal
    if n is None:
        raise ValueError("normal distances not computed")
    k = int(np.argmin(n))
    d = float(n[k])
    lo, hi = valid_range
    return ProximityEstimate(d, (int(cloud.pixels[k, 0]), int(cloud.pixels[k, 1])),
                             view or cloud.camera_id, True, d < 0, not (lo <= d <= hi))


# -- calibration and fusion ---------------------------------------------------

def calibrate_depth_affine(raw_depths, true_distances):
    """Least-squares ``(s, t)`` minimizing ``sum (s*raw + t - true)^2``."""
    x = np.asarray(raw_depths, dtype=float).ravel()
    y = np.asarray(true_distances, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("raw and true samples differ in length")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("calibration samples must be finite")
    if x.size < 2 or np.all(x == x[0]):
        raise RankDeficientError("need at least two distinct raw depths")
    A = np.stack([x, np.ones_like(x)], axis=1)
    (s, t), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(s), float(t)


def apply_calibration(depth: DepthMap, scale: float, shift: float) -> DepthMap:
    out = depth.depth.copy()
    v = depth.valid
    out[v] = np.maximum(scale * out[v] + shift, 0.0)
    return DepthMap(out, depth.camera_id)


def fuse_views(est_1: ProximityEstimate, est_2: ProximityEstimate) -> ProximityEstimate:
    """The smaller valid estimate; view 1 wins exact ties."""
    if not est_2.valid:
        return est_1
    if not est_1.valid:
        return est_2
    return est_1 if est_1.distance <= est_2.distance else est_2


def quantization_bound(camera: CameraModel, gamma_max: float) -> float:
    """Lateral footprint of one pixel at axial depth ``gamma_max``."""
    return (camera.b + gamma_max) / min(camera.fx, camera.fy)


def estimate_proximity(camera: CameraModel, depth: DepthMap, skin_radius: float,
                       calibration=None, valid_range=RELIABLE_RANGE, full_frame: bool = False):
    """Run the whole chain on one view. Returns ``(estimate, cloud, mask)``."""
    if calibration is not None:
        depth = apply_calibration(depth, *calibration)
    if not depth.valid.any():
        none = ObstacleMask(np.zeros(depth.shape, dtype=bool), 0, True)
        return (ProximityEstimate(float("nan"), None, camera.name, False),
                masked_obstacle_points(camera, depth, none.mask), none)
    if full_frame:
        mask = ObstacleMask(depth.valid.copy(), -1, False)
    else:
        mask = otsu_threshold(depth_to_intensity(depth))
    cloud = normal_distances(masked_obstacle_points(camera, depth, mask), skin_radius)
    return closest_distance(cloud, valid_range, camera.name), cloud, mask
