"""Pinhole camera with an optional single-coefficient equidistant fisheye term.

Camera frame: ``p_cam = R p_link + (0, 0, b)``, so a link-frame point with
axial coordinate ``o_z`` (measured along the camera's own axis) sits at
camera depth ``z_c = b + o_z``. Back-projection inverts the pinhole relation
at known ``o_z``::

    o_x = (u - c_x)(b + o_z) / f_x,    o_y = (v - c_y)(b + o_z) / f_y

Distortion acts on the normalized radius ``rho = |(x_c, y_c)| / z_c``:
``rho_d = (1 - k1) rho + k1 atan(rho)``; ``k1 = 0`` is the ideal pinhole and
``k1 = 1`` the equidistant model.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CameraModel",
    "InvalidDepthError",
    "UndistortError",
    "opposed_pair",
    "write_camera_file",
    "read_camera_file",
]

IDENTITY = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
FLIPPED = ((1.0, 0.0, 0.0), (0.0, -1.0, 0.0), (0.0, 0.0, -1.0))  # pi about x


class InvalidDepthError(ValueError):
    pass


class UndistortError(RuntimeError):
    pass


@dataclass(frozen=True)
class CameraModel:
    fx: float = 220.0
    fy: float = 220.0
    cx: float = 320.0
    cy: float = 240.0
    b: float = 150.0
    width: int = 640
    height: int = 480
    k1: float = 0.0
    rotation: tuple = field(default=IDENTITY)
    name: str = "cam1"

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if not self.b > 0:
            raise ValueError("axial offset b must be positive")
        if not 0.0 <= self.k1 <= 1.0:
            raise ValueError("k1 must lie in [0, 1]")

    @property
    def R(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=float)

    @property
    def center(self) -> np.ndarray:
        """Optical centre in the link frame."""
        return -self.R.T @ np.array([0.0, 0.0, self.b])

    def to_local(self, points) -> np.ndarray:
        """Link-frame points to camera-aligned coordinates (origin at the link origin)."""
        return np.asarray(points, dtype=float) @ self.R.T

    def to_link(self, local) -> np.ndarray:
        return np.asarray(local, dtype=float) @ self.R

    # -- distortion ---------------------------------------------------------
    def _distort_rho(self, rho):
        return (1.0 - self.k1) * rho + self.k1 * np.arctan(rho)

    def distort_pixel(self, uv) -> np.ndarray:
        """Ideal-pinhole pixel to distorted pixel."""
        uv = np.asarray(uv, dtype=float)
        a = (uv[..., 0] - self.cx) / self.fx
        c = (uv[..., 1] - self.cy) / self.fy
        rho = np.hypot(a, c)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(rho > 0, self._distort_rho(rho) / rho, 1.0)
        return np.stack([a * scale * self.fx + self.cx, c * scale * self.fy + self.cy], axis=-1)

    def undistort_pixel(self, uv, tol_px: float = 1e-8, max_iter: int = 50) -> np.ndarray:
        """Inverse of :meth:`distort_pixel` by Newton iteration on the radius."""
        uv = np.asarray(uv, dtype=float)
        if self.k1 == 0.0:
            return uv.copy()
        a = (uv[..., 0] - self.cx) / self.fx
        c = (uv[..., 1] - self.cy) / self.fy
        rd = np.hypot(a, c)
        rho = rd.copy()
        k = self.k1
        tol = tol_px / max(self.fx, self.fy)
        for _ in range(max_iter):
            g = (1 - k) * rho + k * np.arctan(rho) - rd
            step = g / ((1 - k) + k / (1 + rho * rho))
            rho = rho - step
            if np.all(np.abs(step) <= tol):
                break
        else:
            raise UndistortError(f"undistortion did not converge in {max_iter} iterations")
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(rd > 0, rho / rd, 1.0)
        return np.stack([a * scale * self.fx + self.cx, c * scale * self.fy + self.cy], axis=-1)

    # -- projection ---------------------------------------------------------
    def project(self, points):
        """Project link-frame points; returns ``(uv, in_front)``.

        Points with camera depth ``z_c <= 0`` are tagged ``in_front=False``
        and get NaN pixels.
        """
        p = self.to_local(points)
        zc = self.b + p[..., 2]
        in_front = zc > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            zs = np.where(in_front, zc, np.nan)
            uv = np.stack([self.fx * p[..., 0] / zs + self.cx,
                           self.fy * p[..., 1] / zs + self.cy], axis=-1)
        if self.k1 != 0.0:
            uv = self.distort_pixel(uv)
        return uv, in_front

    def back_project(self, uv, depth) -> np.ndarray:
        """Pixel(s) plus axial depth ``o_z`` to link-frame point(s)."""
        uv = np.asarray(uv, dtype=float)
        depth = np.asarray(depth, dtype=float)
        if np.any(~np.isfinite(depth)) or np.any(depth < 0):
            raise InvalidDepthError("depth must be finite and non-negative")
        if self.k1 != 0.0:
            uv = self.undistort_pixel(uv)
        zc = self.b + depth
        local = np.stack([(uv[..., 0] - self.cx) * zc / self.fx,
                          (uv[..., 1] - self.cy) * zc / self.fy,
                          np.broadcast_to(depth, uv.shape[:-1])], axis=-1)
        return self.to_link(local)

    def pixel_rays(self):
        """Link-frame ray directions through every pixel centre, ``(h*w, 3)``.

        Directions are scaled so the ray parameter equals camera depth ``z_c``.
        """
        v, u = np.mgrid[0:self.height, 0:self.width]
        uv = np.stack([u.ravel(), v.ravel()], axis=-1).astype(float)
        ideal = self.undistort_pixel(uv) if self.k1 != 0.0 else uv
        local = np.stack([(ideal[:, 0] - self.cx) / self.fx,
                          (ideal[:, 1] - self.cy) / self.fy,
                          np.ones(uv.shape[0])], axis=-1)
        return self.to_link(local)

    def in_image(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return ((uv[..., 0] >= -0.5) & (uv[..., 0] < self.width - 0.5)
                & (uv[..., 1] >= -0.5) & (uv[..., 1] < self.height - 0.5))


def opposed_pair(length: float = 300.0, **kw):
    """Two cameras at the link ends facing each other along the axis."""
    b = length / 2
    cam1 = CameraModel(b=b, rotation=IDENTITY, name="cam1", **kw)
    cam2 = CameraModel(b=b, rotation=FLIPPED, name="cam2", **kw)
    return cam1, cam2


_KEYS = ("fx", "fy", "cx", "cy", "b", "k1")


def write_camera_file(camera: CameraModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k in _KEYS:
            fh.write(f"{k}={float(getattr(camera, k))!r}\n")
        fh.write(f"width={camera.width}\nheight={camera.height}\n")


def read_camera_file(path, **overrides) -> CameraModel:
    vals = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k in _KEYS:
                vals[k] = float(v)
            elif k in ("width", "height"):
                vals[k] = int(v)
            else:
                raise ValueError(f"{path}:{lineno}: unknown camera key {k!r}")
    vals.update(overrides)
    return CameraModel(**vals)
