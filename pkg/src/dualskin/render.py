"""Synthetic observations for both skin states.

Opaque mode: bright anti-aliased marker disks on a black backdrop.
Transparent mode: per-pixel ray-cast depth maps of analytic obstacle scenes,
with an optional corruption stage standing in for a monocular depth network.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .camera import CameraModel
from .mesh import MarkerSet, marker_world_positions

__all__ = [
    "TactileImage",
    "DepthMap",
    "Sphere",
    "Capsule",
    "Box",
    "ObstacleScene",
    "INVALID_DEPTH",
    "render_tactile_image",
    "normalize_tactile",
    "render_depth_map",
    "corrupt_depth",
    "write_pgm",
    "read_pgm",
    "write_ptdm",
    "read_ptdm",
]

INVALID_DEPTH = -1.0
_SS2 = _kernels._pykernels.SUBSAMPLE ** 2


@dataclass(frozen=True, eq=False)
class TactileImage:
    pixels: np.ndarray          # (480, 640) uint8
    camera_id: str = "cam1"
    mode: str = "opaque"

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 2:
            raise ValueError("tactile image must be a 2-D uint8 array")

    @property
    def shape(self):
        return self.pixels.shape

    def with_offset(self, beta: int) -> "TactileImage":
        """Uniform brightness offset, saturating at 0/255."""
        px = np.clip(self.pixels.astype(np.int32) + int(beta), 0, 255).astype(np.uint8)
        return TactileImage(px, self.camera_id, self.mode)


@dataclass(frozen=True, eq=False)
class DepthMap:
    depth: np.ndarray           # (h, w) float64, INVALID_DEPTH where no hit
    camera_id: str = "cam1"

    @property
    def valid(self) -> np.ndarray:
        return self.depth >= 0

    @property
    def shape(self):
        return self.depth.shape


# -- scenes -------------------------------------------------------------------

def _radial_clearance_segment(a, b):
    """Minimum distance from the z-axis to the segment ``a-b`` (xy distance)."""
    a, b = np.asarray(a, float)[:2], np.asarray(b, float)[:2]
    d = b - a
    dd = d @ d
    t = 0.0 if dd == 0 else float(np.clip(-(a @ d) / dd, 0.0, 1.0))
    return float(np.linalg.norm(a + t * d))


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    reflectance: str = "diffuse"

    def min_radius(self):
        return np.hypot(self.center[0], self.center[1]) - self.radius

    def translated(self, t):
        return Sphere(tuple(np.add(self.center, t)), self.radius, self.reflectance)

    def sdf(self, p):
        return np.linalg.norm(np.asarray(p) - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Capsule:
    a: tuple
    b: tuple
    radius: float
    reflectance: str = "diffuse"

    def min_radius(self):
        return _radial_clearance_segment(self.a, self.b) - self.radius

    def translated(self, t):
        return Capsule(tuple(np.add(self.a, t)), tuple(np.add(self.b, t)), self.radius,
                       self.reflectance)

    def sdf(self, p):
        p = np.asarray(p, float)
        a, b = np.asarray(self.a, float), np.asarray(self.b, float)
        ab = b - a
        t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
        return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    reflectance: str = "diffuse"

    def min_radius(self):
        qx = np.clip(0.0, self.lo[0], self.hi[0])
        qy = np.clip(0.0, self.lo[1], self.hi[1])
        return float(np.hypot(qx, qy))

    def translated(self, t):
        return Box(tuple(np.add(self.lo, t)), tuple(np.add(self.hi, t)), self.reflectance)

    def sdf(self, p):
        p = np.asarray(p, float)
        c = (np.asarray(self.lo) + np.asarray(self.hi)) / 2
        h = (np.asarray(self.hi) - np.asarray(self.lo)) / 2
        q = np.abs(p - c) - h
        return (np.linalg.norm(np.maximum(q, 0), axis=-1)
                + np.minimum(np.max(q, axis=-1), 0.0))


@dataclass(frozen=True)
class ObstacleScene:
    primitives: tuple = ()
    skin_radius: float = 40.0
    allow_penetration: bool = False

    def __post_init__(self):
        if self.allow_penetration:
            return
        for prim in self.primitives:
            if prim.min_radius() < self.skin_radius - 1e-9:
                raise ValueError(f"{prim} intrudes inside the skin radius {self.skin_radius}")

    def closest_clearance(self) -> float:
        """Analytic closest radial clearance ``min_r - r_s`` over the scene."""
        return min(p.min_radius() for p in self.primitives) - self.skin_radius

    def translated(self, t) -> "ObstacleScene":
        return ObstacleScene(tuple(p.translated(t) for p in self.primitives), self.skin_radius,
                             self.allow_penetration)

    def sdf(self, p):
        return np.min(np.stack([prim.sdf(p) for prim in self.primitives]), axis=0)

    def _arrays(self):
        sph = [(*p.center, p.radius) for p in self.primitives if isinstance(p, Sphere)]
        cap = [(*p.a, *p.b, p.radius) for p in self.primitives if isinstance(p, Capsule)]
        box = [(*p.lo, *p.hi) for p in self.primitives if isinstance(p, Box)]
        return (np.array(sph, float).reshape(-1, 4), np.array(cap, float).reshape(-1, 7),
                np.array(box, float).reshape(-1, 6))


# -- tactile rendering --------------------------------------------------------

def render_tactile_image(camera: CameraModel, markers: MarkerSet, displacement_field,
                         backend: str | None = None) -> TactileImage:
    """Markers as filled disks of the projected marker diameter, 4x4 supersampled."""
    pts = marker_world_positions(markers, displacement_field)
    uv, front = camera.project(pts)
    zc = camera.b + camera.to_local(pts)[:, 2]
    radii = np.where(front, camera.fx * (markers.diameter / 2) / np.where(front, zc, 1.0), 0.0)
    uv = np.where(front[:, None], uv, np.nan)
    counts = _kernels.rasterize_disks(uv, radii, camera.width, camera.height, backend=backend)
    # Integer rounding of 255 * count / 16, half up.
    px = ((counts * 255 * 2 + _SS2) // (2 * _SS2)).astype(np.uint8)
    return TactileImage(px, camera.name)


def normalize_tactile(image: TactileImage, reference: TactileImage) -> np.ndarray:
    """Signed difference from the reference frame, scaled to ``[-1, 1]``."""
    if image.shape != reference.shape:
        raise ValueError(f"image shape {image.shape} != reference shape {reference.shape}")
    return (image.pixels.astype(np.float64) - reference.pixels.astype(np.float64)) / 255.0


# -- depth rendering ----------------------------------------------------------

def render_depth_map(camera: CameraModel, scene: ObstacleScene,
                     backend: str | None = None) -> DepthMap:
    """Ray-cast axial depth ``o_z`` of the nearest hit per pixel.

    Hits behind the link origin along this camera's axis (``o_z < 0``) fall
    outside the camera's measurement half-space and are stored invalid.
    """
    h, w = camera.height, camera.width
    if not scene.primitives:
        return DepthMap(np.full((h, w), INVALID_DEPTH), camera.name)
    dirs = camera.pixel_rays()
    sph, cap, box = scene._arrays()
    t = _kernels.raycast(camera.center, dirs, sph, cap, box, backend=backend)
    gamma = t - camera.b
    ok = np.isfinite(t) & (gamma >= 0)
    depth = np.where(ok, gamma, INVALID_DEPTH).reshape(h, w)
    return DepthMap(depth, camera.name)


def corrupt_depth(depth: DepthMap, sigma: float = 0.0, scale: float = 1.0, shift: float = 0.0,
                  seed=None, frame_sigma: float = 0.0, exponent: float = 1.0,
                  ref_depth: float = 100.0) -> DepthMap:
    """Degrade valid pixels the way a monocular depth network would.

    ``g -> scale * ref * (g / ref)**exponent + shift + e_frame + N(0, sigma^2)``
    where ``e_frame ~ N(0, frame_sigma^2)`` is drawn once per call and shared
    by all pixels. ``exponent < 1`` compresses far depths, which an affine
    calibration can only partly undo. Negative results clip to zero.
    """
    if sigma < 0 or frame_sigma < 0:
        raise ValueError("noise levels must be non-negative")
    if not (scale > 0 and exponent > 0 and ref_depth > 0):
        raise ValueError("scale, exponent and ref_depth must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    valid = depth.valid
    out = depth.depth.copy()
    offset = shift + (rng.normal(0.0, frame_sigma) if frame_sigma > 0 else 0.0)
    g = out[valid]
    if exponent != 1.0:
        g = ref_depth * (g / ref_depth) ** exponent
    vals = scale * g + offset
    if sigma > 0:
        vals = vals + rng.normal(0.0, sigma, size=vals.shape)
    out[valid] = np.maximum(vals, 0.0)
    return DepthMap(out, depth.camera_id)


# -- file formats -------------------------------------------------------------

def write_pgm(path, pixels) -> None:
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        raise ValueError("PGM export expects uint8 pixels")
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(px).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


_PTDM_MAGIC = b"PTDM"


def write_ptdm(path, depth: DepthMap) -> None:
    """16-byte header (magic, width, height, reserved) then row-major float32 mm."""
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(_PTDM_MAGIC + struct.pack("<iii", w, h, 0))
        fh.write(np.ascontiguousarray(depth.depth, dtype="<f4").tobytes())


def read_ptdm(path, camera_id: str = "cam1") -> DepthMap:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if head[:4] != _PTDM_MAGIC:
            raise ValueError("bad PTDM magic")
        w, h, _ = struct.unpack("<iii", head[4:16])
        arr = np.frombuffer(fh.read(4 * w * h), dtype="<f4")
    if arr.size != w * h:
        raise ValueError("truncated PTDM payload")
    return DepthMap(arr.reshape(h, w).astype(np.float64), camera_id)
