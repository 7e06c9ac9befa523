"""Cylindrical skin mesh, free/fixed node classification and marker anchors.

Nodes live on a structured (angle, axial, radial-layer) grid; every hexahedral
cell is split into six tetrahedra with the same Kuhn pattern, which keeps the
mesh conforming across the periodic seam and makes it invariant under any
rotation by a whole number of angular steps.

The link frame has its z-axis on the cylinder axis and its origin at
mid-length, so the skin spans ``z in [-L/2, L/2]``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateGeometryError",
    "SkinMesh",
    "MarkerAnchor",
    "MarkerSet",
    "build_cylinder_mesh",
    "default_mesh",
    "place_markers",
    "marker_world_position",
    "marker_world_positions",
    "surface_laplacian",
    "export_mesh",
    "load_mesh_text",
]

DEFAULT_RADIUS = 40.0
DEFAULT_LENGTH = 300.0
DEFAULT_ELEMENT_SIZE = 10.0
DEFAULT_RING_WIDTH = 15.0
DEFAULT_THICKNESS = 5.0


class DegenerateGeometryError(ValueError):
    """Mesh parameters give no tetrahedra or inverted elements."""


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SkinMesh:
    nodes: np.ndarray          # (n, 3) rest positions, mm
    tetrahedra: np.ndarray     # (m, 4) node indices, positive orientation
    free_set: np.ndarray       # outer-surface nodes allowed to move
    fixed_set: np.ndarray      # outer-surface nodes in the end rings
    clamped: np.ndarray        # every node (any layer) in the end rings
    skin_radius: float
    inner_radius: float
    length: float
    element_size: float
    n_theta: int
    n_axial: int
    n_layers: int
    theta_offset: float = 0.0
    fixed_ring_width: float = DEFAULT_RING_WIDTH

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_free(self) -> int:
        return self.free_set.shape[0]

    @property
    def thickness(self) -> float:
        return self.skin_radius - self.inner_radius

    def node_index(self, j, k, layer):
        """Grid index ``(angle j, axial row k, layer)`` to node id; layer 0 is the outer surface."""
        j = np.mod(j, self.n_theta)
        return (layer * self.n_axial + k) * self.n_theta + j

    @property
    def outer_nodes(self) -> np.ndarray:
        return np.arange(self.n_theta * self.n_axial)

    @property
    def surface_nodes(self) -> np.ndarray:
        return self.outer_nodes

    @property
    def inner_nodes(self) -> np.ndarray:
        base = (self.n_layers - 1) * self.n_axial * self.n_theta
        return base + np.arange(self.n_theta * self.n_axial)

    def outer_partner(self, node):
        """Outer-surface node on the same (angle, axial) grid line."""
        return np.mod(node, self.n_theta * self.n_axial)

    @property
    def theta_step(self) -> float:
        return 2.0 * np.pi / self.n_theta

    @property
    def axial_positions(self) -> np.ndarray:
        return np.linspace(-self.length / 2, self.length / 2, self.n_axial)

    def grid_coords(self, node):
        """Return ``(j, k, layer)`` for node ids."""
        node = np.asarray(node)
        per_layer = self.n_theta * self.n_axial
        layer, rem = np.divmod(node, per_layer)
        k, j = np.divmod(rem, self.n_theta)
        return j, k, layer

    def tet_volumes(self) -> np.ndarray:
        return _signed_volumes(self.nodes, self.tetrahedra)

    def free_position(self) -> dict:
        """Map node id -> position in ``free_set``."""
        return {int(n): i for i, n in enumerate(self.free_set)}


def _signed_volumes(nodes, tets):
    p = nodes[tets]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


# Six tetrahedra of the unit cube sharing the diagonal 000-111.
_KUHN = []
for _perm in itertools.permutations(range(3)):
    _v = [0, 0, 0]
    _path = [tuple(_v)]
    for _axis in _perm:
        _v[_axis] = 1
        _path.append(tuple(_v))
    _KUHN.append(_path)


def build_cylinder_mesh(
    radius: float = DEFAULT_RADIUS,
    length: float = DEFAULT_LENGTH,
    element_size: float = DEFAULT_ELEMENT_SIZE,
    fixed_ring_width: float = DEFAULT_RING_WIDTH,
    thickness: float = DEFAULT_THICKNESS,
    n_theta: int | None = None,
    n_axial: int | None = None,
    n_layers: int | None = None,
    theta_offset: float = 0.0,
) -> SkinMesh:
    """Tetrahedral cylindrical shell of outer radius ``radius``.

    Unless overridden, the angular count is ``floor(2*pi*r_mid/h)`` and the
    axial count ``round(L/h) + 1``; with the defaults (r=40, L=300, h=10,
    5 mm shell, 15 mm rings) this gives 23 x 31 outer nodes of which 621 are
    free.
    """
    if not radius > 0:
        raise DegenerateGeometryError(f"radius must be positive, got {radius}")
    if not 0 < element_size < radius:
        raise DegenerateGeometryError(
            f"element_size must lie in (0, radius={radius}), got {element_size}"
        )
    if not length > 2 * fixed_ring_width:
        raise DegenerateGeometryError(
            f"length {length} must exceed twice the fixed ring width {fixed_ring_width}"
        )
    if not 0 < thickness < radius:
        raise DegenerateGeometryError(f"thickness must lie in (0, radius), got {thickness}")
    r_in = radius - thickness
    r_mid = radius - thickness / 2
    if n_theta is None:
        n_theta = int(np.floor(2 * np.pi * r_mid / element_size))
    if n_axial is None:
        n_axial = int(round(length / element_size)) + 1
    if n_layers is None:
        n_layers = max(1, int(round(thickness / element_size))) + 1
    if n_theta < 3 or n_axial < 2 or n_layers < 2:
        raise DegenerateGeometryError(
            f"discretization ({n_theta}, {n_axial}, {n_layers}) yields no tetrahedra"
        )

    thetas = theta_offset + 2 * np.pi * np.arange(n_theta) / n_theta
    zs = np.linspace(-length / 2, length / 2, n_axial)
    radii = np.linspace(radius, r_in, n_layers)
    rr, zz, tt = np.meshgrid(radii, zs, thetas, indexing="ij")
    nodes = np.stack([rr * np.cos(tt), rr * np.sin(tt), zz], axis=-1).reshape(-1, 3)
    # Outer radius is exact; cos/sin rounding is below 1e-13 mm.
    nodes[: n_theta * n_axial, :2] *= (
        radius / np.hypot(nodes[: n_theta * n_axial, 0], nodes[: n_theta * n_axial, 1])
    )[:, None]

    def nid(j, k, layer):
        return (layer * n_axial + k) * n_theta + np.mod(j, n_theta)

    jj, kk, ll = np.meshgrid(
        np.arange(n_theta), np.arange(n_axial - 1), np.arange(n_layers - 1), indexing="ij"
    )
    jj, kk, ll = jj.ravel(), kk.ravel(), ll.ravel()
    tets = []
    for path in _KUHN:
        tets.append(np.stack([nid(jj + a, kk + b, ll + c) for a, b, c in path], axis=1))
    tets = np.concatenate(tets, axis=0)
    if tets.shape[0] == 0:
        raise DegenerateGeometryError("mesh has zero tetrahedra")

    vols = _signed_volumes(nodes, tets)
    flip = vols < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    vols = np.abs(vols)
    if np.any(vols <= 1e-9 * element_size**3):
        raise DegenerateGeometryError("mesh contains degenerate (zero-volume) tetrahedra")

    per_layer = n_theta * n_axial
    z_all = nodes[:, 2]
    near_end = np.minimum(z_all + length / 2, length / 2 - z_all) <= fixed_ring_width + 1e-9
    clamped = np.flatnonzero(near_end)
    outer = np.arange(per_layer)
    fixed = outer[near_end[outer]]
    free = outer[~near_end[outer]]

    return SkinMesh(
        nodes=_frozen(nodes),
        tetrahedra=_frozen(tets.astype(np.int64)),
        free_set=_frozen(free),
        fixed_set=_frozen(fixed),
        clamped=_frozen(clamped),
        skin_radius=float(radius),
        inner_radius=float(r_in),
        length=float(length),
        element_size=float(element_size),
        n_theta=n_theta,
        n_axial=n_axial,
        n_layers=n_layers,
        theta_offset=float(theta_offset),
        fixed_ring_width=float(fixed_ring_width),
    )


_DEFAULT_MESH = None


def default_mesh() -> SkinMesh:
    global _DEFAULT_MESH
    if _DEFAULT_MESH is None:
        _DEFAULT_MESH = build_cylinder_mesh()
    return _DEFAULT_MESH


def surface_laplacian(mesh: SkinMesh):
    """Graph Laplacian over the free outer nodes, fixed neighbours acting as zero.

    Returns a sparse ``(N, N)`` matrix in free-set order. Neighbours are the
    four grid neighbours on the outer surface.
    """
    import scipy.sparse as sp

    pos = mesh.free_position()
    rows, cols, vals = [], [], []
    for i, node in enumerate(mesh.free_set):
        j, k, _ = mesh.grid_coords(node)
        nbrs = [
            mesh.node_index(j + 1, k, 0),
            mesh.node_index(j - 1, k, 0),
        ]
        if k > 0:
            nbrs.append(mesh.node_index(j, k - 1, 0))
        if k < mesh.n_axial - 1:
            nbrs.append(mesh.node_index(j, k + 1, 0))
        rows.append(i)
        cols.append(i)
        vals.append(float(len(nbrs)))
        for nb in nbrs:
            q = pos.get(int(nb))
            if q is not None:
                rows.append(i)
                cols.append(q)
                vals.append(-1.0)
    n = mesh.n_free
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@dataclass(frozen=True)
class MarkerAnchor:
    theta: float
    z: float
    nodes: tuple          # inner-surface nodes of the enclosing triangle
    weights: tuple        # barycentric weights, sum to 1
    rest: tuple           # rest position on the inner cylinder, mm


@dataclass(frozen=True, eq=False)
class MarkerSet:
    anchors: tuple
    diameter: float
    rings: int
    per_ring: int
    n_nodes: int

    def __len__(self):
        return len(self.anchors)

    @property
    def rest_positions(self) -> np.ndarray:
        return np.array([a.rest for a in self.anchors], dtype=float)

    def interpolation_matrix(self):
        """Sparse ``(markers, n_nodes)`` barycentric interpolation matrix."""
        import scipy.sparse as sp

        rows, cols, vals = [], [], []
        for m, a in enumerate(self.anchors):
            for n, w in zip(a.nodes, a.weights):
                rows.append(m)
                cols.append(n)
                vals.append(w)
        return sp.csr_matrix((vals, (rows, cols)), shape=(len(self.anchors), self.n_nodes))


def _anchor(mesh: SkinMesh, theta: float, z: float) -> MarkerAnchor:
    layer = mesh.n_layers - 1
    s = np.mod(theta - mesh.theta_offset, 2 * np.pi) / mesh.theta_step
    j0 = int(np.floor(s))
    a = s - j0
    if j0 >= mesh.n_theta:  # exact wrap within rounding
        j0, a = 0, 0.0
    t = (z + mesh.length / 2) / (mesh.length / (mesh.n_axial - 1))
    k0 = min(int(np.floor(t)), mesh.n_axial - 2)
    b = t - k0
    n00 = int(mesh.node_index(j0, k0, layer))
    n10 = int(mesh.node_index(j0 + 1, k0, layer))
    n01 = int(mesh.node_index(j0, k0 + 1, layer))
    n11 = int(mesh.node_index(j0 + 1, k0 + 1, layer))
    # Quad split along the (0,0)-(1,1) diagonal in (angle, axial) parameters.
    if a >= b:
        nodes, weights = (n00, n10, n11), (1 - a, a - b, b)
    else:
        nodes, weights = (n00, n01, n11), (1 - b, b - a, a)
    r = mesh.inner_radius
    rest = (r * np.cos(theta), r * np.sin(theta), float(z))
    return MarkerAnchor(float(theta), float(z), nodes, tuple(float(w) for w in weights), rest)


def place_markers(
    mesh: SkinMesh,
    rings: int = 9,
    per_ring: int = 16,
    diameter: float = 3.0,
    theta_offset: float = 0.0,
    stagger: bool = True,
) -> MarkerSet:
    """Uniform ring grid of markers on the inner skin surface.

    Ring ``i`` sits at ``z = -L/2 + L (i + 1/2) / rings``; markers within a
    ring are ``2*pi/per_ring`` apart. With ``stagger`` the rings one step
    away from the middle ring (and every second ring after) are rotated by
    half that step, so neighbouring rings never share a viewing angle.
    """
    if rings < 1 or per_ring < 1:
        raise ValueError("rings and per_ring must be >= 1")
    if not diameter > 0:
        raise ValueError("marker diameter must be positive")
    anchors = []
    for i in range(rings):
        z = -mesh.length / 2 + mesh.length * (i + 0.5) / rings
        shift = 0.5 if stagger and (i - (rings - 1) // 2) % 2 else 0.0
        for k in range(per_ring):
            anchors.append(_anchor(mesh, theta_offset + 2 * np.pi * (k + shift) / per_ring, z))
    return MarkerSet(tuple(anchors), float(diameter), rings, per_ring, mesh.n_nodes)


def marker_world_position(mesh: SkinMesh, anchor, displacement_field) -> np.ndarray:
    """Rest anchor position plus barycentric-interpolated nodal displacement."""
    u = np.asarray(displacement_field, dtype=float)
    if u.shape != (mesh.n_nodes, 3):
        raise ValueError(f"displacement field shape {u.shape} != ({mesh.n_nodes}, 3)")
    if isinstance(anchor, (int, np.integer)):
        raise TypeError("pass a MarkerAnchor, not an index")
    for n in anchor.nodes:
        if not 0 <= n < mesh.n_nodes:
            raise IndexError(f"anchor node {n} out of range")
    d = sum(w * u[n] for n, w in zip(anchor.nodes, anchor.weights))
    return np.asarray(anchor.rest) + d


def marker_world_positions(markers: MarkerSet, displacement_field) -> np.ndarray:
    """Vectorized :func:`marker_world_position` over all anchors, ``(M, 3)``."""
    u = np.asarray(displacement_field, dtype=float)
    if u.shape[-2:] != (markers.n_nodes, 3):
        raise ValueError("displacement field does not match mesh node count")
    idx = np.array([a.nodes for a in markers.anchors])
    w = np.array([a.weights for a in markers.anchors])
    return markers.rest_positions + np.einsum("mk,...mkc->...mc", w, u[..., idx, :])


def export_mesh(mesh: SkinMesh, path) -> None:
    """Plain-text export: ``v x y z`` lines then ``t i j k l`` lines (0-based)."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.nodes.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for t in mesh.tetrahedra:
            fh.write("t {} {} {} {}\n".format(*t))


def load_mesh_text(path):
    """Read back ``(nodes, tetrahedra)`` from :func:`export_mesh` output."""
    verts, tets = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "t":
                tets.append([int(p) for p in parts[1:5]])
    return np.array(verts), np.array(tets, dtype=np.int64)
