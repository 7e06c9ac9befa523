"""Linear-elastic P1 tetrahedral FEM with prescribed-displacement indentation.

Penetrating outer-surface nodes are projected onto the indentor sphere along
the approach direction and held there; end-ring nodes are clamped; every
other DOF solves ``K_ff u_f = -K_fp u_p`` by Jacobi-preconditioned CG.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .mesh import SkinMesh

__all__ = [
    "MaterialParams",
    "IndentorSpec",
    "GroundTruthField",
    "DatasetRecord",
    "InvertedElementError",
    "NoContactError",
    "ConvergenceError",
    "DatasetGenerationError",
    "element_stiffness",
    "assemble_stiffness",
    "solve_indentation",
    "indentor_at_node",
    "indentor_at",
    "default_contact_locations",
    "generate_dataset",
    "write_dataset",
    "read_dataset_record",
    "strain_energy",
]

INDENTOR_RADIUS = 6.0  # 12 mm diameter sphere
MAX_DEPTH = 5.0


class InvertedElementError(ValueError):
    pass


class NoContactError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    pass


class DatasetGenerationError(RuntimeError):
    def __init__(self, location_id, depth, cause):
        super().__init__(f"grid point (location {location_id}, depth {depth} mm): {cause}")
        self.location_id = location_id
        self.depth = depth
        self.cause = cause


@dataclass(frozen=True)
class MaterialParams:
    youngs_modulus: float = 0.22   # N/mm^2
    poisson_ratio: float = 0.49

    def __post_init__(self):
        if not self.youngs_modulus > 0:
            raise ValueError("Young's modulus must be positive")
        if not 0 < self.poisson_ratio < 0.5:
            raise ValueError("Poisson ratio must lie in (0, 0.5)")

    def elasticity_matrix(self) -> np.ndarray:
        E, nu = self.youngs_modulus, self.poisson_ratio
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        C = np.zeros((6, 6))
        C[:3, :3] = lam
        C[np.arange(3), np.arange(3)] += 2 * mu
        C[np.arange(3, 6), np.arange(3, 6)] = mu
        return C


@dataclass(frozen=True)
class IndentorSpec:
    center: tuple
    radius: float
    direction: tuple
    depth: float
    max_depth: float = MAX_DEPTH

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("indentor radius must be positive")
        if not 0 <= self.depth <= self.max_depth + 1e-12:
            raise ValueError(f"depth {self.depth} outside [0, {self.max_depth}]")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("approach direction must be a unit vector")


@dataclass(frozen=True, eq=False)
class GroundTruthField:
    displacements: np.ndarray   # (n_nodes, 3), mm
    contacted: np.ndarray       # node ids with prescribed displacement
    iterations: int = 0
    residual: float = 0.0

    def free_block(self, mesh: SkinMesh) -> np.ndarray:
        return self.displacements[mesh.free_set]


def indentor_at(mesh: SkinMesh, theta: float, z: float, depth: float,
                radius: float = INDENTOR_RADIUS) -> IndentorSpec:
    """Radially inward indentor touching the outer surface at ``(theta, z)``."""
    inward = np.array([-np.cos(theta), -np.sin(theta), 0.0])
    p0 = np.array([mesh.skin_radius * np.cos(theta), mesh.skin_radius * np.sin(theta), z])
    c = p0 + (depth - radius) * inward
    return IndentorSpec(tuple(c), float(radius), tuple(inward), float(depth))


def indentor_at_node(mesh: SkinMesh, node: int, depth: float,
                     radius: float = INDENTOR_RADIUS) -> IndentorSpec:
    x = mesh.nodes[node]
    return indentor_at(mesh, float(np.arctan2(x[1], x[0])), float(x[2]), depth, radius)


def element_stiffness(coords: np.ndarray, material: MaterialParams):
    """Constant-strain stiffness ``V B^T C B`` for ``(m, 4, 3)`` element coordinates.

    Returns ``(Ke (m, 12, 12), volumes (m,))``; DOF order is node-major
    ``(x0, y0, z0, x1, ...)``.
    """
    coords = np.asarray(coords, dtype=float)
    m = coords.shape[0]
    X = np.concatenate([np.ones((m, 4, 1)), coords], axis=2)
    vol = np.linalg.det(X) / 6.0
    if np.any(vol <= 0):
        bad = np.flatnonzero(vol <= 0)
        raise InvertedElementError(f"{bad.size} tetrahedra with non-positive volume, e.g. {bad[:5]}")
    grads = np.linalg.inv(X)[:, 1:, :]  # (m, 3, 4): d N_a / d x_i
    B = np.zeros((m, 6, 12))
    gx, gy, gz = grads[:, 0], grads[:, 1], grads[:, 2]
    B[:, 0, 0::3] = gx
    B[:, 1, 1::3] = gy
    B[:, 2, 2::3] = gz
    B[:, 3, 0::3] = gy
    B[:, 3, 1::3] = gx
    B[:, 4, 1::3] = gz
    B[:, 4, 2::3] = gy
    B[:, 5, 0::3] = gz
    B[:, 5, 2::3] = gx
    C = material.elasticity_matrix()
    Ke = np.einsum("m,mki,kl,mlj->mij", vol, B, C, B)
    Ke = 0.5 * (Ke + Ke.transpose(0, 2, 1))
    return Ke, vol


def assemble_stiffness(mesh: SkinMesh, material: MaterialParams) -> sp.csr_matrix:
    """Global ``3n x 3n`` stiffness matrix (CSR, symmetric)."""
    tets = mesh.tetrahedra
    Ke, _ = element_stiffness(mesh.nodes[tets], material)
    dofs = (3 * tets[:, :, None] + np.arange(3)[None, None, :]).reshape(-1, 12)
    rows = np.broadcast_to(dofs[:, :, None], Ke.shape).ravel()
    cols = np.broadcast_to(dofs[:, None, :], Ke.shape).ravel()
    n = 3 * mesh.n_nodes
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    return K


def _project_onto_sphere(x, c, R, d):
    """Largest ``s`` with ``|x + s d - c| = R`` for points inside the sphere."""
    w = x - c
    bq = w @ d
    cq = np.einsum("ij,ij->i", w, w) - R * R
    return -bq + np.sqrt(bq * bq - cq)


def _check_axis(mesh: SkinMesh, ind: IndentorSpec):
    c = np.asarray(ind.center, dtype=float)
    d = np.asarray(ind.direction, dtype=float)
    # Closest approach of the axis line to the cylinder axis must fall inside the skin.
    dxy = d[:2]
    if np.linalg.norm(dxy) < 1e-12:
        raise ValueError("indentor axis is parallel to the link axis")
    t = -(c[:2] @ dxy) / (dxy @ dxy)
    closest = c + t * d
    if np.hypot(closest[0], closest[1]) > mesh.skin_radius or abs(closest[2]) > mesh.length / 2:
        raise ValueError("indentor axis does not intersect the skin surface")


def solve_indentation(mesh: SkinMesh, K: sp.csr_matrix, indentor: IndentorSpec,
                      tol: float = 1e-10, maxiter: int | None = None,
                      backend: str | None = None) -> GroundTruthField:
    _check_axis(mesh, indentor)
    n = mesh.n_nodes
    u = np.zeros((n, 3))
    if indentor.depth == 0:
        return GroundTruthField(u, np.zeros(0, dtype=np.int64))

    c = np.asarray(indentor.center, dtype=float)
    d = np.asarray(indentor.direction, dtype=float)
    R = indentor.radius
    cand = mesh.free_set
    x = mesh.nodes[cand]
    inside = np.einsum("ij,ij->i", x - c, x - c) < R * R
    contacted = cand[inside]
    if contacted.size == 0:
        raise NoContactError(
            f"no free node penetrates the indentor at depth {indentor.depth} mm"
        )
    s = _project_onto_sphere(mesh.nodes[contacted], c, R, d)
    u[contacted] = s[:, None] * d[None, :]

    prescribed = np.zeros(3 * n, dtype=bool)
    for nodes in (mesh.clamped, contacted):
        prescribed[(3 * nodes[:, None] + np.arange(3)).ravel()] = True
    free = np.flatnonzero(~prescribed)
    pres = np.flatnonzero(prescribed)
    uflat = u.ravel()
    Kff = K[free][:, free]
    rhs = -(K[free][:, pres] @ uflat[pres])
    if maxiter is None:
        maxiter = 10 * free.size
    xf, it, res = _kernels.pcg_csr(Kff, rhs, tol=tol, maxiter=maxiter, backend=backend)
    if not res <= tol:
        raise ConvergenceError(f"CG stopped at relative residual {res:.3e} after {it} iterations")
    uflat = uflat.copy()
    uflat[free] = xf
    u = uflat.reshape(n, 3)
    if not np.all(np.isfinite(u)):
        raise ConvergenceError("non-finite displacement field")
    return GroundTruthField(u, np.sort(contacted), int(it), float(res))


def strain_energy(K: sp.csr_matrix, field: GroundTruthField) -> float:
    uf = field.displacements.ravel()
    return 0.5 * float(uf @ (K @ uf))


def default_contact_locations(mesh: SkinMesh, n_axial: int = 7, n_angular: int = 7):
    """Free nodes on an evenly spaced ``n_axial x n_angular`` sub-grid.

    Axial rows are spread over the free rows (ends included); angles over
    the full circle.
    """
    free_rows = np.unique(mesh.grid_coords(mesh.free_set)[1])
    rows = free_rows[np.round(np.linspace(0, free_rows.size - 1, n_axial)).astype(int)]
    cols = np.round(np.arange(n_angular) * mesh.n_theta / n_angular).astype(int) % mesh.n_theta
    return [int(mesh.node_index(j, k, 0)) for k in rows for j in cols]


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    field: GroundTruthField
    indentor: IndentorSpec
    location_id: int
    node: int
    depth: float
    meta: dict = field(default_factory=dict)


def generate_dataset(mesh: SkinMesh, material: MaterialParams, locations, depths,
                     K: sp.csr_matrix | None = None, progress=None):
    """Solve every ``(location, depth)`` pair, location-major order.

    ``locations`` are free-node ids; the record's ``location_id`` is the
    position in that list.
    """
    if K is None:
        K = assemble_stiffness(mesh, material)
    records = []
    for li, node in enumerate(locations):
        for depth in depths:
            try:
                ind = indentor_at_node(mesh, int(node), float(depth))
                f = solve_indentation(mesh, K, ind)
            except Exception as exc:  # annotate with the grid point
                raise DatasetGenerationError(li, float(depth), exc) from exc
            records.append(DatasetRecord(f, ind, li, int(node), float(depth)))
            if progress is not None:
                progress(len(records))
    return records


def write_dataset(records, out_dir) -> str:
    """One text file per record plus ``manifest.txt``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, rec in enumerate(records):
        name = f"record_{i:05d}.txt"
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            fh.write(f"# location={rec.location_id} node={rec.node} depth_mm={rec.depth!r}\n")
            for n, (dx, dy, dz) in enumerate(rec.field.displacements.tolist()):
                fh.write(f"d {n} {dx!r} {dy!r} {dz!r}\n")
        names.append(name)
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(names) + "\n")
    return manifest


def read_dataset_record(path):
    """Parse one record file into ``(header dict, displacement array)``."""
    header = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, v = tok.split("=")
                    header[k] = float(v) if "." in v or "e" in v else int(v)
            elif line.startswith("d "):
                _, n, dx, dy, dz = line.split()
                rows.append((int(n), float(dx), float(dy), float(dz)))
    rows.sort()
    return header, np.array([r[1:] for r in rows])
