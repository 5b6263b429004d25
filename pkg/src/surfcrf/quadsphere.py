"""Quadrilateral parameterization of the unit sphere by recursive cube
subdivision, spherical point location, and barycentric transfer of the quad
structure onto the pre-segmentation surface."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import accel
from .mesh import (MeshError, SphereMap, TriMesh, load_quad_mesh_records,
                   save_quad_mesh_records, vertex_normals)


class LocateError(ValueError):
    """No containing spherical triangle found (map not bijective)."""


# cube corner c: bit 0 -> +x, bit 1 -> +y, bit 2 -> +z
_CORNER_SIGNS = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)]) * 2 - 1
# per face: corner ids at grid (0,0), (n,0), (0,n); outward orientation
_FACE_CORNERS = (
    (1, 3, 5),  # +x: u->y, v->z
    (0, 4, 2),  # -x: u->z, v->y
    (2, 6, 3),  # +y: u->z, v->x
    (0, 1, 4),  # -y: u->x, v->z
    (4, 5, 6),  # +z: u->x, v->y
    (0, 2, 1),  # -z: u->y, v->x
)


@dataclass(eq=False)
class QuadSphere:
    """6 stitched (n+1)x(n+1) face grids of unit-sphere vertices, n = 2^r.

    Shared cube edges/corners are deduplicated at build time: the grids index
    one global vertex table, so V = 6n^2+2 and exactly 8 vertices (the cube
    corners) have degree 3.
    """
    level: int
    vertices: np.ndarray  # (V,3) float64 unit
    grids: np.ndarray     # (6, n+1, n+1) int64

    @property
    def n(self) -> int:
        return 2 ** self.level

    @property
    def faces(self) -> np.ndarray:
        """Quad faces (6n^2, 4), CCW from outside."""
        g = self.grids
        f = np.stack([g[:, :-1, :-1], g[:, 1:, :-1], g[:, 1:, 1:], g[:, :-1, 1:]], axis=-1)
        return f.reshape(-1, 4)

    def _edge_keys(self) -> np.ndarray:
        quads = self.faces
        V = len(self.vertices)
        sides = [np.stack([quads[:, a], quads[:, (a + 1) % 4]], axis=1) for a in range(4)]
        e = np.concatenate(sides)
        lo = e.min(axis=1).astype(np.int64)
        hi = e.max(axis=1).astype(np.int64)
        return np.unique(lo * V + hi)

    def edge_count(self) -> int:
        return len(self._edge_keys())

    def vertex_degrees(self) -> np.ndarray:
        V = len(self.vertices)
        key = self._edge_keys()
        deg = np.zeros(V, dtype=np.int64)
        np.add.at(deg, key // V, 1)
        np.add.at(deg, key % V, 1)
        return deg


def build_quadsphere(level: int) -> QuadSphere:
    """Inscribed cube projected to the sphere, then ``level`` recursions of
    quad subdivision with edge midpoints and face centers pushed outward."""
    if level < 0:
        raise ValueError("recursion level must be >= 0")
    verts = [v / np.linalg.norm(v) for v in _CORNER_SIGNS.astype(np.float64)]
    grids = []
    for c00, cn0, c0n in _FACE_CORNERS:
        cnn_signs = _CORNER_SIGNS[cn0] + _CORNER_SIGNS[c0n] - _CORNER_SIGNS[c00]
        cnn = int(((cnn_signs > 0) * [1, 2, 4]).sum())
        grids.append(np.asarray([[c00, c0n], [cn0, cnn]], dtype=np.int64))
    grids = np.stack(grids)

    for _ in range(level):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        old_n = grids.shape[1] - 1
        new = np.zeros((6, 2 * old_n + 1, 2 * old_n + 1), dtype=np.int64)
        for f in range(6):
            g = grids[f]
            for i in range(old_n + 1):
                for j in range(old_n + 1):
                    new[f, 2 * i, 2 * j] = g[i, j]
                    if i < old_n:
                        new[f, 2 * i + 1, 2 * j] = midpoint(g[i, j], g[i + 1, j])
                    if j < old_n:
                        new[f, 2 * i, 2 * j + 1] = midpoint(g[i, j], g[i, j + 1])
                    if i < old_n and j < old_n:
                        m = verts[g[i, j]] + verts[g[i + 1, j]] + verts[g[i, j + 1]] + verts[g[i + 1, j + 1]]
                        m /= np.linalg.norm(m)
                        new[f, 2 * i + 1, 2 * j + 1] = len(verts)
                        verts.append(m)
        grids = new
    return QuadSphere(level=level, vertices=np.asarray(verts), grids=grids)


# ---------------------------------------------------------------------------
# point location


def _location_tables(smap: SphereMap):
    pos = smap.positions
    tris = smap.mesh.faces
    mats = pos[tris].transpose(0, 2, 1)  # columns are the three vertices
    inv = np.linalg.inv(mats)
    cent = pos[tris].mean(axis=1)
    cent /= np.linalg.norm(cent, axis=1)[:, None]
    cosang = np.einsum("fij,fj->fi", pos[tris], cent).min(axis=1)
    # geodesic disc bound with a small angular guard for roundoff
    cos_bound = np.cos(np.minimum(np.arccos(np.clip(cosang, -1, 1)) + 1e-7, np.pi))
    return inv, cent, cos_bound


def locate_on_sphere(points, smap: SphereMap):
    """Map unit points to (triangle id, t1, t2, t3) of the spherical mesh via
    gnomonic containment; exact-edge ties go to the lowest triangle id.

    points: (3,) or (N,3).  Raises LocateError when a point lands in no
    triangle (the map is not bijective there).
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    inv, cent, cos_bound = _location_tables(smap)
    face, bary = accel.locate_points(inv, cent, cos_bound, pts)
    if np.any(face < 0):
        bad = int(np.nonzero(face < 0)[0][0])
        raise LocateError(f"no containing triangle for point {pts[bad].tolist()}")
    if single:
        return int(face[0]), bary[0]
    return face, bary


# ---------------------------------------------------------------------------
# remeshing


@dataclass(eq=False)
class QuadMesh:
    """Quad-sphere topology carried onto the pre-segmentation surface."""
    sphere: QuadSphere
    positions: np.ndarray  # (V,3) float64 mm
    normals: np.ndarray    # (V,3) float64 unit
    bary_face: np.ndarray  # (V,) int64: triangle of the source TriMesh
    bary: np.ndarray       # (V,3) float64, sums to 1


def remesh(mesh: TriMesh, smap: SphereMap, qs: QuadSphere) -> QuadMesh:
    """Locate every quad-sphere vertex in the mapped mesh and pull back its
    barycentric record onto the original surface (positions and normals)."""
    face, bary = locate_on_sphere(qs.vertices, smap)
    tri = mesh.faces[face]
    pos = np.einsum("vk,vkj->vj", bary, mesh.vertices[tri])
    vn = vertex_normals(mesh)
    nrm = np.einsum("vk,vkj->vj", bary, vn[tri])
    norms = np.linalg.norm(nrm, axis=1)
    if np.any(norms <= 0):
        raise MeshError("degenerate interpolated normal in remesh")
    return QuadMesh(sphere=qs, positions=pos, normals=nrm / norms[:, None],
                    bary_face=face, bary=bary)


def save_quadmesh(qm: QuadMesh, mesh_path, sidecar_path) -> None:
    save_quad_mesh_records(mesh_path, qm.positions, qm.sphere.faces)
    doc = {
        "level": qm.sphere.level,
        "bary_face": qm.bary_face.tolist(),
        "bary": qm.bary.tolist(),
        "normals": qm.normals.tolist(),
    }
    with open(sidecar_path, "w") as fh:
        json.dump(doc, fh)


def load_quadmesh(mesh_path, sidecar_path) -> QuadMesh:
    verts, quads = load_quad_mesh_records(mesh_path)
    with open(sidecar_path) as fh:
        doc = json.load(fh)
    qs = build_quadsphere(int(doc["level"]))
    if len(verts) != len(qs.vertices):
        raise MeshError(
            f"quad mesh has {len(verts)} vertices, level {doc['level']} implies {len(qs.vertices)}")
    return QuadMesh(sphere=qs, positions=verts,
                    normals=np.asarray(doc["normals"], dtype=np.float64),
                    bary_face=np.asarray(doc["bary_face"], dtype=np.int64),
                    bary=np.asarray(doc["bary"], dtype=np.float64))
