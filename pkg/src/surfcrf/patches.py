"""Terrain-like image patches: column sampling along quad-mesh normals,
per-column ground truth from a reference mesh, seam-aware padding between the
6 cube faces, and mapping predictions back to world space."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import accel
from .quadsphere import QuadMesh, QuadSphere, build_quadsphere
from .volume import Volume, load_svol, save_svol


@dataclass(eq=False)
class ColumnGraph:
    """Grid topology shared by patch-shaped arrays (P patches of H x W columns).

    valid marks columns with real geometry (corner pad blocks have none);
    owned marks the single slot per global vertex that contributes to merged
    output; dup_src holds, per valid slot, the flat index of its owning slot.
    """
    valid: np.ndarray    # (P,H,W) bool
    owned: np.ndarray    # (P,H,W) bool
    gid: np.ndarray      # (P,H,W) int64, -1 where invalid
    dup_src: np.ndarray  # (P,H,W) int64 flat index, -1 where invalid
    n_vertices: int

    @property
    def shape(self):
        return self.valid.shape

    def owner_slots(self) -> np.ndarray:
        """Flat slot index per global vertex."""
        flat_gid = self.gid.ravel()
        flat_owned = self.owned.ravel()
        out = np.full(self.n_vertices, -1, dtype=np.int64)
        idx = np.nonzero(flat_owned)[0]
        out[flat_gid[idx]] = idx
        if np.any(out < 0):
            raise AssertionError("vertex without an owning column")
        return out

    def merge(self, field: np.ndarray) -> np.ndarray:
        """Per-slot field (P,H,W,...) -> per-vertex field (Nv,...)."""
        flat = field.reshape(-1, *field.shape[3:])
        return flat[self.owner_slots()]

    def split(self, field: np.ndarray, fill=0) -> np.ndarray:
        """Per-vertex field (Nv,...) -> per-slot field (P,H,W,...)."""
        P, H, W = self.shape
        out = np.full((P * H * W, *field.shape[1:]), fill, dtype=field.dtype)
        flat_gid = self.gid.ravel()
        ok = flat_gid >= 0
        out[ok] = field[flat_gid[ok]]
        return out.reshape(P, H, W, *field.shape[1:])


def make_toy_graph(height: int, width: int, patches: int = 1) -> ColumnGraph:
    """Single-owner grid with no pads; used by CRF unit tests and oracles."""
    P, H, W = patches, height, width
    gid = np.arange(P * H * W, dtype=np.int64).reshape(P, H, W)
    return ColumnGraph(valid=np.ones((P, H, W), dtype=bool),
                       owned=np.ones((P, H, W), dtype=bool),
                       gid=gid, dup_src=gid.reshape(P, H, W).copy(),
                       n_vertices=P * H * W)


@dataclass(eq=False)
class PatchSet:
    """6 padded (W,W,Z) intensity grids plus per-column world geometry.

    Sample i of a column sits at base + (i - center_index)*delta*normal, so
    the center sample lies on the pre-segmentation vertex.
    """
    sphere: QuadSphere
    graph: ColumnGraph
    samples: np.ndarray   # (6,W,W,Z) float32
    base: np.ndarray      # (6,W,W,3) float64
    normal: np.ndarray    # (6,W,W,3) float64
    z_len: int
    delta: float
    pad: int

    @property
    def center_index(self) -> int:
        return self.z_len // 2

    def column_points(self) -> np.ndarray:
        """World sample points, (6,W,W,Z,3); invalid columns give zeros."""
        offs = (np.arange(self.z_len) - self.center_index) * self.delta
        pts = self.base[..., None, :] + offs[None, None, None, :, None] * self.normal[..., None, :]
        return np.where(self.graph.valid[..., None, None], pts, 0.0)


@dataclass
class GroundTruth:
    """Per global vertex: surface sample index and validity (ray hit)."""
    surface_index: np.ndarray  # (Nv,) int64
    valid: np.ndarray          # (Nv,) bool

    def to_json(self) -> str:
        return json.dumps({"surface_index": self.surface_index.tolist(),
                           "valid": self.valid.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        doc = json.loads(text)
        return cls(surface_index=np.asarray(doc["surface_index"], dtype=np.int64),
                   valid=np.asarray(doc["valid"], dtype=bool))


# ---------------------------------------------------------------------------
# padded grid construction


def _boundary_lines(grid):
    n = grid.shape[0] - 1
    return {
        0: grid[0, :],    # u = 0 side
        1: grid[n, :],    # u = n side
        2: grid[:, 0],    # v = 0 side
        3: grid[:, n],    # v = n side
    }


def _depth_line(grid, side, depth, reverse):
    n = grid.shape[0] - 1
    if side == 0:
        line = grid[depth, :]
    elif side == 1:
        line = grid[n - depth, :]
    elif side == 2:
        line = grid[:, depth]
    else:
        line = grid[:, n - depth]
    return line[::-1] if reverse else line


def _face_adjacency(grids):
    """For each (face, side): the neighbor (face, side, reversed) across the
    shared cube edge, found by matching boundary id sequences."""
    adj = {}
    lines = [_boundary_lines(grids[f]) for f in range(6)]
    for f in range(6):
        for s in range(4):
            seq = lines[f][s]
            for g in range(6):
                if g == f:
                    continue
                for s2 in range(4):
                    other = lines[g][s2]
                    if np.array_equal(seq, other):
                        adj[(f, s)] = (g, s2, False)
                    elif np.array_equal(seq, other[::-1]):
                        adj[(f, s)] = (g, s2, True)
    return adj


def padded_gid_grids(qs: QuadSphere, pad: int) -> np.ndarray:
    """(6, n+1+2p, n+1+2p) global-id grids; -1 in the p x p corner blocks,
    which have no diagonal neighbor on the cube (the 8 degree-3 corners)."""
    n = qs.n
    if pad > n:
        raise ValueError(f"pad {pad} exceeds face grid size n={n}")
    W = n + 1 + 2 * pad
    adj = _face_adjacency(qs.grids)
    out = np.full((6, W, W), -1, dtype=np.int64)
    for f in range(6):
        out[f, pad:pad + n + 1, pad:pad + n + 1] = qs.grids[f]
        for s in range(4):
            g, s2, rev = adj[(f, s)]
            for d in range(1, pad + 1):
                line = _depth_line(qs.grids[g], s2, d, rev)
                if s == 0:
                    out[f, pad - d, pad:pad + n + 1] = line
                elif s == 1:
                    out[f, pad + n + d, pad:pad + n + 1] = line
                elif s == 2:
                    out[f, pad:pad + n + 1, pad - d] = line
                else:
                    out[f, pad:pad + n + 1, pad + n + d] = line
    return out


def build_column_graph(qs: QuadSphere, pad: int) -> ColumnGraph:
    gid = padded_gid_grids(qs, pad)
    P, H, W = gid.shape
    valid = gid >= 0
    n = qs.n
    interior = np.zeros_like(valid)
    interior[:, pad:pad + n + 1, pad:pad + n + 1] = True

    owned = np.zeros_like(valid)
    claimed = np.zeros(len(qs.vertices), dtype=bool)
    for f in range(6):
        sub = gid[f, pad:pad + n + 1, pad:pad + n + 1].ravel()
        fresh = ~claimed[sub]
        owned[f, pad:pad + n + 1, pad:pad + n + 1] = fresh.reshape(n + 1, n + 1)
        claimed[sub[fresh]] = True
    if not claimed.all():
        raise AssertionError("unclaimed quad vertex in ownership pass")

    graph = ColumnGraph(valid=valid, owned=owned, gid=gid,
                        dup_src=np.full((P, H, W), -1, dtype=np.int64),
                        n_vertices=len(qs.vertices))
    owner = graph.owner_slots()
    flat_gid = gid.ravel()
    dup = np.full(P * H * W, -1, dtype=np.int64)
    ok = flat_gid >= 0
    dup[ok] = owner[flat_gid[ok]]
    graph.dup_src = dup.reshape(P, H, W)
    return graph


# ---------------------------------------------------------------------------
# sampling, ground truth, reconstruction


def sample_columns(vol: Volume, qm: QuadMesh, z_len: int, delta: float, pad: int) -> PatchSet:
    """Trilinear column sampling along quad-vertex normals; each face grid is
    extended by ``pad`` rings of true neighbor columns so convolution windows
    at seams see real geometry."""
    if z_len < 2:
        raise ValueError("z_len must be >= 2")
    if delta <= 0:
        raise ValueError("delta must be > 0")
    if pad < 0:
        raise ValueError("pad must be >= 0")
    qs = qm.sphere
    graph = build_column_graph(qs, pad)
    base = graph.split(qm.positions, fill=0.0)
    normal = graph.split(qm.normals, fill=0.0)
    ps = PatchSet(sphere=qs, graph=graph, samples=None, base=base, normal=normal,
                  z_len=z_len, delta=float(delta), pad=pad)
    pts = ps.column_points().reshape(-1, 3)
    vals = accel.trilinear_gather(vol.data, np.asarray(vol.origin), np.asarray(vol.spacing), pts)
    samples = vals.reshape(*graph.shape, z_len).astype(np.float32)
    samples[~graph.valid] = 0.0
    ps.samples = samples
    return ps


def ground_truth(qm: QuadMesh, ref, z_len: int, delta: float) -> GroundTruth:
    """Intersect each vertex normal line with the reference mesh; the hit with
    smallest |t| (ties toward negative t, i.e. inside) is rounded to the
    nearest sample index."""
    t, hit = accel.raycast_min_abs_t(ref.vertices, ref.faces, qm.positions, qm.normals)
    c = z_len // 2
    g = np.rint(t / delta).astype(np.int64) + c
    g = np.clip(g, 0, z_len - 1)
    g[~hit] = 0
    return GroundTruth(surface_index=g, valid=hit)


def labeling_to_world(labels: np.ndarray, ps: PatchSet):
    """Per-vertex surface indices -> quad surface (vertices, quad faces)."""
    if len(labels) != ps.graph.n_vertices:
        raise ValueError("labeling does not cover all interior columns")
    base = ps.graph.merge(ps.base)
    normal = ps.graph.merge(ps.normal)
    offs = (np.asarray(labels, dtype=np.float64) - ps.center_index) * ps.delta
    verts = base + offs[:, None] * normal
    return verts, ps.sphere.faces


# ---------------------------------------------------------------------------
# serialization: one .svol per patch plus a JSON sidecar


def save_patchset(ps: PatchSet, dirpath) -> None:
    os.makedirs(dirpath, exist_ok=True)
    W = ps.graph.shape[1]
    for f in range(6):
        vol = Volume(dims=(W, W, ps.z_len), spacing=(1.0, 1.0, ps.delta),
                     origin=(0.0, 0.0, 0.0), data=ps.samples[f].astype(np.float32))
        save_svol(vol, os.path.join(dirpath, f"patch{f}.svol"))
    doc = {
        "level": ps.sphere.level,
        "z_len": ps.z_len,
        "delta": ps.delta,
        "pad": ps.pad,
        "center_index": ps.center_index,
        "base": ps.base.tolist(),
        "normal": ps.normal.tolist(),
        "gid": ps.graph.gid.tolist(),
    }
    with open(os.path.join(dirpath, "patchset.json"), "w") as fh:
        json.dump(doc, fh)


def load_patchset(dirpath) -> PatchSet:
    with open(os.path.join(dirpath, "patchset.json")) as fh:
        doc = json.load(fh)
    qs = build_quadsphere(int(doc["level"]))
    pad = int(doc["pad"])
    graph = build_column_graph(qs, pad)
    gid = np.asarray(doc["gid"], dtype=np.int64)
    if not np.array_equal(gid, graph.gid):
        raise ValueError(f"{dirpath}: stored gid grids do not match level/pad")
    z_len = int(doc["z_len"])
    samples = np.zeros((*graph.shape, z_len), dtype=np.float32)
    for f in range(6):
        vol = load_svol(os.path.join(dirpath, f"patch{f}.svol"))
        samples[f] = vol.data
    return PatchSet(sphere=qs, graph=graph, samples=samples,
                    base=np.asarray(doc["base"], dtype=np.float64),
                    normal=np.asarray(doc["normal"], dtype=np.float64),
                    z_len=z_len, delta=float(doc["delta"]), pad=pad)
