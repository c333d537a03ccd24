"""Zero-level-set extraction over retained voxels, mesh attributes and evaluation metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch
from scipy.spatial import cKDTree

from .voxgrid import CORNER_OFFSETS, VoxelGrid, encode_keys

log = logging.getLogger(__name__)


# -- case table -------------------------------------------------------------------------------

def _cube_edges() -> list[tuple[int, int, int]]:
    edges = []
    for axis in range(3):
        for k in range(8):
            if not (k >> axis) & 1:
                edges.append((k, k | (1 << axis), axis))
    return edges


EDGES = _cube_edges()


def _faces() -> list[tuple[np.ndarray, list[int], list[int]]]:
    """(outward normal, corners in cyclic order, edge ids between consecutive corners)."""
    out = []
    edge_of = {frozenset(e[:2]): i for i, e in enumerate(EDGES)}
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, 1):
            base = side << axis
            cyc = [base, base | (1 << u), base | (1 << u) | (1 << v), base | (1 << v)]
            normal = np.zeros(3)
            normal[axis] = 1.0 if side else -1.0
            out.append((normal, cyc, [edge_of[frozenset((cyc[i], cyc[(i + 1) % 4]))] for i in range(4)]))
    return out


def _build_table() -> list[list[tuple[int, int, int]]]:
    """Triangles (edge id triples, counter-clockwise seen from the positive side) per case.

    Loops are traced face by face; a face with two diagonal inside corners
    always keeps those corners apart, which makes neighbouring cells agree.
    """
    mid = np.array([(CORNER_OFFSETS[a] + CORNER_OFFSETS[b]) / 2.0 for a, b, _ in EDGES])
    faces = _faces()
    table = []
    for case in range(256):
        inside = [(case >> k) & 1 == 1 for k in range(8)]
        nxt: dict[int, int] = {}
        for normal, cyc, fedges in faces:
            crossing = [i for i in range(4) if inside[cyc[i]] != inside[cyc[(i + 1) % 4]]]
            segs = []
            if len(crossing) == 2:
                a, b = fedges[crossing[0]], fedges[crossing[1]]
                corner = next(c for c in cyc if inside[c])
                segs.append((a, b, corner))
            elif len(crossing) == 4:
                for i in range(4):
                    if inside[cyc[i]]:
                        segs.append((fedges[(i - 1) % 4], fedges[i], cyc[i]))
            for a, b, corner in segs:
                pa, pb, pc = mid[a], mid[b], CORNER_OFFSETS[corner]
                if np.cross(pb - pa, pc - pa) @ normal > 0:
                    a, b = b, a
                nxt[a] = b
        tris = []
        seen: set[int] = set()
        for start in sorted(nxt):
            if start in seen:
                continue
            loop = [start]
            seen.add(start)
            cur = nxt[start]
            while cur != start:
                loop.append(cur)
                seen.add(cur)
                cur = nxt[cur]
            for i in range(1, len(loop) - 1):
                tris.append((loop[0], loop[i], loop[i + 1]))
        table.append(tris)
    return table


TRI_TABLE = _build_table()
_TRI_COUNT = np.array([len(t) for t in TRI_TABLE])
_TRI_PAD = np.full((256, int(_TRI_COUNT.max()), 3), -1, dtype=np.int64)
for _c, _t in enumerate(TRI_TABLE):
    if _t:
        _TRI_PAD[_c, : len(_t)] = _t
_EDGE_ARR = np.array(EDGES, dtype=np.int64)


# -- meshes ---------------------------------------------------------------------------------------

@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def area(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        """Area-weighted uniform points on the surface."""
        rng = np.random.default_rng(seed)
        a = self.area()
        tri = rng.choice(len(a), size=n, p=a / a.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        v = self.vertices[self.faces[tri]]
        return (1 - s)[:, None] * v[:, 0] + (s * (1 - r2))[:, None] * v[:, 1] + (s * r2)[:, None] * v[:, 2]

    def edge_use_counts(self) -> np.ndarray:
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts


def corner_samples(grid: VoxelGrid, field: Any, cells_per_voxel: int, chunk: int = 1 << 16):
    """Deduplicated sdf samples on the fine lattice covering all voxels."""
    n = cells_per_voxel
    ax = np.arange(n + 1)
    local = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    fine = (grid.coords[:, None, :] * n + local[None]).reshape(-1, 3)
    owner = np.repeat(np.arange(grid.num_voxels), len(local))
    keys, first = np.unique(encode_keys(fine), return_index=True)
    fine, owner = fine[first], owner[first]
    pos = grid.origin + fine * (grid.voxel_size / n)
    sdf = np.empty(len(pos))
    with torch.no_grad():
        for s in range(0, len(pos), chunk):
            sl = slice(s, s + chunk)
            sdf[sl] = field.sdf(grid, torch.as_tensor(pos[sl]), owner[sl]).double().numpy()
    return keys, fine, sdf


def extract_mesh(grid: VoxelGrid, field: Any, cells_per_voxel: int = 8) -> TriangleMesh:
    """Marching cubes on each voxel's cells_per_voxel^3 sub-cells, welded across voxel faces."""
    if cells_per_voxel < 1:
        raise ValueError("cells_per_voxel must be >= 1")
    if grid.num_voxels == 0:
        return TriangleMesh.empty()
    n = cells_per_voxel
    keys, fine, sdf = corner_samples(grid, field, n)
    ax = np.arange(n)
    cell_local = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    cells = (grid.coords[:, None, :] * n + cell_local[None]).reshape(-1, 3)
    corner_key = encode_keys(cells[:, None, :] + CORNER_OFFSETS[None])
    csdf = sdf[np.searchsorted(keys, corner_key)]
    case = ((csdf < 0) << np.arange(8)).sum(1)
    active = np.nonzero(_TRI_COUNT[case] > 0)[0]
    if len(active) == 0:
        return TriangleMesh.empty()
    tris = _TRI_PAD[case[active]]  # (A, T, 3) edge ids
    cell_id = np.repeat(active, tris.shape[1])
    tris = tris.reshape(-1, 3)
    valid = tris[:, 0] >= 0
    tris, cell_id = tris[valid], cell_id[valid]
    e = _EDGE_ARR[tris]  # (F, 3, 3): c0, c1, axis
    lo_fine = cells[cell_id][:, None, :] + CORNER_OFFSETS[e[..., 0]]
    edge_key = encode_keys(lo_fine) * 3 + e[..., 2]
    uniq, inv = np.unique(edge_key.ravel(), return_inverse=True)
    # one representative occurrence per welded vertex
    first = np.zeros(len(uniq), dtype=np.int64)
    first[inv[::-1]] = np.arange(len(inv))[::-1]
    f_idx, k_idx = np.divmod(first, 3)
    c0 = e[f_idx, k_idx, 0]
    c1 = e[f_idx, k_idx, 1]
    cid = cell_id[f_idx]
    s0 = csdf[cid, c0]
    s1 = csdf[cid, c1]
    h = grid.voxel_size / n
    p0 = grid.origin + (cells[cid] + CORNER_OFFSETS[c0]) * h
    p1 = grid.origin + (cells[cid] + CORNER_OFFSETS[c1]) * h
    denom = s0 - s1
    w = np.where(denom != 0, s0 / np.where(denom != 0, denom, 1.0), 0.5)
    verts = p0 + np.clip(w, 0.0, 1.0)[:, None] * (p1 - p0)
    faces = inv.reshape(-1, 3)
    return TriangleMesh(verts, faces)


def locate_or_nearest(grid: VoxelGrid, p: np.ndarray) -> np.ndarray:
    vid = grid.locate(p)
    miss = vid < 0
    if miss.any():
        log.warning("%d mesh vertices outside all voxels; using nearest voxel", int(miss.sum()))
        _, vid[miss] = cKDTree(grid.voxel_centers()).query(p[miss])
    return vid


def mesh_normals_and_colors(mesh: TriangleMesh, grid: VoxelGrid, field: Any,
                            view_dir: np.ndarray | None = None, chunk: int = 1 << 14) -> TriangleMesh:
    """Unit normals from the sdf gradient and colours seen along ``view_dir`` (default -normal)."""
    if len(mesh.vertices) == 0:
        return TriangleMesh(mesh.vertices, mesh.faces, np.zeros((0, 3)), np.zeros((0, 3)))
    vid = locate_or_nearest(grid, mesh.vertices)
    normals = np.empty_like(mesh.vertices)
    colors = np.empty_like(mesh.vertices)
    for s in range(0, len(vid), chunk):
        sl = slice(s, s + chunk)
        p = torch.as_tensor(mesh.vertices[sl])
        q = field.query(grid, p, vid[sl], None, with_gradient=True)
        g = q.gradient.detach().double().numpy()
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        normals[sl] = g
        d = -g if view_dir is None else np.broadcast_to(np.asarray(view_dir, dtype=np.float64), g.shape)
        with torch.no_grad():
            qc = field.query(grid, p, vid[sl], torch.as_tensor(d.copy()))
        colors[sl] = qc.color.detach().double().numpy()
    return TriangleMesh(mesh.vertices, mesh.faces, normals, colors)


# -- metrics ---------------------------------------------------------------------------------------

def nearest_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest neighbour in ``b``."""
    return cKDTree(np.asarray(b, dtype=np.float64)).query(np.asarray(a, dtype=np.float64))[0]


def chamfer(a: np.ndarray, b: np.ndarray, squared: bool = False) -> float:
    """Symmetric Chamfer: mean of the two mean nearest-neighbour distances."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs non-empty point sets")
    dab, dba = nearest_distances(a, b), nearest_distances(b, a)
    if squared:
        dab, dba = dab ** 2, dba ** 2
    return 0.5 * (dab.mean() + dba.mean())


def f_score(points: np.ndarray, gt: np.ndarray, threshold: float = 0.05) -> float:
    if len(points) == 0 or len(gt) == 0:
        raise ValueError("f_score needs non-empty point sets")
    precision = (nearest_distances(points, gt) < threshold).mean()
    recall = (nearest_distances(gt, points) < threshold).mean()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def psnr(image: np.ndarray, gt: np.ndarray) -> float:
    """10 log10(1 / MSE) over all channels; +inf for identical images."""
    image, gt = np.asarray(image, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if image.shape != gt.shape:
        raise ValueError(f"shape mismatch {image.shape} vs {gt.shape}")
    mse = np.mean((image - gt) ** 2)
    return float("inf") if mse == 0 else float(10.0 * np.log10(1.0 / mse))


def sphere_points(n: int, radius: float = 0.5, center=(0.0, 0.0, 0.0), seed: int = 0) -> np.ndarray:
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return np.asarray(center) + radius * v / np.linalg.norm(v, axis=1, keepdims=True)
