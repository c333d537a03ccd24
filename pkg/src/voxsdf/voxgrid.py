"""Sparse voxel grid with shared corner embeddings and an octree index.

Voxels live on an integer lattice at the current subdivision level. Corner
vertices are keyed by their lattice coordinate, so adjacent voxels share
embedding rows without any float comparison.
"""
from __future__ import annotations

import itertools
import logging
import struct
from dataclasses import dataclass, field as dc_field
from typing import Any, BinaryIO, Sequence

import numpy as np
import torch

log = logging.getLogger(__name__)

# corner k <-> offset (k & 1, (k >> 1) & 1, (k >> 2) & 1)
CORNER_OFFSETS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)[:, ::-1].copy()

_KEY_BIAS = 1 << 20
GRID_MAGIC = b"VXSG"
GRID_VERSION = 1


def encode_keys(ijk: np.ndarray) -> np.ndarray:
    """Pack int lattice triples into sortable int64 keys (|coord| < 2^20)."""
    ijk = np.asarray(ijk, dtype=np.int64) + _KEY_BIAS
    return (ijk[..., 0] << 42) | (ijk[..., 1] << 21) | ijk[..., 2]


def _lookup(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row index of each query key in ``sorted_keys`` or -1."""
    if len(sorted_keys) == 0:
        return np.full(query.shape, -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, query)
    pos = np.clip(pos, 0, len(sorted_keys) - 1)
    return np.where(sorted_keys[pos] == query, pos, -1)


class Octree:
    """Hierarchy of occupied lattice cells over a leaf set.

    ``levels[0]`` are the leaves; ``levels[k]`` holds the distinct ancestors
    ``leaf >> k``. Children of node ``n`` at level ``k`` are the contiguous
    range ``child_start[k][n] : child_start[k][n+1]`` of level ``k-1``.
    """

    def __init__(self, coords: np.ndarray, origin: np.ndarray, voxel_size: float):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.voxel_size = float(voxel_size)
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        self.levels: list[np.ndarray] = [coords]
        self.child_index: list[np.ndarray] = [np.arange(len(coords))]
        self.child_start: list[np.ndarray] = [np.zeros(0, dtype=np.int64)]
        span = int(np.abs(coords).max()) if len(coords) else 0
        for _ in range(span.bit_length() + 1):
            cur = self.levels[-1]
            if len(cur) <= 1:
                break
            parent_keys = encode_keys(cur >> 1)
            order = np.argsort(parent_keys, kind="stable")
            _, start = np.unique(parent_keys[order], return_index=True)
            self.levels.append(cur[order][start] >> 1)
            self.child_index.append(order)
            self.child_start.append(np.append(start, len(cur)))

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def leaves(self) -> np.ndarray:
        return self.levels[0]

    def node_bounds(self, level: int, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        size = self.voxel_size * (1 << level)
        lo = self.origin + self.levels[level][idx] * size
        return lo, lo + size

    def children(self, level: int, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Expand nodes to (parent position, child index at level-1)."""
        start = self.child_start[level][idx]
        stop = self.child_start[level][idx + 1]
        counts = stop - start
        owner = np.repeat(np.arange(len(idx)), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        return owner, self.child_index[level][np.repeat(start, counts) + offs]


@dataclass
class VoxelGrid:
    """Sparse set of equal-size cubic leaf voxels with shared vertex embeddings.

    ``embeddings`` is a leaf tensor (vertex count x L_e). ``corners[i, k]`` is
    the embedding row of corner ``k`` of voxel ``i``.
    """

    origin: np.ndarray
    base_size: float
    level: int
    coords: np.ndarray
    vertex_keys: np.ndarray
    embeddings: torch.Tensor
    corners: np.ndarray = dc_field(init=False)
    octree: Octree = dc_field(init=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.vertex_keys = np.asarray(self.vertex_keys, dtype=np.int64).reshape(-1, 3)
        self._reindex()

    def _reindex(self) -> None:
        order = np.argsort(encode_keys(self.coords), kind="stable")
        self.coords = self.coords[order]
        self._voxel_keys = encode_keys(self.coords)
        vorder = np.argsort(encode_keys(self.vertex_keys), kind="stable")
        if not np.array_equal(vorder, np.arange(len(vorder))):
            self.vertex_keys = self.vertex_keys[vorder]
            with torch.no_grad():
                self.embeddings = self.embeddings[torch.as_tensor(vorder)].clone()
        self._vertex_keys_enc = encode_keys(self.vertex_keys)
        corner_keys = encode_keys(self.coords[:, None, :] + CORNER_OFFSETS[None])
        self.corners = _lookup(self._vertex_keys_enc, corner_keys)
        if self.corners.size and self.corners.min() < 0:
            raise ValueError("voxel corner without an embedding")
        self.embeddings = self.embeddings.detach().requires_grad_(True)
        self.octree = Octree(self.coords, self.origin, self.voxel_size)

    # -- basic geometry ----------------------------------------------------
    @property
    def voxel_size(self) -> float:
        return self.base_size / (1 << self.level)

    @property
    def num_voxels(self) -> int:
        return len(self.coords)

    @property
    def num_vertices(self) -> int:
        return len(self.vertex_keys)

    @property
    def emb_dim(self) -> int:
        return int(self.embeddings.shape[1])

    def voxel_min(self, vid: np.ndarray | None = None) -> np.ndarray:
        c = self.coords if vid is None else self.coords[vid]
        return self.origin + c * self.voxel_size

    def voxel_centers(self) -> np.ndarray:
        return self.voxel_min() + 0.5 * self.voxel_size

    def vertex_positions(self) -> np.ndarray:
        return self.origin + self.vertex_keys * self.voxel_size

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.voxel_min()
        return lo.min(0), lo.max(0) + self.voxel_size

    def find_voxels(self, ijk: np.ndarray) -> np.ndarray:
        return _lookup(self._voxel_keys, encode_keys(ijk))

    def locate(self, p: np.ndarray) -> np.ndarray:
        """Voxel index containing each point (half-open [min, max)), -1 on miss."""
        p = np.asarray(p, dtype=np.float64)
        ijk = np.floor((p - self.origin) / self.voxel_size).astype(np.int64)
        return self.find_voxels(ijk)

    def local_coords(self, p: torch.Tensor, vid: np.ndarray) -> torch.Tensor:
        lo = torch.as_tensor(self.voxel_min(vid), dtype=p.dtype)
        return ((p - lo) / self.voxel_size).clamp(0.0, 1.0)

    def interpolate(self, p: torch.Tensor, vid: np.ndarray, embeddings: torch.Tensor | None = None) -> torch.Tensor:
        """Trilinear blend of the 8 corner embeddings of voxel ``vid[i]`` at ``p[i]``.

        Differentiable w.r.t. ``p`` and the embedding table.
        """
        emb = self.embeddings if embeddings is None else embeddings
        x = self.local_coords(p.to(emb.dtype), vid)
        off = torch.as_tensor(CORNER_OFFSETS, dtype=x.dtype)
        w = torch.prod(off * x[:, None, :] + (1 - off) * (1 - x[:, None, :]), dim=-1)
        idx = torch.as_tensor(self.corners[vid])
        return (w[..., None] * emb[idx]).sum(1)

    # -- structure -----------------------------------------------------------
    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.origin.copy(), self.base_size, self.level, self.coords.copy(),
                         self.vertex_keys.copy(), self.embeddings.detach().clone())

    def subset(self, keep: np.ndarray) -> "VoxelGrid":
        """New grid with voxels ``keep`` (bool mask or index list); unreferenced vertices dropped."""
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.nonzero(keep)[0]
        used = np.unique(self.corners[keep].ravel()) if len(keep) else np.zeros(0, dtype=np.int64)
        emb = self.embeddings.detach()[torch.as_tensor(used, dtype=torch.long)].clone()
        return VoxelGrid(self.origin.copy(), self.base_size, self.level, self.coords[keep],
                         self.vertex_keys[used], emb)

    def check_invariants(self) -> None:
        leaves = self.octree.leaves()
        assert np.array_equal(np.sort(encode_keys(leaves)), self._voxel_keys), "octree/voxel mismatch"
        assert self.corners.shape == (self.num_voxels, 8) and (self.num_voxels == 0 or self.corners.min() >= 0)
        assert len(np.unique(self._voxel_keys)) == self.num_voxels
        assert len(np.unique(self._vertex_keys_enc)) == self.num_vertices


def init_grid(bounds: Sequence[Sequence[float]], voxel_size: float, emb_dim: int = 16, seed: int = 0,
              dtype: torch.dtype = torch.float32, init_range: float = 1e-2) -> VoxelGrid:
    """Tile ``bounds`` (lo, hi) with cubes of edge ``voxel_size``.

    The box is grown on its max side to a whole number of voxels per axis.
    Embeddings start uniform in [-init_range, init_range].
    """
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bounds)
    extent = hi - lo
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if np.any(extent <= 0) or voxel_size > extent.max():
        raise ValueError("degenerate grid")
    n = np.maximum(np.ceil(extent / voxel_size - 1e-9), 1).astype(np.int64)
    coords = np.stack(np.meshgrid(*(np.arange(k) for k in n), indexing="ij"), -1).reshape(-1, 3)
    verts = np.stack(np.meshgrid(*(np.arange(k + 1) for k in n), indexing="ij"), -1).reshape(-1, 3)
    gen = torch.Generator().manual_seed(int(seed))
    emb = (torch.rand(len(verts), emb_dim, generator=gen, dtype=torch.float64) * 2 - 1) * init_range
    return VoxelGrid(lo, float(voxel_size), 0, coords, verts, emb.to(dtype))


def stratified_points(n_voxels: int, samples_per_voxel: int, rng: np.random.Generator) -> np.ndarray:
    """Jittered m^3 pattern in the unit cube per voxel, m = ceil(samples^(1/3))."""
    m = int(np.ceil(round(samples_per_voxel ** (1.0 / 3.0), 9)))
    base = np.stack(np.meshgrid(*(np.arange(m),) * 3, indexing="ij"), -1).reshape(-1, 3)
    jitter = rng.random((n_voxels, len(base), 3))
    return (base[None] + jitter) / m


def min_abs_sdf(grid: VoxelGrid, field: Any, samples_per_voxel: int, seed: int = 0,
                chunk: int = 1 << 16) -> np.ndarray:
    """Minimum |sdf| over a stratified sample set inside every voxel."""
    rng = np.random.default_rng(seed)
    local = stratified_points(grid.num_voxels, samples_per_voxel, rng)
    per = local.shape[1]
    pts = grid.voxel_min()[:, None, :] + local * grid.voxel_size
    vid = np.repeat(np.arange(grid.num_voxels), per)
    pts = pts.reshape(-1, 3)
    out = np.empty(len(pts))
    with torch.no_grad():
        for s in range(0, len(pts), chunk):
            sl = slice(s, s + chunk)
            out[sl] = field.sdf(grid, torch.as_tensor(pts[sl]), vid[sl]).double().numpy()
    return np.abs(out).reshape(grid.num_voxels, per).min(1)


def prune(grid: VoxelGrid, field: Any, tau: float = 0.01, samples_per_voxel: int = 512, seed: int = 0) -> VoxelGrid:
    """Keep voxels that contain a sampled point with |sdf| < tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if samples_per_voxel < 8:
        raise ValueError("samples_per_voxel must be >= 8")
    keep = min_abs_sdf(grid, field, samples_per_voxel, seed) < tau
    if not keep.any():
        raise RuntimeError("empty grid after prune")
    log.info("prune: kept %d / %d voxels", keep.sum(), grid.num_voxels)
    return grid.subset(keep)


def split(grid: VoxelGrid) -> VoxelGrid:
    """Replace each voxel by its 8 children; new vertices take the parent-level blend."""
    if grid.num_voxels == 0:
        raise ValueError("cannot split an empty grid")
    child = (grid.coords[:, None, :] * 2 + CORNER_OFFSETS[None]).reshape(-1, 3)
    # each child's 8 corners; 27 lattice points per parent in total
    fine = (grid.coords[:, None, :] * 2 + np.stack(np.meshgrid(*(np.arange(3),) * 3, indexing="ij"), -1)
            .reshape(1, 27, 3))
    owner = np.repeat(np.arange(grid.num_voxels), 27)
    fine = fine.reshape(-1, 3)
    _, first = np.unique(encode_keys(fine), return_index=True)
    fine, owner = fine[first], owner[first]
    even = np.all(fine % 2 == 0, axis=1)
    old = np.full(len(fine), -1, dtype=np.int64)
    old[even] = _lookup(grid._vertex_keys_enc, encode_keys(fine[even] // 2))
    emb = torch.empty(len(fine), grid.emb_dim, dtype=grid.embeddings.dtype)
    with torch.no_grad():
        carried = old >= 0
        emb[torch.as_tensor(carried)] = grid.embeddings[torch.as_tensor(old[carried])]
        new = ~carried
        if new.any():
            pos = torch.as_tensor(grid.origin + fine[new] * (grid.voxel_size / 2))
            emb[torch.as_tensor(new)] = grid.interpolate(pos, owner[new])
    return VoxelGrid(grid.origin.copy(), grid.base_size, grid.level + 1, child, fine, emb)


# -- instances, editing, composition ----------------------------------------------------

@dataclass
class Instance:
    """A grid placed in the world by ``x_world = scale * R @ x_local + t``."""

    grid: VoxelGrid
    field: Any = None
    rotation: np.ndarray = dc_field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-9) or np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def to_local(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p) - self.translation) @ self.rotation / self.scale

    def to_world(self, p: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(p) @ self.rotation.T + self.translation

    def dir_to_local(self, d: np.ndarray) -> np.ndarray:
        return np.asarray(d) @ self.rotation

    def sdf(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space sdf and local voxel id (-1 and nan outside)."""
        q = self.to_local(p)
        vid = self.grid.locate(q)
        out = np.full(len(q), np.nan)
        hit = vid >= 0
        if hit.any():
            with torch.no_grad():
                out[hit] = self.scale * self.field.sdf(self.grid, torch.as_tensor(q[hit]), vid[hit]).double().numpy()
        return out, vid


@dataclass
class SceneGrid:
    instances: list[Instance] = dc_field(default_factory=list)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        """Union (pointwise min) over the instances containing each point; nan where none does."""
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        out = np.full(len(p), np.nan)
        for inst in self.instances:
            s, _ = inst.sdf(p)
            out = np.where(np.isnan(out), s, np.where(np.isnan(s), out, np.minimum(out, s)))
        return out


@dataclass
class VoxelSelection:
    ids: np.ndarray
    grid_id: int

    def __len__(self) -> int:
        return len(self.ids)


def select_voxels(grid: VoxelGrid, region: Any) -> VoxelSelection:
    """Select by (lo, hi) box on voxel centers, or by an explicit list of lattice coords."""
    if isinstance(region, tuple) and len(region) == 2:
        lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in region)
        if np.any(hi < lo):
            return VoxelSelection(np.zeros((0, 3), dtype=np.int64), id(grid))
        c = grid.voxel_centers()
        inside = np.all((c >= lo) & (c <= hi), axis=1)
        return VoxelSelection(grid.coords[inside].copy(), id(grid))
    ids = np.asarray(region, dtype=np.int64).reshape(-1, 3)
    if len(ids) and np.any(grid.find_voxels(ids) < 0):
        raise KeyError("selection contains voxels not in the grid")
    return VoxelSelection(ids, id(grid))


@dataclass
class Translate:
    offset: Sequence[float]


@dataclass
class Duplicate:
    offset: Sequence[float]


@dataclass
class Scale:
    factor: float
    pivot: Sequence[float]


@dataclass
class Delete:
    pass


def _lattice_offset(grid: VoxelGrid, offset: Sequence[float]) -> np.ndarray:
    off = np.asarray(offset, dtype=np.float64) / grid.voxel_size
    k = np.round(off)
    if np.any(np.abs(off - k) > 1e-9):
        raise ValueError("offset must be a multiple of voxel_size")
    return k.astype(np.int64)


def edit_voxels(grid: VoxelGrid, sel: VoxelSelection, op: Any, field: Any = None,
                allow_overlap: bool = False) -> SceneGrid:
    """Re-instance the selected voxels under a transform, or delete them.

    Embeddings are never rewritten; moved parts are separate instances whose
    geometry queries map world points back through the inverse transform.
    """
    idx = grid.find_voxels(sel.ids)
    if np.any(idx < 0):
        raise KeyError("selection is stale")
    mask = np.zeros(grid.num_voxels, dtype=bool)
    mask[idx] = True
    if isinstance(op, Delete):
        return SceneGrid([Instance(grid.subset(~mask), field)])
    moved = grid.subset(mask)
    if isinstance(op, (Translate, Duplicate)):
        k = _lattice_offset(grid, op.offset)
        rest = grid.subset(~mask) if isinstance(op, Translate) else grid
        if not allow_overlap and np.any(rest.find_voxels(moved.coords + k) >= 0):
            raise ValueError("overlapping instance")
        parts = [Instance(rest, field)] if rest.num_voxels else []
        return SceneGrid(parts + [Instance(moved, field, translation=np.asarray(op.offset, dtype=np.float64))])
    if isinstance(op, Scale):
        if op.factor <= 0:
            raise ValueError("scale factor must be positive")
        pivot = np.asarray(op.pivot, dtype=np.float64)
        rest = grid.subset(~mask)
        parts = [Instance(rest, field)] if rest.num_voxels else []
        return SceneGrid(parts + [Instance(moved, field, translation=(1 - op.factor) * pivot, scale=float(op.factor))])
    raise TypeError(f"unknown edit op {op!r}")


def compose(instances: Sequence[Any]) -> SceneGrid:
    """Build a multi-object scene from (grid, transform, field) triples or Instances.

    ``transform`` is a 4x4 rigid matrix or a (rotation, translation) pair.
    """
    out = []
    for item in instances:
        if isinstance(item, Instance):
            out.append(item)
            continue
        g, tf, fld = item
        if tf is None:
            R, t = np.eye(3), np.zeros(3)
        elif isinstance(tf, (tuple, list)):
            R, t = tf
        else:
            tf = np.asarray(tf, dtype=np.float64)
            R, t = tf[:3, :3], tf[:3, 3]
        out.append(Instance(g, fld, rotation=R, translation=t))
    return SceneGrid(out)


def _oriented_boxes(inst: Instance) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h = inst.grid.voxel_size
    centers = inst.to_world(inst.grid.voxel_centers())
    half = np.full(3, 0.5 * h * inst.scale)
    return centers, inst.rotation, half


def collision_query(a: Instance, b: Instance, tol: float = 1e-9) -> tuple[bool, list[tuple[int, int]]]:
    """All voxel pairs whose transformed boxes overlap with positive volume.

    Broad phase on bounding spheres, narrow phase by the 15-axis separating test.
    Touching boxes (overlap <= tol * size) do not count.
    """
    ca, Ra, ha = _oriented_boxes(a)
    cb, Rb, hb = _oriented_boxes(b)
    ra, rb = np.linalg.norm(ha), np.linalg.norm(hb)
    d2 = ((ca[:, None, :] - cb[None, :, :]) ** 2).sum(-1)
    ia, ib = np.nonzero(d2 < (ra + rb) ** 2)
    if len(ia) == 0:
        return False, []
    axes = [Ra[:, i] for i in range(3)] + [Rb[:, j] for j in range(3)]
    for i in range(3):
        for j in range(3):
            c = np.cross(Ra[:, i], Rb[:, j])
            n = np.linalg.norm(c)
            if n > 1e-9:
                axes.append(c / n)
    L = np.stack(axes)  # (K, 3)
    ext_a = np.abs(L @ Ra) @ ha
    ext_b = np.abs(L @ Rb) @ hb
    sep = np.abs((cb[ib] - ca[ia]) @ L.T)  # (P, K)
    eps = tol * max(ha.max(), hb.max())
    overlap = np.all(sep < ext_a + ext_b - eps, axis=1)
    pairs = [(int(i), int(j)) for i, j in zip(ia[overlap], ib[overlap])]
    return bool(pairs), pairs


# -- serialization -------------------------------------------------------------------------

def write_grid(f: BinaryIO, grid: VoxelGrid) -> None:
    """``VXSG`` section: header, origin/base size, i32 voxel coords, vertex records."""
    f.write(GRID_MAGIC)
    f.write(struct.pack("<IIQQI", GRID_VERSION, grid.level, grid.num_voxels, grid.num_vertices, grid.emb_dim))
    f.write(struct.pack("<4d", *grid.origin, grid.base_size))
    f.write(grid.coords.astype("<i4").tobytes())
    rec = np.dtype([("key", "<i4", 3), ("emb", "<f4", grid.emb_dim)])
    arr = np.empty(grid.num_vertices, dtype=rec)
    arr["key"] = grid.vertex_keys
    arr["emb"] = grid.embeddings.detach().float().numpy()
    f.write(arr.tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ValueError("truncated checkpoint")
    return b


def read_grid(f: BinaryIO, dtype: torch.dtype = torch.float32) -> VoxelGrid:
    if _read_exact(f, 4) != GRID_MAGIC:
        raise ValueError("bad grid magic")
    version, level, nvox, nvert, emb_dim = struct.unpack("<IIQQI", _read_exact(f, 28))
    if version != GRID_VERSION:
        raise ValueError(f"unsupported grid version {version}")
    *origin, base = struct.unpack("<4d", _read_exact(f, 32))
    coords = np.frombuffer(_read_exact(f, 12 * nvox), dtype="<i4").reshape(-1, 3).astype(np.int64)
    rec = np.dtype([("key", "<i4", 3), ("emb", "<f4", emb_dim)])
    arr = np.frombuffer(_read_exact(f, rec.itemsize * nvert), dtype=rec)
    emb = torch.from_numpy(arr["emb"].copy()).to(dtype)
    return VoxelGrid(np.array(origin), base, level, coords, arr["key"].astype(np.int64), emb)
