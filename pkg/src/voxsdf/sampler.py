"""Ray generation, octree traversal and voxel-aware point sampling along rays.

All sample arrays are padded per ray: shape (rays, max_count) plus a mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxgrid import Octree

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward); ``pose`` is camera-to-world."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.pose[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3].copy()


@dataclass
class Rays:
    origins: np.ndarray
    dirs: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def take(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.dirs[idx], self.ids[idx])


@dataclass
class RayHits:
    """Front-to-back voxel hits per ray; ``vid == -1`` marks padding."""

    vid: np.ndarray
    t_in: np.ndarray
    t_out: np.ndarray

    @property
    def count(self) -> np.ndarray:
        return (self.vid >= 0).sum(1)

    @property
    def length(self) -> np.ndarray:
        return np.where(self.vid >= 0, self.t_out - self.t_in, 0.0)


@dataclass
class SampleSet:
    t: np.ndarray
    t_l: np.ndarray
    t_r: np.ndarray
    hit: np.ndarray
    vid: np.ndarray
    mask: np.ndarray

    @property
    def count(self) -> np.ndarray:
        return self.mask.sum(1)


def pixel_centers(width: int, height: int) -> np.ndarray:
    """Image-plane coordinates of all pixel centres, row-major."""
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return np.stack([u.ravel(), v.ravel()], -1)


def generate_rays(camera: Camera, pixels: np.ndarray, ids: np.ndarray | None = None) -> Rays:
    """World rays through image-plane points ``pixels`` (x, y)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d_cam = np.stack([(pixels[:, 0] - camera.cx) / camera.fx,
                      (pixels[:, 1] - camera.cy) / camera.fy,
                      np.ones(len(pixels))], -1)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return Rays(o, d, np.arange(len(d)) if ids is None else np.asarray(ids))


def slab_intersect(o: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit parameters of rays vs boxes (row-wise); exit <= entry means a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    near, far = np.minimum(t0, t1), np.maximum(t0, t1)
    # rays parallel to a slab: unbounded if inside it, empty otherwise
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    near = np.where(par, np.where(inside, -np.inf, np.inf), near)
    far = np.where(par, np.where(inside, np.inf, -np.inf), far)
    return near.max(1), far.min(1)


def intersect(octree: Octree, origins: np.ndarray, dirs: np.ndarray, max_hits: int = 20,
              t_min: float = 0.0) -> RayHits:
    """Hierarchical slab traversal; returns leaf hits sorted by entry distance."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n_rays = len(origins)
    empty = RayHits(np.full((n_rays, 0), -1, dtype=np.int64), np.zeros((n_rays, 0)), np.zeros((n_rays, 0)))
    if len(octree.leaves()) == 0 or n_rays == 0:
        return empty
    top = octree.depth
    n_top = len(octree.levels[top])
    ray = np.repeat(np.arange(n_rays), n_top)
    node = np.tile(np.arange(n_top), n_rays)
    for level in range(top, -1, -1):
        lo, hi = octree.node_bounds(level, node)
        t0, t1 = slab_intersect(origins[ray], dirs[ray], lo, hi)
        t0 = np.maximum(t0, t_min)
        keep = t1 > t0
        ray, node, t0, t1 = ray[keep], node[keep], t0[keep], t1[keep]
        if level > 0:
            owner, node = octree.children(level, node)
            ray = ray[owner]
    if len(ray) == 0:
        return empty
    order = np.lexsort((t0, ray))
    ray, node, t0, t1 = ray[order], node[order], t0[order], t1[order]
    first = np.searchsorted(ray, ray, side="left")
    rank = np.arange(len(ray)) - first
    keep = rank < max_hits
    ray, node, t0, t1, rank = ray[keep], node[keep], t0[keep], t1[keep], rank[keep]
    width = int(rank.max()) + 1
    vid = np.full((n_rays, width), -1, dtype=np.int64)
    t_in = np.zeros((n_rays, width))
    t_out = np.zeros((n_rays, width))
    vid[ray, rank] = node
    t_in[ray, rank] = t0
    t_out[ray, rank] = t1
    return RayHits(vid, t_in, t_out)


def counter_uniform(seed: int, ray_ids: np.ndarray, k: np.ndarray, stream: int = 0) -> np.ndarray:
    """Uniforms in [0, 1) from a splitmix64 hash of (seed, stream, ray id, index)."""
    with np.errstate(over="ignore"):
        x = (np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x9E3779B97F4A7C15)
             ^ np.uint64(stream) * np.uint64(0xD1B54A32D192ED03)
             ^ np.asarray(ray_ids, dtype=np.uint64)[:, None] * np.uint64(0xBF58476D1CE4E5B9)
             ^ np.asarray(k, dtype=np.uint64)[None, :] * np.uint64(0x94D049BB133111EB)) & _M64
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & _M64
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
        x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
        x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def voxel_probabilities(hits: RayHits, flags: np.ndarray | None = None, boost: float = 1.0) -> np.ndarray:
    """Per-hit selection probability proportional to in-voxel length (times ``boost`` if flagged)."""
    w = hits.length.copy()
    if flags is not None:
        w = np.where(flags, w * boost, w)
    tot = w.sum(1, keepdims=True)
    return np.divide(w, tot, out=np.zeros_like(w), where=tot > 0)


def inverse_cdf_sample(hits: RayHits, prob: np.ndarray, n_per_ray: np.ndarray, ray_ids: np.ndarray,
                       seed: int = 0) -> SampleSet:
    """Stratified inverse-CDF draw over the piecewise-constant per-voxel density.

    Stratum k of ray r holds u = (k + xi) / n_r. Each sample gets an interval
    centred on it whose length is one stratum's pre-image in its voxel.
    """
    n_rays = len(prob)
    n = np.asarray(n_per_ray, dtype=np.int64)
    width = int(n.max()) if n_rays else 0
    k = np.arange(width)
    mask = k[None, :] < n[:, None]
    xi = counter_uniform(seed, ray_ids, k)
    u = np.where(mask, (k[None, :] + xi) / np.maximum(n, 1)[:, None], 0.0)
    cdf = np.cumsum(prob, axis=1)
    count = hits.count
    j = (u[:, :, None] >= cdf[:, None, :]).sum(-1)
    j = np.minimum(j, np.maximum(count - 1, 0)[:, None])
    rows = np.arange(n_rays)[:, None]
    if hits.vid.shape[1] == 0:
        z = np.zeros((n_rays, width))
        return SampleSet(z, z.copy(), z.copy(), np.full((n_rays, width), -1), np.full((n_rays, width), -1),
                         np.zeros((n_rays, width), dtype=bool))
    p_j = prob[rows, j]
    cdf_lo = cdf[rows, j] - p_j
    m_j = hits.length[rows, j]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.clip((u - cdf_lo) / p_j, 0.0, 1.0)
        delta = m_j / (p_j * np.maximum(n, 1)[:, None])
    t = hits.t_in[rows, j] + frac * m_j
    mask &= p_j > 0
    t = np.where(mask, t, 0.0)
    delta = np.where(mask, delta, 0.0)
    hit = np.where(mask, j, -1)
    vid = np.where(mask, hits.vid[rows, np.maximum(j, 0)], -1)
    return SampleSet(t, t - delta / 2, t + delta / 2, hit, vid, mask)


def num_samples(hits: RayHits, step_size: float) -> np.ndarray:
    tot = hits.length.sum(1)
    return np.where(tot > 0, np.maximum(np.ceil(tot / step_size - 1e-9), 1), 0).astype(np.int64)


def uniform_voxel_sampling(hits: RayHits, step_size: float, ray_ids: np.ndarray | None = None,
                           n_samples: int | np.ndarray | None = None, seed: int = 0) -> SampleSet:
    """Samples distributed over hit voxels in proportion to in-voxel length."""
    n_rays = len(hits.vid)
    ids = np.arange(n_rays) if ray_ids is None else ray_ids
    n = num_samples(hits, step_size) if n_samples is None else np.broadcast_to(n_samples, (n_rays,))
    n = np.where(hits.count > 0, n, 0)
    return inverse_cdf_sample(hits, voxel_probabilities(hits), n, ids, seed)


def mark_important_voxels(samples: SampleSet, sdf: np.ndarray, mode: str = "full") -> np.ndarray:
    """Flag hits containing a +/- sdf crossing between consecutive samples.

    Returns a bool array shaped like the hit list. ``first`` keeps only the
    first crossing per ray.
    """
    if mode not in ("full", "first"):
        raise ValueError(f"unknown mode {mode!r}")
    n_rays, width = samples.t.shape
    n_hits = int(samples.hit.max()) + 1 if samples.hit.size else 0
    flags = np.zeros((n_rays, max(n_hits, 1)), dtype=bool)
    if width < 2:
        return flags[:, :n_hits]
    sdf = np.asarray(sdf)
    cross = samples.mask[:, :-1] & samples.mask[:, 1:] & (sdf[:, :-1] > 0) & (sdf[:, 1:] <= 0)
    if mode == "first":
        first = np.argmax(cross, axis=1)
        keep = np.zeros_like(cross)
        has = cross.any(1)
        keep[np.nonzero(has)[0], first[has]] = True
        cross = keep
    r, i = np.nonzero(cross)
    flags[r, samples.hit[r, i]] = True
    flags[r, samples.hit[r, i + 1]] = True
    return flags[:, :n_hits]


def surface_aware_resample(hits: RayHits, flags: np.ndarray, boost: float, n_per_ray: np.ndarray,
                           ray_ids: np.ndarray | None = None, seed: int = 0) -> SampleSet:
    """Redraw the same number of samples with flagged voxels weighted by ``boost``."""
    if boost < 1:
        raise ValueError("boost must be >= 1")
    ids = np.arange(len(hits.vid)) if ray_ids is None else ray_ids
    fl = np.zeros(hits.vid.shape, dtype=bool)
    fl[:, :flags.shape[1]] = flags[:, :fl.shape[1]]
    return inverse_cdf_sample(hits, voxel_probabilities(hits, fl, boost), n_per_ray, ids, seed)


def clamp_intervals(samples: SampleSet, hits: RayHits) -> SampleSet:
    """Cut each interval to its voxel's [t_in, t_out], re-centre, drop empties, re-sort by t."""
    rows = np.arange(len(samples.t))[:, None]
    j = np.maximum(samples.hit, 0)
    if hits.vid.shape[1] == 0:
        return samples
    t_l = np.maximum(samples.t_l, hits.t_in[rows, j])
    t_r = np.minimum(samples.t_r, hits.t_out[rows, j])
    mask = samples.mask & (t_r > t_l)
    t = np.where(mask, 0.5 * (t_l + t_r), np.inf)
    order = np.argsort(t, axis=1, kind="stable")
    take = lambda a: np.take_along_axis(a, order, axis=1)
    mask, t, t_l, t_r = take(mask), take(t), take(t_l), take(t_r)
    hit, vid = take(samples.hit), take(samples.vid)
    # a voxel span shorter than one stratum can collapse two samples onto the same interval
    dup = np.zeros_like(mask)
    dup[:, 1:] = mask[:, 1:] & mask[:, :-1] & (t[:, 1:] == t[:, :-1])
    if dup.any():
        mask &= ~dup
        order = np.argsort(~mask, axis=1, kind="stable")
        mask, t, t_l, t_r, hit, vid = (take(a) for a in (mask, t, t_l, t_r, hit, vid))
    width = int(mask.sum(1).max()) if mask.size else 0
    z = lambda a, fill: np.where(mask, a, fill)[:, :width]
    return SampleSet(z(t, 0.0), z(t_l, 0.0), z(t_r, 0.0), z(hit, -1), z(vid, -1), mask[:, :width])
