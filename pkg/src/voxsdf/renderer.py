"""SDF-to-opacity conversion, front-to-back compositing and image rendering."""
from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from . import sampler as smp
from .fileio import write_pfm, write_png
from .voxgrid import Instance, SceneGrid, VoxelGrid


def s_density(sdf: torch.Tensor, s: torch.Tensor | float) -> torch.Tensor:
    """Logistic density s e^{-s x} / (1 + e^{-s x})^2, written overflow-free."""
    x = s * torch.as_tensor(sdf)
    return s * torch.sigmoid(x) * torch.sigmoid(-x)


def alpha(sdf: torch.Tensor, sdf_next: torch.Tensor, s: torch.Tensor | float) -> torch.Tensor:
    """ReLU((Phi(a) - Phi(b)) / Phi(a)) evaluated as relu(-expm1(log Phi(b) - log Phi(a)))."""
    sdf = torch.as_tensor(sdf)
    sdf_next = torch.as_tensor(sdf_next)
    log_ratio = F.logsigmoid(s * sdf_next) - F.logsigmoid(s * sdf)
    # ReLU applied before expm1: for an sdf rising deep inside, log_ratio can exceed 88 and expm1
    # overflows to inf, and the backward pass would then produce 0 * inf = nan.
    return -torch.expm1(torch.clamp(log_ratio, max=0.0))


@dataclass
class RenderOutput:
    color: torch.Tensor
    depth: torch.Tensor
    weight_sum: torch.Tensor
    weights: torch.Tensor | None = None
    t: torch.Tensor | None = None
    mask: np.ndarray | None = None
    vid: np.ndarray | None = None
    instance: np.ndarray | None = None
    gradients: list[torch.Tensor] = dc_field(default_factory=list)
    hit_any: np.ndarray | None = None


def composite(t: torch.Tensor, alphas: torch.Tensor, colors: torch.Tensor,
              mask: torch.Tensor | np.ndarray | None = None) -> RenderOutput:
    """Accumulate weights T_i * alpha_i along the last axis (samples in ascending t)."""
    t = torch.as_tensor(t)
    alphas = torch.as_tensor(alphas)
    colors = torch.as_tensor(colors)
    if mask is not None:
        alphas = torch.where(torch.as_tensor(mask), alphas, torch.zeros_like(alphas))
    one = torch.ones_like(alphas[..., :1])
    trans = torch.cumprod(torch.cat([one, 1.0 - alphas[..., :-1]], dim=-1), dim=-1)
    w = trans * alphas
    color = (w[..., None] * colors).sum(-2)
    depth = (w * torch.where(w > 0, t, torch.zeros_like(t))).sum(-1)
    # 1 - T_final equals sum(w) but cannot round above 1
    wsum = 1.0 - trans[..., -1] * (1.0 - alphas[..., -1]) if alphas.shape[-1] else w.sum(-1)
    return RenderOutput(color, depth, wsum, w, t)


@dataclass
class RenderConfig:
    step_size: float = 0.03
    max_hits: int = 20
    sampling: str = "uniform"
    boost: float = 8.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0
    chunk: int = 4096
    n_samples: int | None = None


def as_scene(scene: Any, field: Any = None) -> SceneGrid:
    if isinstance(scene, SceneGrid):
        return scene
    if isinstance(scene, Instance):
        return SceneGrid([scene])
    if isinstance(scene, VoxelGrid):
        return SceneGrid([Instance(scene, field)])
    raise TypeError(f"cannot render {type(scene).__name__}")


@dataclass
class _InstanceSamples:
    t: torch.Tensor
    alpha: torch.Tensor
    color: torch.Tensor
    mask: np.ndarray
    vid: np.ndarray
    gradient: torch.Tensor | None
    hit_any: np.ndarray


def sample_instance(inst: Instance, rays: smp.Rays, cfg: RenderConfig) -> tuple[smp.RayHits, smp.SampleSet, np.ndarray, np.ndarray]:
    """Local-frame hits and clamped samples for one instance."""
    grid, fld = inst.grid, inst.field
    o = inst.to_local(rays.origins)
    d = inst.dir_to_local(rays.dirs)
    step = cfg.step_size / inst.scale
    hits = smp.intersect(grid.octree, o, d, cfg.max_hits)
    samples = smp.uniform_voxel_sampling(hits, step, rays.ids, cfg.n_samples, cfg.seed)
    if cfg.sampling in ("full", "first") and samples.mask.any():
        pre = smp.clamp_intervals(samples, hits)
        r, i = np.nonzero(pre.mask)
        sdf = np.zeros(pre.t.shape)
        with torch.no_grad():
            pts = torch.as_tensor(o[r] + pre.t[r, i, None] * d[r])
            sdf[r, i] = fld.sdf(grid, pts, pre.vid[r, i]).double().numpy()
        flags = smp.mark_important_voxels(pre, sdf, cfg.sampling)
        samples = smp.surface_aware_resample(hits, flags, cfg.boost, samples.count, rays.ids, cfg.seed + 1)
    elif cfg.sampling not in ("uniform", "full", "first"):
        raise ValueError(f"unknown sampling mode {cfg.sampling!r}")
    return hits, smp.clamp_intervals(samples, hits), o, d


def _render_instance(inst: Instance, rays: smp.Rays, cfg: RenderConfig, with_gradient: bool,
                     create_graph: bool) -> _InstanceSamples:
    grid, fld = inst.grid, inst.field
    hits, samples, o, d = sample_instance(inst, rays, cfg)
    n_rays, width = samples.t.shape
    dtype = grid.embeddings.dtype
    r, i = np.nonzero(samples.mask)
    t_flat = samples.t[r, i]
    pts = torch.as_tensor(o[r] + t_flat[:, None] * d[r], dtype=dtype)
    dirs = torch.as_tensor(d[r], dtype=dtype)
    q = fld.query(grid, pts, samples.vid[r, i], dirs, with_gradient=with_gradient, create_graph=create_graph)
    sdf_flat = q.sdf * inst.scale

    # sdf at the exit of every hit voxel that received samples
    has = np.zeros(hits.vid.shape, dtype=bool)
    has[r, samples.hit[r, i]] = True
    hr, hj = np.nonzero(has)
    exit_pts = torch.as_tensor(o[hr] + hits.t_out[hr, hj, None] * d[hr], dtype=dtype)
    sdf_exit_flat = fld.sdf(grid, exit_pts, hits.vid[hr, hj]) * inst.scale

    sdf_dtype = sdf_flat.dtype
    sdf = torch.zeros(n_rays, width, dtype=sdf_dtype).index_put((torch.as_tensor(r), torch.as_tensor(i)), sdf_flat)
    exit_pad = torch.zeros(hits.vid.shape, dtype=sdf_dtype).index_put(
        (torch.as_tensor(hr), torch.as_tensor(hj)), sdf_exit_flat.to(sdf_dtype))
    hit_idx = torch.as_tensor(np.maximum(samples.hit, 0))
    if hits.vid.shape[1]:
        sdf_exit = torch.gather(exit_pad, 1, hit_idx)
    else:
        sdf_exit = torch.zeros(n_rays, width, dtype=sdf_dtype)
    same = np.zeros((n_rays, width), dtype=bool)
    same[:, :-1] = samples.mask[:, 1:] & (samples.hit[:, 1:] == samples.hit[:, :-1])
    sdf_shift = torch.cat([sdf[:, 1:], torch.zeros(n_rays, 1, dtype=sdf_dtype)], dim=1)[:, :width]
    sdf_next = torch.where(torch.as_tensor(same), sdf_shift, sdf_exit)
    a = alpha(sdf, sdf_next, fld.s.to(sdf_dtype))
    a = torch.where(torch.as_tensor(samples.mask), a, torch.zeros_like(a))
    col = torch.zeros(n_rays, width, 3, dtype=q.color.dtype).index_put(
        (torch.as_tensor(r), torch.as_tensor(i)), q.color)
    grad = None
    if q.gradient is not None:
        grad = q.gradient @ torch.as_tensor(inst.rotation.T, dtype=q.gradient.dtype)
    t_world = torch.as_tensor(samples.t * inst.scale, dtype=sdf_dtype)
    return _InstanceSamples(t_world, a, col, samples.mask, samples.vid, grad, hits.count > 0)


def render_rays(scene: Any, rays: smp.Rays, cfg: RenderConfig | None = None, field: Any = None,
                with_gradient: bool = False, create_graph: bool = False) -> RenderOutput:
    """Intersect, sample, evaluate, composite. Rays with no hit get the background colour."""
    cfg = cfg or RenderConfig()
    scene = as_scene(scene, field)
    n_rays = len(rays)
    bg = torch.as_tensor(cfg.background, dtype=torch.float64)
    parts = [_render_instance(inst, rays, cfg, with_gradient, create_graph)
             for inst in scene.instances if inst.grid.num_voxels]
    if not parts:
        z = torch.zeros(n_rays, dtype=torch.float64)
        return RenderOutput(bg.expand(n_rays, 3).clone(), z, z.clone(), hit_any=np.zeros(n_rays, dtype=bool))
    if len(parts) == 1:
        p = parts[0]
        t, a, c, mask, vid = p.t, p.alpha, p.color, p.mask, p.vid
        inst_id = np.where(mask, 0, -1)
    else:
        dt = torch.promote_types(parts[0].t.dtype, torch.float64)
        t = torch.cat([p.t.to(dt) for p in parts], 1)
        a = torch.cat([p.alpha.to(dt) for p in parts], 1)
        c = torch.cat([p.color.to(dt) for p in parts], 1)
        mask = np.concatenate([p.mask for p in parts], 1)
        vid = np.concatenate([p.vid for p in parts], 1)
        inst_id = np.concatenate([np.where(p.mask, k, -1) for k, p in enumerate(parts)], 1)
        key = np.where(mask, t.detach().numpy(), np.inf)
        order = np.argsort(key, axis=1, kind="stable")
        o_t = torch.as_tensor(order)
        t, a = torch.gather(t, 1, o_t), torch.gather(a, 1, o_t)
        c = torch.gather(c, 1, o_t[..., None].expand(-1, -1, 3))
        mask = np.take_along_axis(mask, order, 1)
        vid = np.take_along_axis(vid, order, 1)
        inst_id = np.take_along_axis(inst_id, order, 1)
    out = composite(t, a, c, torch.as_tensor(mask))
    out.color = out.color + (1.0 - out.weight_sum)[:, None] * bg.to(out.color.dtype)
    out.mask, out.vid, out.instance = mask, vid, inst_id
    out.gradients = [p.gradient for p in parts if p.gradient is not None]
    out.hit_any = np.any([p.hit_any for p in parts], axis=0)
    return out


@dataclass
class ImageResult:
    image: np.ndarray
    depth: np.ndarray
    weight: np.ndarray
    seconds: float


def render_image(scene: Any, camera: smp.Camera, cfg: RenderConfig | None = None, field: Any = None,
                 out_prefix: str | Path | None = None) -> ImageResult:
    """Render every pixel in chunks; optionally write ``<prefix>.png`` and depth/weight PFMs."""
    cfg = cfg or RenderConfig()
    start = time.perf_counter()
    pix = smp.pixel_centers(camera.width, camera.height)
    rays = smp.generate_rays(camera, pix)
    rgb = np.zeros((len(pix), 3))
    depth = np.zeros(len(pix))
    wsum = np.zeros(len(pix))
    with torch.no_grad():
        for s in range(0, len(pix), cfg.chunk):
            sl = slice(s, s + cfg.chunk)
            out = render_rays(scene, rays.take(sl), cfg, field)
            rgb[sl] = out.color.double().numpy()
            depth[sl] = out.depth.double().numpy()
            wsum[sl] = out.weight_sum.double().numpy()
    shape = (camera.height, camera.width)
    res = ImageResult(rgb.reshape(*shape, 3), depth.reshape(shape), wsum.reshape(shape),
                      time.perf_counter() - start)
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        write_png(out_prefix.with_suffix(".png"), res.image)
        write_pfm(out_prefix.with_name(out_prefix.name + "_depth.pfm"), res.depth)
        write_pfm(out_prefix.with_name(out_prefix.name + "_weight.pfm"), res.weight)
    return res
