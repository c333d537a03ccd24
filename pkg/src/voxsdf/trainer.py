"""Losses, optimiser, progressive prune/split schedule and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import struct
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np
import torch

from . import sampler as smp
from .field import FieldModel, flush_denormals, read_field, write_field
from .mesher import psnr
from .renderer import RenderConfig, render_image, render_rays
from .synth import SceneDataset
from .voxgrid import VoxelGrid, _read_exact, init_grid, prune, read_grid, split, stratified_points, write_grid

log = logging.getLogger(__name__)

CKPT_MAGIC = b"VXSC"
CKPT_VERSION = 1
OPT_MAGIC = b"VXSO"


@dataclass
class TrainConfig:
    iterations: int = 20000
    lr: float = 1e-3
    lr_embeddings: float | None = None
    lr_log_s: float | None = None
    batch_rays: int = 2048
    step_size: float = 0.03
    max_hits: int = 20
    voxel_size: float = 0.8
    tau: float = 0.01
    prune_samples: int = 512
    prune_every: int = 50000
    split_at: list[int] = dc_field(default_factory=lambda: [20000, 50000, 100000, 200000, 300000])
    prune_before_split: bool = True
    full_sampling_at: int = 50000
    first_sampling_at: int = 200000
    boost: float = 8.0
    lambda_color: float = 1.0
    lambda_eik: float = 0.1
    lambda_depth: float = 1.0
    use_depth: bool = False
    depth_delta: float | None = None
    occupancy_scale: float = 20.0
    depth_samples: int = 8
    depth_loss_paper_literal: bool = False
    eik_points_per_voxel: int = 8
    emb_dim: int = 16
    feat_dim: int = 128
    hidden: int = 128
    geo_layers: int = 4
    app_layers: int = 4
    n_freq_emb: int = 4
    n_freq_dir: int = 8
    init_log_s: float = 0.0
    background: list[float] = dc_field(default_factory=lambda: [0.0, 0.0, 0.0])
    seed: int = 0
    log_every: int = 100
    eval_every: int = 0
    checkpoint_every: int = 0
    threads: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_rays <= 0 or self.step_size <= 0 or self.tau <= 0:
            raise ValueError("lr, batch_rays, step_size and tau must be positive")
        if list(self.split_at) != sorted(self.split_at):
            raise ValueError("split milestones must be ascending")
        if self.first_sampling_at < self.full_sampling_at:
            raise ValueError("sampling milestones must be ascending")

    @property
    def delta(self) -> float:
        return self.depth_delta if self.depth_delta is not None else 2.0 * self.step_size

    def phase(self, iteration: int) -> str:
        if iteration >= self.first_sampling_at:
            return "first"
        if iteration >= self.full_sampling_at:
            return "full"
        return "uniform"


def _parse_value(raw: str, current: Any, name: str) -> Any:
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        items = [x for x in raw.replace("[", "").replace("]", "").split(",") if x.strip()]
        typ = type(current[0]) if current else int
        return [typ(float(x)) if typ is int else typ(x) for x in items]
    if current is None:
        return None if raw.lower() in ("none", "") else float(raw)
    return raw


def config_from_items(items: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Apply string ``key -> value`` pairs to a config; unknown keys raise ``KeyError``."""
    base = base or TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    kw = {}
    for k, v in items.items():
        k = k.strip().replace("-", "_")
        if k not in known:
            raise KeyError(f"unknown config key {k!r}")
        kw[k] = _parse_value(v, getattr(base, k), k)
    return dataclasses.replace(base, **kw)


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Flat ``key = value`` text file (``#`` comments) plus overrides."""
    items: dict[str, str] = {}
    if path is not None:
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            items[k.strip()] = v.strip()
    items.update(overrides or {})
    return config_from_items(items)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# -- losses --------------------------------------------------------------------------------------

def color_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the per-ray L1 norm (summed over channels)."""
    if pred.shape != gt.shape:
        raise ValueError("ray count mismatch")
    if pred.shape[0] == 0:
        return pred.sum() * 0
    return (gt - pred).abs().sum(-1).mean()


def eikonal_loss(gradients: torch.Tensor) -> torch.Tensor:
    if gradients.shape[0] == 0:
        return gradients.sum() * 0
    return ((torch.linalg.norm(gradients, dim=-1) - 1.0) ** 2).mean()


def regularization_points(grid: VoxelGrid, n_per_voxel: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified jittered points inside every voxel, with their voxel ids."""
    rng = np.random.default_rng(seed)
    local = stratified_points(grid.num_voxels, n_per_voxel, rng)
    pts = grid.voxel_min()[:, None, :] + local * grid.voxel_size
    vid = np.repeat(np.arange(grid.num_voxels), local.shape[1])
    return pts.reshape(-1, 3), vid


def occupancy(sdf: torch.Tensor, scale: float) -> torch.Tensor:
    if scale <= 0:
        raise ValueError("scale must be positive")
    return torch.sigmoid(-scale * torch.as_tensor(sdf))


OUTSIDE, NEAR, INSIDE = 0, 1, 2


def partition_depth(t: np.ndarray, t_gt: np.ndarray, delta: float) -> np.ndarray:
    """Label samples as free space (0), near band (1) or behind the surface (2)."""
    t_gt = np.asarray(t_gt)[..., None] if np.ndim(t_gt) == np.ndim(t) - 1 else np.asarray(t_gt)
    return np.where(t < t_gt - delta, OUTSIDE, np.where(t > t_gt + delta, INSIDE, NEAR))


def depth_loss_terms(sdf: torch.Tensor, labels: np.ndarray, scale: float,
                     paper_literal: bool = False) -> dict[str, torch.Tensor]:
    """Mean squared penalties per interval.

    Sign-consistent form: free space -> occupancy 0, behind surface -> 1, near
    band -> sdf 0. ``paper_literal`` swaps the free-space and behind targets.
    """
    occ = occupancy(sdf, scale)
    lab = torch.as_tensor(labels)
    zero = sdf.sum() * 0

    def mean(x, m):
        return x[m].mean() if bool(m.any()) else zero

    free_target, behind_target = (1.0, 0.0) if paper_literal else (0.0, 1.0)
    return {"outside": mean((occ - free_target) ** 2, lab == OUTSIDE),
            "near": mean(sdf ** 2, lab == NEAR),
            "inside": mean((occ - behind_target) ** 2, lab == INSIDE)}


def depth_loss(sdf: torch.Tensor, labels: np.ndarray, scale: float, paper_literal: bool = False) -> torch.Tensor:
    return sum(depth_loss_terms(sdf, labels, scale, paper_literal).values())


def clip_hits(hits: smp.RayHits, lo: np.ndarray, hi: np.ndarray) -> smp.RayHits:
    """Restrict hit intervals to [lo, hi] per ray; empty pieces become padding."""
    t_in = np.maximum(hits.t_in, lo[:, None])
    t_out = np.minimum(hits.t_out, hi[:, None])
    ok = (hits.vid >= 0) & (t_out > t_in)
    order = np.argsort(~ok, axis=1, kind="stable")
    take = lambda a: np.take_along_axis(a, order, 1)
    ok = take(ok)
    return smp.RayHits(np.where(ok, take(hits.vid), -1), np.where(ok, take(t_in), 0.0), np.where(ok, take(t_out), 0.0))


def depth_samples(grid: VoxelGrid, rays: smp.Rays, t_gt: np.ndarray, delta: float, n_per_interval: int,
                  max_hits: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Points in the three depth intervals of each ray (uniform voxel sampling per interval).

    Returns ray index, t, voxel id and interval label per point. Rays with
    t_gt <= 0 (no depth) contribute nothing.
    """
    hits = smp.intersect(grid.octree, rays.origins, rays.dirs, max_hits)
    valid = t_gt > 0
    out = []
    big = np.full(len(rays), np.inf)
    bounds = [(np.zeros(len(rays)), t_gt - delta), (t_gt - delta, t_gt + delta), (t_gt + delta, big)]
    for label, (lo, hi) in enumerate(bounds):
        h = clip_hits(hits, lo, hi)
        s = smp.uniform_voxel_sampling(h, 1.0, rays.ids, n_per_interval, seed + 7 * (label + 1))
        s = smp.clamp_intervals(s, h)
        m = s.mask & valid[:, None]
        r, i = np.nonzero(m)
        out.append((r, s.t[r, i], s.vid[r, i], np.full(len(r), label)))
    return tuple(np.concatenate([o[k] for o in out]) for k in range(4))


# -- optimiser ------------------------------------------------------------------------------------

class Adam:
    """Adam with lazy rows for the embedding table (rows without gradient are left alone)."""

    def __init__(self, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.betas, self.eps = betas, eps
        self.step_count = 0
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}

    def reset(self, name: str) -> None:
        self.m.pop(name, None)
        self.v.pop(name, None)

    @torch.no_grad()
    def step(self, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
             lrs: dict[str, float], lazy: tuple[str, ...] = ("embeddings",)) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if name not in self.m:
                self.m[name] = torch.zeros_like(p)
                self.v[name] = torch.zeros_like(p)
            m, v = self.m[name], self.v[name]
            if name in lazy and p.dim() == 2:
                rows = torch.nonzero(g.abs().sum(1) > 0).squeeze(1)
                if len(rows) == 0:
                    continue
                m[rows] = b1 * m[rows] + (1 - b1) * g[rows]
                v[rows] = b2 * v[rows] + (1 - b2) * g[rows] ** 2
                p[rows] -= lrs[name] * (m[rows] / c1) / (torch.sqrt(v[rows] / c2) + self.eps)
            else:
                m.mul_(b1).add_((1 - b1) * g)
                v.mul_(b2).add_((1 - b2) * g * g)
                p -= lrs[name] * (m / c1) / (torch.sqrt(v / c2) + self.eps)


# -- state and steps ------------------------------------------------------------------------------

@dataclass
class TrainState:
    grid: VoxelGrid
    model: FieldModel
    config: TrainConfig
    optim: Adam = dc_field(default_factory=Adam)
    iteration: int = 0

    def params(self) -> dict[str, torch.Tensor]:
        out = dict(self.model.named_parameters())
        out["embeddings"] = self.grid.embeddings
        return out

    def learning_rates(self) -> dict[str, float]:
        c = self.config
        lrs = {n: c.lr for n, _ in self.model.named_parameters()}
        lrs["log_s"] = c.lr_log_s if c.lr_log_s is not None else c.lr
        lrs["embeddings"] = c.lr_embeddings if c.lr_embeddings is not None else c.lr
        return lrs

    def set_grid(self, grid: VoxelGrid) -> None:
        self.grid = grid
        self.optim.reset("embeddings")


def new_state(config: TrainConfig, bounds: tuple[np.ndarray, np.ndarray], dtype: torch.dtype = torch.float32) -> TrainState:
    grid = init_grid(bounds, config.voxel_size, config.emb_dim, config.seed, dtype)
    model = FieldModel(config.emb_dim, config.feat_dim, config.hidden, config.geo_layers, config.app_layers,
                       config.n_freq_emb, config.n_freq_dir, seed=config.seed, dtype=dtype,
                       init_log_s=config.init_log_s)
    return TrainState(grid, model, config)


@dataclass
class RayBatch:
    rays: smp.Rays
    colors: np.ndarray
    depths: np.ndarray | None = None


def render_config(cfg: TrainConfig, iteration: int, phase: str | None = None) -> RenderConfig:
    return RenderConfig(step_size=cfg.step_size, max_hits=cfg.max_hits, sampling=phase or cfg.phase(iteration),
                        boost=cfg.boost, background=tuple(cfg.background),
                        seed=(cfg.seed * 1_000_003 + iteration) & 0x7FFFFFFF)


def compute_losses(state: TrainState, batch: RayBatch, phase: str | None = None) -> dict[str, torch.Tensor]:
    cfg, grid, model = state.config, state.grid, state.model
    seed = (cfg.seed * 1_000_003 + state.iteration) & 0x7FFFFFFF
    need_grad = cfg.lambda_eik > 0
    out = render_rays(grid, batch.rays, render_config(cfg, state.iteration, phase), field=model,
                      with_gradient=need_grad, create_graph=need_grad)
    hit = torch.as_tensor(out.hit_any)
    gt = torch.as_tensor(batch.colors, dtype=out.color.dtype)
    losses = {"color": color_loss(out.color[hit], gt[hit])}
    zero = out.color.sum() * 0
    if need_grad:
        pts, vid = regularization_points(grid, cfg.eik_points_per_voxel, seed)
        q = model.query(grid, torch.as_tensor(pts), vid, with_gradient=True, create_graph=True)
        grads = torch.cat(out.gradients + [q.gradient.to(out.color.dtype)], 0)
        losses["eikonal"] = eikonal_loss(grads)
    else:
        losses["eikonal"] = zero
    if cfg.use_depth and batch.depths is not None and cfg.lambda_depth > 0:
        r, t, vid, lab = depth_samples(grid, batch.rays, batch.depths, cfg.delta, cfg.depth_samples,
                                       cfg.max_hits, seed)
        pts = batch.rays.origins[r] + t[:, None] * batch.rays.dirs[r]
        sdf = model.sdf(grid, torch.as_tensor(pts), vid)
        losses["depth"] = depth_loss(sdf, lab, cfg.occupancy_scale, cfg.depth_loss_paper_literal)
    else:
        losses["depth"] = zero
    losses["total"] = (cfg.lambda_color * losses["color"] + cfg.lambda_eik * losses["eikonal"]
                       + (cfg.lambda_depth * losses["depth"] if cfg.use_depth else 0))
    return losses


def train_step(state: TrainState, batch: RayBatch, phase: str | None = None) -> dict[str, float]:
    """One forward/backward/Adam update; raises on a non-finite loss or gradient."""
    losses = compute_losses(state, batch, phase)
    total = losses["total"]
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite loss at iteration {state.iteration}: "
                                 + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in losses.items()))
    params = state.params()
    names = list(params)
    if total.requires_grad:
        g = torch.autograd.grad(total, [params[n] for n in names], allow_unused=True)
        grads = {n: (torch.zeros_like(params[n]) if x is None else x) for n, x in zip(names, g)}
    else:
        grads = {n: torch.zeros_like(params[n]) for n in names}
    bad = [n for n in names if not torch.isfinite(grads[n]).all()]
    if bad:
        raise FloatingPointError(f"non-finite gradient at iteration {state.iteration}: {', '.join(bad)}")
    state.optim.step(params, grads, state.learning_rates())
    state.iteration += 1
    return {k: float(v.detach()) for k, v in losses.items()}


# -- data -------------------------------------------------------------------------------------------

@dataclass
class RayPool:
    """All training pixels as rays, with colours and (optionally) depths."""

    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray
    depths: np.ndarray | None

    @classmethod
    def from_dataset(cls, ds: SceneDataset) -> "RayPool":
        o, d, c, z = [], [], [], []
        for cam, img, dep in zip(ds.cameras, ds.images, ds.depths):
            rays = smp.generate_rays(cam, smp.pixel_centers(cam.width, cam.height))
            o.append(rays.origins)
            d.append(rays.dirs)
            c.append(img.reshape(-1, 3))
            z.append(np.zeros(len(rays)) if dep is None else np.asarray(dep, dtype=np.float64).ravel())
        return cls(np.concatenate(o), np.concatenate(d), np.concatenate(c), np.concatenate(z))

    def batch(self, n: int, rng: np.random.Generator) -> RayBatch:
        idx = rng.choice(len(self.origins), size=min(n, len(self.origins)), replace=False)
        idx.sort()
        return RayBatch(smp.Rays(self.origins[idx], self.dirs[idx], idx),
                        self.colors[idx], None if self.depths is None else self.depths[idx])


def evaluate_psnr(state: TrainState, ds: SceneDataset, phase: str | None = None) -> float:
    cfg = render_config(state.config, 0, phase or state.config.phase(state.iteration))
    vals = []
    for cam, img in zip(ds.cameras, ds.images):
        res = render_image(state.grid, cam, cfg, field=state.model)
        vals.append(psnr(np.clip(res.image, 0, 1), img))
    return float(np.mean(vals))


def apply_structure_events(state: TrainState, it: int, events: list[tuple[int, str]]) -> None:
    cfg = state.config
    do_prune = cfg.prune_every > 0 and it > 0 and it % cfg.prune_every == 0
    do_split = it in cfg.split_at
    steps = [("prune", do_prune), ("split", do_split)]
    if not cfg.prune_before_split:
        steps.reverse()
    for name, on in steps:
        if not on:
            continue
        before = state.grid.num_voxels
        if name == "prune":
            grid = prune(state.grid, state.model, cfg.tau, cfg.prune_samples, seed=cfg.seed + it)
        else:
            grid = split(state.grid)
        state.set_grid(grid)
        events.append((it, f"{name}:{before}->{grid.num_voxels}"))
        log.info("iteration %d: %s %d -> %d voxels", it, name, before, grid.num_voxels)


METRIC_FIELDS = ["iteration", "event", "phase", "total", "color", "eikonal", "depth", "voxels", "s", "psnr", "seconds"]


def run_training(ds: SceneDataset, cfg: TrainConfig, out_dir: str | Path | None = None,
                 eval_ds: SceneDataset | None = None, state: TrainState | None = None,
                 dtype: torch.dtype = torch.float32) -> tuple[TrainState, list[dict]]:
    """Full progressive schedule. Writes ``metrics.csv`` and checkpoints when ``out_dir`` is set."""
    with flush_denormals():
        return _run_training(ds, cfg, out_dir, eval_ds, state, dtype)


def _run_training(ds, cfg, out_dir, eval_ds, state, dtype):
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    state = state or new_state(cfg, ds.bounds, dtype)
    pool = RayPool.from_dataset(ds)
    if not cfg.use_depth:
        pool.depths = None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    start = time.perf_counter()
    phase = cfg.phase(state.iteration)

    def record(it, event="", losses=None, value=None):
        row = {k: "" for k in METRIC_FIELDS}
        row.update(iteration=it, event=event, phase=cfg.phase(it), voxels=state.grid.num_voxels,
                   s=f"{float(state.model.s.detach()):.6g}", seconds=f"{time.perf_counter() - start:.2f}")
        if losses:
            row.update({k: f"{v:.6g}" for k, v in losses.items()})
        if value is not None:
            row["psnr"] = f"{value:.4f}"
        rows.append(row)

    while state.iteration < cfg.iterations:
        it = state.iteration
        events: list[tuple[int, str]] = []
        apply_structure_events(state, it, events)
        if cfg.phase(it) != phase:
            events.append((it, f"phase:{phase}->{cfg.phase(it)}"))
            phase = cfg.phase(it)
        for _, ev in events:
            record(it, ev)
        rng = np.random.default_rng([cfg.seed, it])
        losses = train_step(state, pool.batch(cfg.batch_rays, rng))
        done = state.iteration
        if cfg.log_every and done % cfg.log_every == 0:
            record(done, losses=losses)
            log.info("it %d loss %.4f color %.4f eik %.4f s %.1f vox %d", done, losses["total"], losses["color"],
                     losses["eikonal"], float(state.model.s.detach()), state.grid.num_voxels)
        if cfg.eval_every and eval_ds is not None and done % cfg.eval_every == 0:
            record(done, "eval", value=evaluate_psnr(state, eval_ds))
        if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(state, out / f"ckpt_{done:07d}.vxs")
    if out is not None:
        save_checkpoint(state, out / "final.vxs")
        with open(out / "metrics.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
            w.writeheader()
            w.writerows(rows)
    return state, rows


# -- checkpoints ----------------------------------------------------------------------------------

def _write_optimizer(f: BinaryIO, state: TrainState) -> None:
    names = list(state.params())
    f.write(OPT_MAGIC)
    f.write(struct.pack("<IQI", 1, state.optim.step_count, len(names)))
    for n in names:
        p = state.params()[n]
        m = state.optim.m.get(n)
        has = m is not None
        b = n.encode()
        f.write(struct.pack("<H", len(b)) + b)
        f.write(struct.pack("<QB", p.numel(), int(has)))
        if has:
            f.write(m.detach().float().numpy().astype("<f4").tobytes())
            f.write(state.optim.v[n].detach().float().numpy().astype("<f4").tobytes())


def _read_optimizer(f: BinaryIO, params: dict[str, torch.Tensor]) -> Adam:
    if _read_exact(f, 4) != OPT_MAGIC:
        raise ValueError("bad optimizer magic")
    version, steps, count = struct.unpack("<IQI", _read_exact(f, 16))
    opt = Adam()
    opt.step_count = steps
    for _ in range(count):
        (ln,) = struct.unpack("<H", _read_exact(f, 2))
        name = _read_exact(f, ln).decode()
        numel, has = struct.unpack("<QB", _read_exact(f, 9))
        if name not in params or params[name].numel() != numel:
            raise ValueError(f"optimizer state does not match parameter {name}")
        if has:
            shape = params[name].shape
            dt = params[name].dtype
            opt.m[name] = torch.from_numpy(np.frombuffer(_read_exact(f, 4 * numel), "<f4").copy()).reshape(shape).to(dt)
            opt.v[name] = torch.from_numpy(np.frombuffer(_read_exact(f, 4 * numel), "<f4").copy()).reshape(shape).to(dt)
    return opt


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """``VXSC`` header, grid and field sections, optimiser moments, iteration counter."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
        write_grid(f, state.grid)
        write_field(f, state.model)
        _write_optimizer(f, state)
        f.write(struct.pack("<Q", state.iteration))


def load_checkpoint(path: str | Path, config: TrainConfig | None = None,
                    dtype: torch.dtype = torch.float32) -> TrainState:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8 or head[:4] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", head[4:])
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        grid = read_grid(f, dtype)
        model = read_field(f, dtype)
        state = TrainState(grid, model, config or TrainConfig(emb_dim=grid.emb_dim))
        state.optim = _read_optimizer(f, state.params())
        (state.iteration,) = struct.unpack("<Q", _read_exact(f, 8))
    return state
