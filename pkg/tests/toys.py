"""Tiny in-memory scenes shared by trainer, CLI and acceptance tests."""
import numpy as np
import torch

from voxsdf import sampler as smp
from voxsdf.synth import SceneDataset, gt_render, make_cameras, sphere_scene
from voxsdf.trainer import RayPool, TrainConfig, depth_samples, new_state, occupancy, train_step

TOY_BOUNDS = (np.full(3, -0.6), np.full(3, 0.6))


def toy_dataset(n_views=6, size=12, radius=0.5, phase=0.0):
    scene = sphere_scene(radius)
    cams = make_cameras(n_views, 2.0, width=size, height=size, phase=phase)
    images, depths = zip(*(gt_render(scene, c) for c in cams))
    return SceneDataset(list(cams), list(images), [d.astype(np.float32) for d in depths], TOY_BOUNDS)


def toy_config(**kw):
    """One 1.2-wide voxel around the sphere, small MLPs, no structure events."""
    base = dict(iterations=200, batch_rays=64, step_size=0.05, voxel_size=1.2, lr=5e-3,
                prune_every=0, split_at=[], full_sampling_at=10 ** 9, first_sampling_at=10 ** 9,
                emb_dim=4, feat_dim=8, hidden=16, geo_layers=2, app_layers=2, n_freq_dir=4,
                eik_points_per_voxel=8, log_every=0)
    base.update(kw)
    return TrainConfig(**base)


def free_space_probe(state, pool, n_rays=64, seed=123):
    """Fixed free-space points (in front of the observed depth) on a fixed ray subset."""
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(np.nonzero(pool.depths > 0)[0], n_rays, replace=False))
    rays = smp.Rays(pool.origins[idx], pool.dirs[idx], idx)
    r, t, vid, lab = depth_samples(state.grid, rays, pool.depths[idx], state.config.delta, 8,
                                   state.config.max_hits, seed)
    keep = lab == 0
    pts = rays.origins[r[keep]] + t[keep, None] * rays.dirs[r[keep]]
    return pts, vid[keep]


def mean_free_occupancy(state, probe):
    pts, vid = probe
    with torch.no_grad():
        sdf = state.model.sdf(state.grid, torch.as_tensor(pts, dtype=state.grid.embeddings.dtype), vid)
    return float(occupancy(sdf, state.config.occupancy_scale).mean())


def solid_start(state, sdf=-0.1):
    """Make the initial field a constant ``sdf`` (everything inside), so free space has to be carved."""
    head = state.model.geo[-1]
    with torch.no_grad():
        head.weight[0].zero_()
        head.bias[0] = sdf


def depth_toy_curve(seed, steps=500, every=50, **overrides):
    """Free-space occupancy every ``every`` steps of depth-supervised training from a solid start.

    The low learning rate keeps the whole window on the descent; at 5e-4 and above the
    curve reaches its converged level within ~150 steps and only batch noise is left.
    """
    ds = toy_dataset()
    cfg = toy_config(**{"seed": seed, "use_depth": True, "iterations": steps, "lr": 1e-4, **overrides})
    state = new_state(cfg, ds.bounds)
    solid_start(state)
    pool = RayPool.from_dataset(ds)
    probe = free_space_probe(state, pool)
    curve = [mean_free_occupancy(state, probe)]
    for it in range(steps):
        train_step(state, pool.batch(cfg.batch_rays, np.random.default_rng([seed, it])))
        if (it + 1) % every == 0:
            curve.append(mean_free_occupancy(state, probe))
    return np.array(curve)
