"""Voxel-level editing on a sphere field: duplicate half of it, check collisions, render the scene.

    python3 scripts/editing_demo.py --out runs/edit [--ckpt runs/sphere/final.vxs]

Without ``--ckpt`` the exact sphere sdf stands in for a trained field.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from voxsdf import synth, trainer, voxgrid
from voxsdf.field import AnalyticField
from voxsdf.renderer import RenderConfig, render_image


def sphere_field(radius: float = 0.5):
    grid = voxgrid.init_grid(([-0.8] * 3, [0.8] * 3), 0.1, emb_dim=1)
    field = AnalyticField(lambda p: np.linalg.norm(p, axis=-1) - radius,
                          lambda p: 0.5 + 0.5 * p / np.linalg.norm(p, axis=-1, keepdims=True))
    # keep only voxels near the surface, as training would
    return voxgrid.prune(grid, field, 0.02, 64), field


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/edit")
    ap.add_argument("--ckpt")
    ap.add_argument("--offset", type=float, default=1.2)
    a = ap.parse_args()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    if a.ckpt:
        st = trainer.load_checkpoint(a.ckpt)
        grid, field = st.grid, st.model
    else:
        grid, field = sphere_field()

    lo, hi = grid.bounds()
    half = voxgrid.select_voxels(grid, ((0.0, lo[1], lo[2]), tuple(hi)))
    scene = voxgrid.edit_voxels(grid, half, voxgrid.Duplicate((a.offset, 0.0, 0.0)), field)
    base, copy = scene.instances
    hit, pairs = voxgrid.collision_query(base, copy)
    print(f"{grid.num_voxels} voxels, duplicated {len(half)}; collision={hit} ({len(pairs)} pairs)")

    closer = voxgrid.Instance(copy.grid, field, translation=(a.offset / 4, 0.0, 0.0))
    hit2, pairs2 = voxgrid.collision_query(base, closer)
    print(f"copy moved to x+{a.offset / 4:g}: collision={hit2} ({len(pairs2)} pairs)")

    cam = synth.make_cameras(1, 3.0, target=(a.offset / 2, 0.0, 0.0), width=96, height=64)[0]
    res = render_image(scene, cam, RenderConfig(step_size=0.01), out_prefix=out / "scene")
    print(f"rendered {out / 'scene.png'} in {res.seconds:.1f} s, coverage {float((res.weight > 0.5).mean()):.2f}")


if __name__ == "__main__":
    main()
