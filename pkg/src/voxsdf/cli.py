"""Command-line entry points. Each subcommand only wires library calls together."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import mesher, synth, trainer, voxgrid
from .fileio import read_ply, write_obj, write_ply
from .renderer import RenderConfig, render_image

log = logging.getLogger("voxsdf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2; usage errors are 1 here
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for p in pairs:
        if "=" not in p:
            raise UsageError(f"override {p!r} is not key=value")
        k, v = p.split("=", 1)
        out[k] = v
    return out


# -- scene files: JSON list of checkpoint + transform ---------------------------------------------

def save_scene(scene: voxgrid.SceneGrid, path: Path) -> None:
    """Write each instance's grid and field as a checkpoint next to a JSON scene file."""
    path = Path(path)
    entries = []
    for k, inst in enumerate(scene.instances):
        ck = path.with_name(f"{path.stem}_{k}.vxs")
        trainer.save_checkpoint(trainer.TrainState(inst.grid, inst.field, trainer.TrainConfig()), ck)
        entries.append({"checkpoint": ck.name, "rotation": inst.rotation.ravel().tolist(),
                        "translation": inst.translation.tolist(), "scale": inst.scale})
    path.write_text(json.dumps({"instances": entries}, indent=1) + "\n")


def load_scene(path: Path) -> voxgrid.SceneGrid:
    """A ``.json`` scene file or a bare checkpoint (identity instance)."""
    path = Path(path)
    if path.suffix != ".json":
        st = trainer.load_checkpoint(path)
        return voxgrid.SceneGrid([voxgrid.Instance(st.grid, st.model)])
    data = json.loads(path.read_text())
    out = []
    for e in data["instances"]:
        st = trainer.load_checkpoint(path.parent / e["checkpoint"])
        out.append(voxgrid.Instance(st.grid, st.model, np.reshape(e["rotation"], (3, 3)),
                                    np.asarray(e["translation"]), float(e.get("scale", 1.0))))
    return voxgrid.SceneGrid(out)


# -- subcommands ------------------------------------------------------------------------------------

def cmd_gen_dataset(a) -> None:
    ds = synth.gen_dataset(a.scene, a.views, a.width, a.height or a.width, a.out, seed=a.seed,
                           radius=a.radius, phase=a.phase)
    print(f"wrote {len(ds.cameras)} views to {a.out}")


def cmd_train(a) -> None:
    over = _overrides(a.set)
    over.setdefault("seed", str(a.seed))
    if a.threads:
        over["threads"] = str(a.threads)
    cfg = trainer.load_config(a.config, over)
    ds = synth.load_dataset(a.data)
    eval_ds = synth.load_dataset(a.eval_data) if a.eval_data else None
    state = trainer.load_checkpoint(a.resume, cfg) if a.resume else None
    state, _ = trainer.run_training(ds, cfg, a.out, eval_ds, state)
    Path(a.out, "config.txt").write_text(trainer.dump_config(cfg))
    print(f"trained {state.iteration} iterations, {state.grid.num_voxels} voxels -> {Path(a.out) / 'final.vxs'}")


def cmd_render(a) -> None:
    scene = load_scene(a.ckpt)
    ds = synth.load_dataset(a.data)
    views = range(len(ds.cameras)) if a.view is None else [a.view]
    cfg = RenderConfig(step_size=a.step_size, sampling=a.sampling, seed=a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in views:
        res = render_image(scene, ds.cameras[v], cfg, out_prefix=out / f"view_{v:04d}")
        score = mesher.psnr(np.clip(res.image, 0, 1), ds.images[v])
        print(f"{v},{score:.4f},{res.seconds:.3f}")


def cmd_extract_mesh(a) -> None:
    st = trainer.load_checkpoint(a.ckpt)
    mesh = mesher.extract_mesh(st.grid, st.model, a.cells)
    if len(mesh.faces):
        mesh = mesher.mesh_normals_and_colors(mesh, st.grid, st.model)
    if a.out.endswith(".obj"):
        write_obj(a.out, mesh.vertices, mesh.faces)
    else:
        write_ply(a.out, mesh.vertices, mesh.faces, mesh.normals, mesh.colors)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} triangles -> {a.out}")


def _points(path: str, n: int, seed: int) -> np.ndarray:
    v, f = read_ply(path)
    if n and len(f):
        return mesher.TriangleMesh(v, f).sample(n, seed)
    return v


def cmd_eval(a) -> None:
    pred = _points(a.mesh, a.samples, a.seed)
    gt = _points(a.gt, a.samples, a.seed + 1)
    print("chamfer,f_score")
    print(f"{mesher.chamfer(pred, gt):.8g},{mesher.f_score(pred, gt, a.threshold):.8g}")


def cmd_prune(a) -> None:
    st = trainer.load_checkpoint(a.ckpt)
    before = st.grid.num_voxels
    st.set_grid(voxgrid.prune(st.grid, st.model, a.tau, a.samples, a.seed))
    trainer.save_checkpoint(st, a.out)
    print(f"{before} -> {st.grid.num_voxels} voxels")


def cmd_split(a) -> None:
    st = trainer.load_checkpoint(a.ckpt)
    before = st.grid.num_voxels
    st.set_grid(voxgrid.split(st.grid))
    trainer.save_checkpoint(st, a.out)
    print(f"{before} -> {st.grid.num_voxels} voxels")


def cmd_edit(a) -> None:
    st = trainer.load_checkpoint(a.ckpt)
    region = (tuple(a.box[:3]), tuple(a.box[3:])) if a.box else st.grid.bounds()
    sel = voxgrid.select_voxels(st.grid, region)
    if a.op == "translate":
        op = voxgrid.Translate(a.offset)
    elif a.op == "duplicate":
        op = voxgrid.Duplicate(a.offset)
    elif a.op == "scale":
        op = voxgrid.Scale(a.factor, a.pivot)
    else:
        op = voxgrid.Delete()
    scene = voxgrid.edit_voxels(st.grid, sel, op, st.model, allow_overlap=a.allow_overlap)
    save_scene(scene, Path(a.out))
    print(f"selected {len(sel)} voxels; scene with {len(scene.instances)} instances -> {a.out}")


def cmd_compose(a) -> None:
    parts = []
    for spec in a.inputs:
        path, _, off = spec.partition("@")
        t = np.array([float(x) for x in off.split(",")]) if off else np.zeros(3)
        st = trainer.load_checkpoint(path)
        parts.append((st.grid, (np.eye(3), t), st.model))
    scene = voxgrid.compose(parts)
    save_scene(scene, Path(a.out))
    print(f"composed {len(parts)} instances -> {a.out}")


def cmd_collide(a) -> None:
    scene = load_scene(a.scene)
    hit, pairs = voxgrid.collision_query(scene.instances[a.a], scene.instances[a.b])
    print("collision,pairs")
    print(f"{int(hit)},{len(pairs)}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxsdf", description="Sparse-voxel neural SDF reconstruction toolkit.")
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--threads", type=int, default=0, help="cap on torch worker threads (0 = library default)")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen-dataset", help="render a synthetic RGB-D dataset")
    s.add_argument("--scene", default="sphere", help="preset name or JSON scene file")
    s.add_argument("--views", type=int, default=24)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=0)
    s.add_argument("--radius", type=float, default=2.0)
    s.add_argument("--phase", type=float, default=0.0, help="spiral offset (0.5 gives held-out views)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_dataset)

    s = sub.add_parser("train", help="progressive training on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config", default=None, help="flat key = value config file")
    s.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE", help="config overrides")
    s.add_argument("--eval-data", default=None, help="held-out views for PSNR logging")
    s.add_argument("--resume", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("render", help="render dataset views from a checkpoint or scene file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--view", type=int, default=None)
    s.add_argument("--sampling", default="uniform", choices=["uniform", "full", "first"])
    s.add_argument("--step-size", type=float, default=0.03)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("extract-mesh", help="marching cubes over the retained voxels")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cells", type=int, default=8, help="cells per voxel edge")
    s.add_argument("--out", required=True, help=".ply or .obj")
    s.set_defaults(fn=cmd_extract_mesh)

    s = sub.add_parser("eval", help="chamfer and F-score between two PLY files (CSV to stdout)")
    s.add_argument("--mesh", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--threshold", type=float, default=0.05)
    s.add_argument("--samples", type=int, default=0, help="area-sample N points from meshes (0 = vertices)")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("prune", help="drop voxels without a near-zero sdf sample")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--tau", type=float, default=0.01)
    s.add_argument("--samples", type=int, default=512)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_prune)

    s = sub.add_parser("split", help="subdivide every voxel into eight")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_split)

    s = sub.add_parser("edit", help="translate, duplicate, scale or delete a box selection")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--op", required=True, choices=["translate", "duplicate", "scale", "delete"])
    s.add_argument("--box", type=float, nargs=6, default=None, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"))
    s.add_argument("--offset", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    s.add_argument("--factor", type=float, default=1.0)
    s.add_argument("--pivot", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    s.add_argument("--allow-overlap", action="store_true")
    s.add_argument("--out", required=True, help="scene .json")
    s.set_defaults(fn=cmd_edit)

    s = sub.add_parser("compose", help="combine checkpoints into one scene")
    s.add_argument("inputs", nargs="+", metavar="CKPT[@tx,ty,tz]")
    s.add_argument("--out", required=True, help="scene .json")
    s.set_defaults(fn=cmd_compose)

    s = sub.add_parser("collide", help="voxel overlap between two scene instances")
    s.add_argument("--scene", required=True)
    s.add_argument("--a", type=int, default=0)
    s.add_argument("--b", type=int, default=1)
    s.set_defaults(fn=cmd_collide)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage())
    except UsageError as e:
        sys.stderr.write(str(e))
        return 1
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        args.fn(args)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return 1
    except (KeyError, ValueError) as e:
        if isinstance(e, KeyError) and "config key" in str(e):
            sys.stderr.write(f"usage error: {e}\n")
            return 1
        sys.stderr.write(f"error: {e}\n")
        return 2
    except Exception as e:  # noqa: BLE001 - surfaced as a runtime failure
        sys.stderr.write(f"error: {type(e).__name__}: {e}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
