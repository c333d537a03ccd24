import json
import subprocess
import sys

import numpy as np
import pytest

from voxsdf import mesher, synth, trainer, voxgrid
from voxsdf.cli import load_scene, main
from voxsdf.fileio import read_ply, write_ply
from voxsdf.renderer import RenderConfig, render_image

TINY = """\
iterations = 3
batch_rays = 32
step_size = 0.1
voxel_size = 0.5
prune_every = 0
split_at = 2
full_sampling_at = 1
first_sampling_at = 100
emb_dim = 4
feat_dim = 8
hidden = 16
geo_layers = 2
app_layers = 2
n_freq_dir = 2
eik_points_per_voxel = 1
log_every = 1
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-dataset", "--views", 3, "--width", 8, "--out", root / "data") == 0
    (root / "tiny.cfg").write_text(TINY)
    assert run("--seed", 7, "train", "--data", root / "data", "--config", root / "tiny.cfg", "--out", root / "a") == 0
    return root


def test_no_args_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert main(["eval", "--mesh", "a", "--gt", "b", "--bogus", "1"]) == 1
    assert "unrecognized arguments" in capsys.readouterr().err
    assert main(["not-a-command"]) == 1


def test_unknown_config_key(workspace, capsys):
    code = run("train", "--data", workspace / "data", "--set", "no_such_key=1", "--out", workspace / "x")
    assert code == 1
    assert "unknown config key" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, capsys):
    assert run("extract-mesh", "--ckpt", tmp_path / "missing.vxs", "--out", tmp_path / "m.ply") == 2
    (tmp_path / "junk.vxs").write_bytes(b"nope")
    assert run("split", "--ckpt", tmp_path / "junk.vxs", "--out", tmp_path / "s.vxs") == 2
    assert "magic" in capsys.readouterr().err


def test_help_lists_subcommands():
    out = subprocess.run([sys.executable, "-m", "voxsdf", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-dataset", "train", "render", "extract-mesh", "eval", "prune", "split", "edit", "compose",
                "collide"):
        assert cmd in out.stdout


def test_train_is_reproducible(workspace):
    assert run("--seed", 7, "train", "--data", workspace / "data", "--config", workspace / "tiny.cfg",
               "--out", workspace / "b") == 0
    assert (workspace / "a" / "final.vxs").read_bytes() == (workspace / "b" / "final.vxs").read_bytes()
    st = trainer.load_checkpoint(workspace / "a" / "final.vxs")
    assert st.iteration == 3 and st.grid.num_voxels == 8 * 64
    cfg = trainer.load_config(workspace / "a" / "config.txt")
    assert cfg.seed == 7 and cfg.iterations == 3


def test_train_matches_library(workspace):
    cfg = trainer.load_config(workspace / "tiny.cfg", {"seed": "7"})
    ds = synth.load_dataset(workspace / "data")
    st, _ = trainer.run_training(ds, cfg, workspace / "lib")
    assert (workspace / "lib" / "final.vxs").read_bytes() == (workspace / "a" / "final.vxs").read_bytes()


def test_render_matches_library(workspace, capsys):
    capsys.readouterr()
    assert run("render", "--ckpt", workspace / "a" / "final.vxs", "--data", workspace / "data", "--view", 1,
               "--out", workspace / "r") == 0
    view, score, _ = capsys.readouterr().out.strip().split(",")
    st = trainer.load_checkpoint(workspace / "a" / "final.vxs")
    ds = synth.load_dataset(workspace / "data")
    res = render_image(st.grid, ds.cameras[1], RenderConfig(step_size=0.03), st.model)
    assert view == "1"
    assert float(score) == pytest.approx(mesher.psnr(np.clip(res.image, 0, 1), ds.images[1]), abs=1e-4)
    assert (workspace / "r" / "view_0001.png").exists()


def test_eval_prints_csv(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(50, 3)), rng.uniform(size=(40, 3))
    write_ply(tmp_path / "a.ply", a, np.zeros((0, 3), dtype=np.int64))
    write_ply(tmp_path / "b.ply", b, np.zeros((0, 3), dtype=np.int64))
    assert run("eval", "--mesh", tmp_path / "a.ply", "--gt", tmp_path / "b.ply", "--threshold", 0.05) == 0
    head, row = capsys.readouterr().out.strip().splitlines()
    assert head == "chamfer,f_score"
    a2, _ = read_ply(tmp_path / "a.ply")
    b2, _ = read_ply(tmp_path / "b.ply")
    ch, fs = map(float, row.split(","))
    assert ch == pytest.approx(mesher.chamfer(a2, b2), rel=1e-7)
    assert fs == pytest.approx(mesher.f_score(a2, b2, 0.05), rel=1e-7)


def test_extract_prune_split(workspace, capsys):
    ck = workspace / "a" / "final.vxs"
    assert run("extract-mesh", "--ckpt", ck, "--cells", 2, "--out", workspace / "m.ply") == 0
    st = trainer.load_checkpoint(ck)
    mesh = mesher.extract_mesh(st.grid, st.model, 2)
    v, f = read_ply(workspace / "m.ply")
    assert len(v) == len(mesh.vertices) and len(f) == len(mesh.faces)
    assert run("split", "--ckpt", ck, "--out", workspace / "s.vxs") == 0
    assert trainer.load_checkpoint(workspace / "s.vxs").grid.num_voxels == 8 * st.grid.num_voxels
    for tau, name in ((10.0, "p.vxs"), (1e-9, "q.vxs")):
        try:
            expected = voxgrid.prune(st.grid, st.model, tau, 8, 0).num_voxels
        except RuntimeError:
            expected = None
        code = run("prune", "--ckpt", ck, "--tau", tau, "--samples", 8, "--out", workspace / name)
        if expected is None:
            assert code == 2 and "empty grid" in capsys.readouterr().err
        else:
            assert code == 0 and trainer.load_checkpoint(workspace / name).grid.num_voxels == expected


def test_edit_compose_collide(workspace, capsys):
    ck = workspace / "a" / "final.vxs"
    assert run("edit", "--ckpt", ck, "--op", "duplicate", "--box", -1, -1, -1, 0, 0, 0,
               "--offset", 2.5, 0, 0, "--out", workspace / "dup.json") == 0
    scene = load_scene(workspace / "dup.json")
    assert len(scene.instances) == 2
    st = trainer.load_checkpoint(ck)
    sel = voxgrid.select_voxels(st.grid, ((-1, -1, -1), (0, 0, 0)))
    ref = voxgrid.edit_voxels(st.grid, sel, voxgrid.Duplicate([2.5, 0, 0]), st.model)
    for a, b in zip(scene.instances, ref.instances):
        assert np.array_equal(a.grid.coords, b.grid.coords)
        assert np.allclose(a.translation, b.translation)
    assert run("compose", f"{ck}", f"{ck}@0.25,0,0", "--out", workspace / "comp.json") == 0
    capsys.readouterr()
    assert run("collide", "--scene", workspace / "comp.json") == 0
    head, row = capsys.readouterr().out.strip().splitlines()
    comp = load_scene(workspace / "comp.json")
    hit, pairs = voxgrid.collision_query(comp.instances[0], comp.instances[1])
    assert head == "collision,pairs" and row == f"{int(hit)},{len(pairs)}" and hit
    data = json.loads((workspace / "comp.json").read_text())
    assert data["instances"][1]["translation"] == [0.25, 0, 0]
