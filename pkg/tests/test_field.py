import io
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from voxsdf.field import (
    AnalyticField, FieldModel, appearance_eval, field_backward, field_forward, gamma, geometry_eval,
    positional_encode, read_field, sdf_gradient, write_field,
)
from voxsdf.voxgrid import CORNER_OFFSETS, VoxelGrid, init_grid

import fd_oracle


@pytest.mark.parametrize("dim, n, out", [(16, 4, 144), (3, 0, 3), (3, 8, 51), (4, 4, 36)])
def test_pe_dims(dim, n, out):
    assert positional_encode(torch.rand(7, dim), n).shape == (7, out)


def test_pe_zero_and_identity():
    z = positional_encode(torch.zeros(1, 2), 3)[0]
    assert torch.equal(z, torch.tensor([0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1.0]))
    v = torch.rand(4, 3)
    assert torch.equal(positional_encode(v, 0), v)
    with pytest.raises(ValueError):
        positional_encode(v, -1)


@given(st.integers(0, 6), st.integers(1, 5))
def test_pe_matches_direct_formula(n, dim):
    v = torch.rand(5, dim, dtype=torch.float64) * 4 - 2
    ref = torch.cat([v] + [f(2 ** k * math.pi * v) for k in range(n) for f in (torch.sin, torch.cos)], -1)
    assert torch.allclose(positional_encode(v, n), ref, atol=1e-12)


def unit_grid(emb):
    return VoxelGrid(np.zeros(3), 1.0, 0, np.zeros((1, 3), int), CORNER_OFFSETS.copy(), emb)


def test_gamma_examples():
    v = torch.tensor([0.3, -1.0, 2.0], dtype=torch.float64)
    g = unit_grid(v.repeat(8, 1))
    e, vid = gamma(g, torch.rand(20, 3, dtype=torch.float64))
    assert np.all(vid == 0) and torch.allclose(e, v.expand(20, 3), atol=1e-15)
    emb = torch.randn(8, 5, dtype=torch.float64)
    g = unit_grid(emb)
    for k, off in enumerate(CORNER_OFFSETS):
        p = torch.as_tensor(off * (1 - 1e-15), dtype=torch.float64)[None]
        e, _ = gamma(g, p)
        assert torch.allclose(e[0], g.embeddings[g.corners[0, k]], atol=1e-12)
    e, _ = gamma(g, torch.full((1, 3), 0.5, dtype=torch.float64))
    assert torch.allclose(e[0], emb.mean(0), atol=1e-15)
    e, vid = gamma(g, torch.tensor([[2.0, 0.5, 0.5]], dtype=torch.float64))
    assert vid[0] == -1 and torch.all(e == 0)


def test_gamma_continuous_across_faces():
    g = init_grid(((0, 0, 0), (2, 1, 1)), 1.0, emb_dim=6, seed=3, dtype=torch.float64)
    with torch.no_grad():
        g.embeddings.normal_()
    m = FieldModel(6, 8, 16, 3, 2, seed=1, dtype=torch.float64)
    yz = torch.rand(200, 2, dtype=torch.float64)
    p = torch.cat([torch.ones(200, 1, dtype=torch.float64), yz], 1)
    left = g.find_voxels(np.array([[0, 0, 0]]))[0]
    right = g.find_voxels(np.array([[1, 0, 0]]))[0]
    with torch.no_grad():
        el = g.interpolate(p, np.full(200, left))
        er = g.interpolate(p, np.full(200, right))
        assert (el - er).abs().max() < 1e-12
        assert (m.sdf(g, p, np.full(200, left)) - m.sdf(g, p, np.full(200, right))).abs().max() < 1e-6
    # half-open membership picks the upper voxel on the shared face
    assert np.all(g.locate(p.numpy()) == right)


def test_geometry_eval_fresh_and_deterministic():
    m = FieldModel(seed=0)
    sdf, f = geometry_eval(m, torch.zeros(1, 16))
    assert torch.isfinite(sdf).all() and abs(float(sdf.detach())) < 1 and f.shape == (1, 128)
    e = torch.randn(3, 16)
    a = geometry_eval(m, e)
    b = geometry_eval(m, e.clone())
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    with torch.no_grad():
        m.geo[0].weight[0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        geometry_eval(m, e)


def test_model_layer_sizes():
    m = FieldModel()
    g, a = m.layer_dims()
    assert g == [144, 128, 128, 128, 129]
    assert a == [128 + 51 + 144, 128, 128, 128, 3]
    assert float(m.s.detach()) == 1.0


def test_appearance_bounds_and_errors():
    m = FieldModel(4, 8, 16, 2, 3, seed=2)
    f = torch.randn(1000, 8) * 10
    d = torch.nn.functional.normalize(torch.randn(1000, 3), dim=-1)
    e = torch.randn(1000, 4) * 10
    c = appearance_eval(m, f, d, e)
    assert c.shape == (1000, 3) and c.min() >= 0 and c.max() <= 1
    assert torch.equal(c, appearance_eval(m, f, d, e))
    with pytest.raises(ValueError):
        appearance_eval(m, f[:1], torch.zeros(1, 3), e[:1])
    with pytest.raises(ValueError):
        appearance_eval(m, f[:1], torch.tensor([[2.0, 0, 0]]), e[:1])
    d2 = torch.nn.functional.normalize(torch.randn(1000, 3), dim=-1)
    assert not torch.equal(c, appearance_eval(m, f, d2, e))


def test_sdf_gradient_constant_embedding_is_zero():
    g = unit_grid(torch.ones(8, 4, dtype=torch.float64))
    m = FieldModel(4, 8, 8, 2, 2, dtype=torch.float64)
    grad = sdf_gradient(g, m, torch.rand(10, 3, dtype=torch.float64))
    assert torch.all(grad.abs() < 1e-12)


def test_sdf_gradient_matches_fd():
    model, grid, *_ = fd_oracle.random_instance(0, emb_dim=6, hidden=16, layers=3, n_points=1)
    rng = np.random.default_rng(1)
    vid = rng.integers(0, grid.num_voxels, 100)
    p = torch.as_tensor(grid.voxel_min(vid) + rng.uniform(0.05, 0.95, (100, 3)) * grid.voxel_size)
    g = sdf_gradient(grid, model, p)
    h = 1e-4 * grid.voxel_size
    fd = torch.zeros_like(g)
    with torch.no_grad():
        for k in range(3):
            dp = torch.zeros(3, dtype=torch.float64)
            dp[k] = h
            fd[:, k] = (model.sdf(grid, p + dp, vid) - model.sdf(grid, p - dp, vid)) / (2 * h)
    ok, worst = fd_oracle.close(g, fd)
    assert ok, worst


def test_sdf_gradient_outside_raises():
    g = unit_grid(torch.rand(8, 4, dtype=torch.float64))
    m = FieldModel(4, 8, 8, 2, 2, dtype=torch.float64)
    with pytest.raises(ValueError):
        sdf_gradient(g, m, torch.tensor([[1.5, 0.5, 0.5]], dtype=torch.float64))


def test_field_backward_zero_upstream():
    model, grid, p, vid, d, a, b = fd_oracle.random_instance(1)
    s = field_forward(model, grid, p, vid, d, with_gradient=True, create_graph=True)
    g = field_backward(s, torch.zeros_like(a), torch.zeros_like(b), torch.zeros(len(a), 3, dtype=torch.float64))
    assert all(torch.all(v == 0) for v in g.values())


def test_field_backward_support_is_voxel_corners():
    model, grid, p, vid, d, a, b = fd_oracle.random_instance(2, n_points=1)
    s = field_forward(model, grid, p, vid)
    g = field_backward(s, grad_sdf=torch.ones(1, dtype=torch.float64))["embeddings"]
    nz = set(np.nonzero(g.abs().sum(1).numpy())[0])
    assert nz == set(grid.corners[vid[0]])


def test_field_backward_missing_cache():
    with pytest.raises(RuntimeError, match="missing forward cache"):
        field_backward(None, torch.ones(1))


def test_field_backward_matches_fd_toy_batch():
    model, grid, p, vid, d, a, b = fd_oracle.random_instance(3)
    lib = fd_oracle.library_param_grad(model, grid, p, vid, d, a, b)
    fd, shapes = fd_oracle.fd_param_grad(model, grid, p, vid, d, a, b)
    flat = torch.cat([lib[n].reshape(-1) for n, _ in shapes])
    ok, worst = fd_oracle.close(flat, fd)
    assert ok, worst


def test_analytic_field_protocol(sphere_field):
    g = init_grid(((-1, -1, -1), (1, 1, 1)), 0.5, emb_dim=1)
    p = torch.tensor([[1.0, 0, 0], [0, 0, 0]], dtype=torch.float64)
    q = sphere_field.query(g, p, g.locate(p.numpy()), with_gradient=True)
    assert np.allclose(q.sdf.numpy(), [0.5, -0.5])
    assert np.allclose(q.gradient[0].numpy(), [1, 0, 0], atol=1e-6)


def test_field_roundtrip_bit_exact():
    m = FieldModel(4, 8, 16, 3, 2, seed=5, init_log_s=1.25)
    buf = io.BytesIO()
    write_field(buf, m)
    raw = buf.getvalue()
    assert raw[:4] == b"VXSF"
    m2 = read_field(io.BytesIO(raw))
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)
    buf2 = io.BytesIO()
    write_field(buf2, m2)
    assert buf2.getvalue() == raw
    with pytest.raises(ValueError):
        read_field(io.BytesIO(b"XXXX" + raw[4:]))
