"""Reference forward pass and central finite differences for the shrunken-model gradient checks.

Written independently of ``voxsdf.field``: plain functional ops on a flat
parameter vector, so the library's double-backward path can be compared
against differences of a first-order computation.
"""
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch.func import grad, vmap

from voxsdf.field import FieldModel, field_backward, field_forward
from voxsdf.voxgrid import CORNER_OFFSETS, VoxelGrid


def pe(v, n):
    parts = [v]
    for k in range(n):
        parts += [torch.sin(2 ** k * math.pi * v), torch.cos(2 ** k * math.pi * v)]
    return torch.cat(parts, -1)


def layout(model: FieldModel, grid: VoxelGrid):
    shapes = [(n, p.shape) for n, p in model.named_parameters()] + [("embeddings", grid.embeddings.shape)]
    return shapes


def flatten(model, grid):
    return torch.cat([p.detach().reshape(-1) for _, p in model.named_parameters()]
                     + [grid.embeddings.detach().reshape(-1)])


def unflatten(theta, shapes):
    out, i = {}, 0
    for n, s in shapes:
        k = int(np.prod(s)) if len(s) else 1
        out[n] = theta[i:i + k].reshape(s)
        i += k
    return out


def ref_sdf_feat(P, model, grid, p, vid):
    lo = torch.as_tensor(grid.voxel_min(vid), dtype=p.dtype)
    x = (p - lo) / grid.voxel_size
    off = torch.as_tensor(CORNER_OFFSETS, dtype=p.dtype)
    w = torch.prod(off * x[:, None] + (1 - off) * (1 - x[:, None]), -1)
    e = torch.einsum("nk,nkd->nd", w, P["embeddings"][torch.as_tensor(grid.corners[vid])])
    enc = pe(e, model.n_freq_emb)
    h = enc
    n_geo = len(model.geo)
    for i in range(n_geo):
        h = F.linear(h, P[f"geo.{i}.weight"], P[f"geo.{i}.bias"])
        if i < n_geo - 1:
            h = F.softplus(h, beta=model.beta)
    return h[:, 0], h[:, 1:], enc


def ref_color(P, model, feat, d, enc):
    h = torch.cat([feat, pe(d, model.n_freq_dir), enc], -1)
    n_app = len(model.app)
    for i in range(n_app):
        h = F.linear(h, P[f"app.{i}.weight"], P[f"app.{i}.bias"])
        if i < n_app - 1:
            h = F.relu(h)
    return torch.sigmoid(h)


def ref_loss(theta, shapes, model, grid, p, vid, d, a, b):
    P = unflatten(theta, shapes)

    def sdf_sum(q):
        return ref_sdf_feat(P, model, grid, q, vid)[0].sum()

    sdf, feat, enc = ref_sdf_feat(P, model, grid, p, vid)
    g = grad(sdf_sum)(p)
    color = ref_color(P, model, feat, d, enc)
    eik = ((torch.linalg.norm(g, dim=-1) - 1) ** 2).sum()
    return (a * sdf).sum() + (b * color).sum() + eik


def central(f, x, h, richardson=False):
    """Central differences of ``f`` along each row of the identity; Richardson removes the h^2 term."""
    eye = torch.eye(len(x), dtype=x.dtype)
    d = lambda s: (f(x + s * eye) - f(x - s * eye)) / (2 * s)
    return (4 * d(h / 2) - d(h)) / 3 if richardson else d(h)


def fd_param_grad(model, grid, p, vid, d, a, b, h=1e-5, richardson=False):
    shapes = layout(model, grid)
    theta = flatten(model, grid)
    f = vmap(lambda t: ref_loss(t, shapes, model, grid, p, vid, d, a, b))
    return central(f, theta, h, richardson), shapes


def library_param_grad(model, grid, p, vid, d, a, b):
    s = field_forward(model, grid, p, vid, d, with_gradient=True, create_graph=True)
    n = torch.linalg.norm(s.gradient, dim=-1, keepdim=True)
    up_grad = 2 * (n - 1) * s.gradient / n
    g = field_backward(s, grad_sdf=a, grad_color=b, grad_gradient=up_grad.detach())
    return g


def random_instance(seed, emb_dim=4, hidden=8, layers=2, n_points=3):
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    coords = np.array([[0, 0, 0], [1, 0, 0]])
    verts = np.unique((coords[:, None] + CORNER_OFFSETS[None]).reshape(-1, 3), axis=0)
    emb = torch.randn(len(verts), emb_dim, generator=gen, dtype=torch.float64) * 0.3
    grid = VoxelGrid(np.zeros(3), 0.5, 0, coords, verts, emb)
    model = FieldModel(emb_dim, hidden, hidden, layers, layers, seed=seed, dtype=torch.float64)
    vid = rng.integers(0, 2, n_points)
    p = torch.as_tensor(grid.voxel_min(vid) + rng.uniform(0.05, 0.95, (n_points, 3)) * grid.voxel_size)
    d = torch.as_tensor(rng.normal(size=(n_points, 3)))
    d = d / torch.linalg.norm(d, dim=-1, keepdim=True)
    a = torch.as_tensor(rng.normal(size=n_points))
    b = torch.as_tensor(rng.normal(size=(n_points, 3)))
    return model, grid, p, vid, d, a, b


def close(lib, fd, rtol=1e-3, atol=1e-8):
    err = (lib - fd).abs()
    return bool(torch.all(err <= rtol * torch.maximum(lib.abs(), fd.abs()) + atol)), float(
        (err / (fd.abs() + atol)).max())
