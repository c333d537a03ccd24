"""Learned signed-distance and appearance field over a voxel grid."""
from __future__ import annotations

import contextlib
import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .voxgrid import VoxelGrid, _read_exact

_ftz_depth = 0


@contextlib.contextmanager
def flush_denormals():
    """Flush subnormals to zero for the duration (process-wide CPU state).

    softplus(beta=100) tails underflow into subnormals, which makes training
    about 10x slower on CPU.
    """
    global _ftz_depth
    np.finfo(np.float32), np.finfo(np.float64)  # cache limits before FTZ makes numpy warn
    if _ftz_depth == 0:
        torch.set_flush_denormal(True)
    _ftz_depth += 1
    try:
        yield
    finally:
        _ftz_depth -= 1
        if _ftz_depth == 0:
            torch.set_flush_denormal(False)

FIELD_MAGIC = b"VXSF"
FIELD_VERSION = 1


def positional_encode(v: torch.Tensor, n_freq: int) -> torch.Tensor:
    """``[v, sin(2^k pi v), cos(2^k pi v)]`` for k < n_freq, grouped by frequency."""
    if n_freq < 0:
        raise ValueError("n_freq must be >= 0")
    if n_freq == 0:
        return v
    # one sin over stacked phases (cos x = sin(x + pi/2)); a single cat keeps double backward cheap
    freq = (2.0 ** torch.arange(n_freq, dtype=v.dtype) * math.pi).repeat_interleave(2)
    phase = torch.tensor([0.0, math.pi / 2], dtype=v.dtype).repeat(n_freq)
    x = torch.sin(v[..., None, :] * freq[:, None] + phase[:, None])
    return torch.cat([v, x.flatten(-2)], dim=-1)


def _mlp(dims: Sequence[int], dtype: torch.dtype) -> nn.ModuleList:
    return nn.ModuleList(nn.Linear(a, b, dtype=dtype) for a, b in zip(dims[:-1], dims[1:]))


class FieldModel(nn.Module):
    """Geometry extractor (embedding -> sdf, feature) and appearance extractor.

    ``geo_layers``/``app_layers`` count linear layers; every layer but the last
    has ``hidden`` units.
    """

    def __init__(self, emb_dim: int = 16, feat_dim: int = 128, hidden: int = 128, geo_layers: int = 4,
                 app_layers: int = 4, n_freq_emb: int = 4, n_freq_dir: int = 8, beta: float = 100.0,
                 seed: int = 0, dtype: torch.dtype = torch.float32, init_log_s: float = 0.0):
        super().__init__()
        self.emb_dim, self.feat_dim, self.hidden = emb_dim, feat_dim, hidden
        self.n_freq_emb, self.n_freq_dir, self.beta = n_freq_emb, n_freq_dir, float(beta)
        enc_e = emb_dim * (1 + 2 * n_freq_emb)
        enc_d = 3 * (1 + 2 * n_freq_dir)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.geo = _mlp([enc_e] + [hidden] * (geo_layers - 1) + [1 + feat_dim], dtype)
            self.app = _mlp([feat_dim + enc_d + enc_e] + [hidden] * (app_layers - 1) + [3], dtype)
        self.log_s = nn.Parameter(torch.tensor(float(init_log_s), dtype=dtype))

    @property
    def s(self) -> torch.Tensor:
        return torch.exp(self.log_s)

    def layer_dims(self) -> tuple[list[int], list[int]]:
        g = [self.geo[0].in_features] + [l.out_features for l in self.geo]
        a = [self.app[0].in_features] + [l.out_features for l in self.app]
        return g, a

    def encode_embedding(self, e: torch.Tensor) -> torch.Tensor:
        return positional_encode(e, self.n_freq_emb)

    def geometry(self, e: torch.Tensor, enc: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.encode_embedding(e) if enc is None else enc
        for layer in self.geo[:-1]:
            h = F.softplus(layer(h), beta=self.beta)
        out = self.geo[-1](h)
        return out[..., 0], out[..., 1:]

    def appearance(self, f: torch.Tensor, d: torch.Tensor, e: torch.Tensor,
                   enc: torch.Tensor | None = None) -> torch.Tensor:
        enc = self.encode_embedding(e) if enc is None else enc
        h = torch.cat([f, positional_encode(d.to(f.dtype), self.n_freq_dir), enc], dim=-1)
        for layer in self.app[:-1]:
            h = F.relu(layer(h))
        return torch.sigmoid(self.app[-1](h))

    # field protocol used by prune / render / mesh
    def sdf(self, grid: VoxelGrid, p: torch.Tensor, vid: np.ndarray) -> torch.Tensor:
        return self.geometry(grid.interpolate(p, vid))[0]

    def query(self, grid: VoxelGrid, p: torch.Tensor, vid: np.ndarray, d: torch.Tensor | None = None,
              with_gradient: bool = False, create_graph: bool = False) -> "FieldSample":
        return field_forward(self, grid, p, vid, d, with_gradient=with_gradient, create_graph=create_graph)

    def check_finite(self) -> None:
        for name, prm in self.named_parameters():
            if not torch.isfinite(prm).all():
                raise FloatingPointError(f"non-finite parameter {name}")


@dataclass
class FieldSample:
    """Outputs of one field evaluation; keeps the autograd graph for ``field_backward``."""

    p: torch.Tensor
    vid: np.ndarray
    e: torch.Tensor
    sdf: torch.Tensor
    feature: torch.Tensor
    color: torch.Tensor | None
    gradient: torch.Tensor | None
    model: nn.Module | None = None
    grid: VoxelGrid | None = None
    released: bool = False


def gamma(grid: VoxelGrid, p: torch.Tensor) -> tuple[torch.Tensor, np.ndarray]:
    """Embedding at ``p`` and the containing voxel; rows with vid == -1 are zero (miss)."""
    p = torch.as_tensor(p)
    vid = grid.locate(p.detach().double().numpy().reshape(-1, 3))
    out = torch.zeros(len(vid), grid.emb_dim, dtype=grid.embeddings.dtype)
    hit = vid >= 0
    if hit.any():
        out[torch.as_tensor(hit)] = grid.interpolate(p.reshape(-1, 3)[torch.as_tensor(hit)], vid[hit])
    return out, vid


def geometry_eval(model: FieldModel, e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    model.check_finite()
    if e.shape[-1] != model.emb_dim:
        raise ValueError("embedding length mismatch")
    return model.geometry(e)


def appearance_eval(model: FieldModel, f: torch.Tensor, d: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    n = torch.linalg.norm(d.double(), dim=-1)
    if torch.any(n == 0):
        raise ValueError("zero-length direction")
    if torch.any((n - 1).abs() > 1e-6):
        raise ValueError("direction must be unit length")
    return model.appearance(f, d, e)


def field_forward(model: FieldModel, grid: VoxelGrid, p: torch.Tensor, vid: np.ndarray,
                  d: torch.Tensor | None = None, with_gradient: bool = False,
                  create_graph: bool = False) -> FieldSample:
    """Evaluate sdf, feature, colour (if ``d``) and optionally d(sdf)/dp at points in known voxels."""
    p = torch.as_tensor(p, dtype=grid.embeddings.dtype)
    if with_gradient and not p.requires_grad:
        p = p.detach().requires_grad_(True)
    with torch.enable_grad() if with_gradient else contextlib.nullcontext():
        e = grid.interpolate(p, vid)
        enc = model.encode_embedding(e)
        sdf, feat = model.geometry(e, enc)
        grad = None
        if with_gradient:
            (grad,) = torch.autograd.grad(sdf.sum(), p, create_graph=create_graph, retain_graph=True)
    color = model.appearance(feat, d, e, enc) if d is not None else None
    return FieldSample(p, vid, e, sdf, feat, color, grad, model, grid)


def sdf_gradient(grid: VoxelGrid, model: FieldModel, p: torch.Tensor) -> torch.Tensor:
    """Exact d(sdf)/dp; points must lie inside a voxel (half-open membership)."""
    p = torch.as_tensor(p, dtype=grid.embeddings.dtype).reshape(-1, 3)
    vid = grid.locate(p.detach().double().numpy())
    if np.any(vid < 0):
        raise ValueError("point outside all voxels")
    return field_forward(model, grid, p, vid, with_gradient=True).gradient


def field_backward(sample: FieldSample | None, grad_sdf: torch.Tensor | None = None,
                   grad_color: torch.Tensor | None = None, grad_gradient: torch.Tensor | None = None,
                   ) -> dict[str, torch.Tensor]:
    """Pull upstream loss gradients back to every model parameter and the embedding table.

    The sdf-gradient output must have been built with ``create_graph=True`` to
    receive upstream gradients (second-order path through the network).
    """
    if sample is None or sample.released or sample.model is None:
        raise RuntimeError("missing forward cache")
    outs, ups = [], []
    for out, up in ((sample.sdf, grad_sdf), (sample.color, grad_color), (sample.gradient, grad_gradient)):
        if up is None or out is None:
            continue
        if not out.requires_grad:
            if torch.any(up != 0):
                raise RuntimeError("output was computed without a differentiable graph")
            continue
        outs.append(out)
        ups.append(up.to(out.dtype))
    names = [n for n, _ in sample.model.named_parameters()] + ["embeddings"]
    inputs = list(sample.model.parameters()) + [sample.grid.embeddings]
    if not outs:
        return {n: torch.zeros_like(x) for n, x in zip(names, inputs)}
    grads = torch.autograd.grad(outs, inputs, ups, retain_graph=True, allow_unused=True)
    return {n: torch.zeros_like(x) if g is None else g for n, g, x in zip(names, grads, inputs)}


class AnalyticField:
    """Wraps an exact sdf callable so it can stand in for a trained model.

    ``sdf_fn`` maps an (N, 3) float64 array to (N,) distances; ``color_fn``
    (optional) maps positions to RGB.
    """

    def __init__(self, sdf_fn, color_fn=None, log_s: float = math.log(200.0)):
        self.sdf_fn = sdf_fn
        self.color_fn = color_fn
        self.log_s = torch.tensor(log_s, dtype=torch.float64)

    @property
    def s(self) -> torch.Tensor:
        return torch.exp(self.log_s)

    def sdf(self, grid: VoxelGrid, p: torch.Tensor, vid: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(self.sdf_fn(p.detach().double().numpy().reshape(-1, 3)))

    def query(self, grid: VoxelGrid, p: torch.Tensor, vid: np.ndarray, d: torch.Tensor | None = None,
              with_gradient: bool = False, create_graph: bool = False) -> FieldSample:
        pts = p.detach().double().numpy().reshape(-1, 3)
        sdf = torch.as_tensor(self.sdf_fn(pts))
        color = None
        if d is not None:
            color = (torch.as_tensor(self.color_fn(pts)) if self.color_fn is not None
                     else torch.full((len(pts), 3), 0.5, dtype=torch.float64))
        grad = None
        if with_gradient:
            h = 1e-6
            eye = np.eye(3) * h
            grad = torch.as_tensor(np.stack([(self.sdf_fn(pts + eye[i]) - self.sdf_fn(pts - eye[i])) / (2 * h)
                                             for i in range(3)], -1))
        z = torch.zeros(len(pts), 0, dtype=torch.float64)
        return FieldSample(torch.as_tensor(pts), vid, z, sdf, z, color, grad)

    def parameters(self):
        return iter(())


# -- serialization -------------------------------------------------------------------------

def write_field(f: BinaryIO, model: FieldModel) -> None:
    """``VXSF`` section: header, layer dims, float32 weights (row-major) then biases per layer, log_s."""
    gdims, adims = model.layer_dims()
    f.write(FIELD_MAGIC)
    f.write(struct.pack("<IIIIIf", FIELD_VERSION, model.emb_dim, model.feat_dim, model.n_freq_emb,
                        model.n_freq_dir, model.beta))
    for dims in (gdims, adims):
        f.write(struct.pack("<I", len(dims)))
        f.write(np.asarray(dims, dtype="<u4").tobytes())
    for layer in list(model.geo) + list(model.app):
        f.write(layer.weight.detach().float().numpy().astype("<f4").tobytes())
        f.write(layer.bias.detach().float().numpy().astype("<f4").tobytes())
    f.write(struct.pack("<f", float(model.log_s.detach())))


def read_field(f: BinaryIO, dtype: torch.dtype = torch.float32) -> FieldModel:
    if _read_exact(f, 4) != FIELD_MAGIC:
        raise ValueError("bad field magic")
    version, emb_dim, feat_dim, nfe, nfd, beta = struct.unpack("<IIIIIf", _read_exact(f, 24))
    if version != FIELD_VERSION:
        raise ValueError(f"unsupported field version {version}")
    dims = []
    for _ in range(2):
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        dims.append(np.frombuffer(_read_exact(f, 4 * n), dtype="<u4").astype(int).tolist())
    gdims, adims = dims
    hidden = gdims[1] if len(gdims) > 2 else (adims[1] if len(adims) > 2 else 1)
    model = FieldModel(emb_dim, feat_dim, hidden, len(gdims) - 1, len(adims) - 1, nfe, nfd, beta, dtype=dtype)
    if model.layer_dims() != (gdims, adims):
        raise ValueError("unsupported layer layout")
    with torch.no_grad():
        for layer in list(model.geo) + list(model.app):
            for prm in (layer.weight, layer.bias):
                n = prm.numel()
                prm.copy_(torch.from_numpy(np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").copy())
                          .reshape(prm.shape).to(dtype))
        (log_s,) = struct.unpack("<f", _read_exact(f, 4))
        model.log_s.fill_(log_s)
    return model
