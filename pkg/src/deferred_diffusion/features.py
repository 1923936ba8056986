"""Learnable surface features rigged through canonical coordinates.

Three axis-aligned planes are indexed by the spatial canonical coordinate and
an ambient map by the two ambient coordinates; all lookups are bilinear with
grid nodes at the bounds.  Plane features are concatenated, not summed.

Control-signal channel layout (``feature_mode="triplane"``)::

    [plane-XY F | plane-XZ F | plane-YZ F | ambient F | canonical 5 | depth 1 | normals 3]

``"spherical"`` replaces the three planes with one F-channel map indexed by
the spherical angles of the canonical point; ``"none"`` keeps only the
geometry channels.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .raster import GBuffer

PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ
GEOMETRY_CHANNELS = 5 + 1 + 3
FEATURE_MODES = ("triplane", "spherical", "none")


def control_channels(num_features: int, mode: str = "triplane") -> int:
    if mode == "triplane":
        return 4 * num_features + GEOMETRY_CHANNELS
    if mode == "spherical":
        return 2 * num_features + GEOMETRY_CHANNELS
    if mode == "none":
        return GEOMETRY_CHANNELS
    raise ValueError(f"unknown feature mode {mode!r}")


def bilinear_weights(uv: torch.Tensor, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Flat corner indices and weights (N, 4) for normalized coords ``uv`` in [0, 1]^2.

    ``uv[:, 0]`` selects the row, ``uv[:, 1]`` the column; node ``k`` sits at
    ``k / (size - 1)``.
    """
    g = uv * (size - 1)
    i0 = torch.floor(g).clamp(0, size - 1)
    f = g - i0
    i0 = i0.long()
    i1 = (i0 + 1).clamp(max=size - 1)
    r0, c0 = i0[:, 0], i0[:, 1]
    r1, c1 = i1[:, 0], i1[:, 1]
    fr, fc = f[:, 0], f[:, 1]
    idx = torch.stack([r0 * size + c0, r0 * size + c1, r1 * size + c0, r1 * size + c1], dim=1)
    w = torch.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], dim=1)
    return idx, w


def gather_bilinear(grid: torch.Tensor, idx: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Weighted sum of four flat grid rows: grid (S*S, F) -> (N, F)."""
    return (grid[idx] * w[..., None]).sum(dim=1)


def scatter_bilinear(upstream: torch.Tensor, idx: torch.Tensor, w: torch.Tensor, num_nodes: int) -> torch.Tensor:
    """Adjoint of :func:`gather_bilinear`: scatter-add ``w * upstream`` into the corner nodes."""
    out = upstream.new_zeros((num_nodes, upstream.shape[-1]))
    out.index_add_(0, idx.reshape(-1), (w[..., None] * upstream[:, None, :]).reshape(-1, upstream.shape[-1]))
    return out


class _GridLookup(torch.autograd.Function):
    """Bilinear gather whose backward is the explicit scatter-add."""

    @staticmethod
    def forward(ctx, grid, idx, w):
        ctx.save_for_backward(idx, w)
        ctx.num_nodes = grid.shape[0]
        return gather_bilinear(grid, idx, w)

    @staticmethod
    def backward(ctx, grad_out):
        idx, w = ctx.saved_tensors
        return scatter_bilinear(grad_out, idx, w, ctx.num_nodes), None, None


class FeatureAtlas(nn.Module):
    """Triplane (or spherical map) plus ambient map of F-channel features."""

    def __init__(self, bounds_lo, bounds_hi, grid_size: int = 128, ambient_size: int | None = None,
                 num_features: int = 16, mode: str = "triplane", init_std: float = 0.01,
                 generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        if mode not in FEATURE_MODES:
            raise ValueError(f"unknown feature mode {mode!r}")
        self.mode = mode
        self.grid_size = int(grid_size)
        self.ambient_size = int(ambient_size or grid_size)
        self.num_features = int(num_features)
        n_planes = {"triplane": 3, "spherical": 1, "none": 0}[mode]
        G, Ga, F = self.grid_size, self.ambient_size, self.num_features
        planes = torch.randn((n_planes, G, G, F), generator=generator, dtype=dtype) * init_std
        amb = torch.randn((Ga, Ga, F) if n_planes else (0, 0, F), generator=generator, dtype=dtype) * init_std
        self.planes = nn.Parameter(planes)
        self.ambient = nn.Parameter(amb)
        self.register_buffer("bounds_lo", torch.as_tensor(np.asarray(bounds_lo, dtype=np.float64), dtype=dtype))
        self.register_buffer("bounds_hi", torch.as_tensor(np.asarray(bounds_hi, dtype=np.float64), dtype=dtype))
        self.register_buffer("ambient_lo", torch.full((2,), -1.0, dtype=dtype))
        self.register_buffer("ambient_hi", torch.full((2,), 1.0, dtype=dtype))
        self.out_of_bounds = 0

    @classmethod
    def for_mesh(cls, canonical: np.ndarray, dilation: float = 0.1, **kwargs) -> "FeatureAtlas":
        """Bounds = AABB of the canonical spatial coordinates, dilated by ``dilation`` per side."""
        xyz = np.asarray(canonical)[:, :3]
        lo, hi = xyz.min(0), xyz.max(0)
        pad = dilation * (hi - lo)
        return cls(lo - pad, hi + pad, **kwargs)

    @property
    def feature_channels(self) -> int:
        return {"triplane": 4, "spherical": 2, "none": 0}[self.mode] * self.num_features

    @property
    def control_channels(self) -> int:
        return control_channels(self.num_features, self.mode)

    def _normalized(self, values, lo, hi):
        u = (values - lo) / (hi - lo)
        bad = (u < 0) | (u > 1)
        self.out_of_bounds += int(bad.any(dim=-1).sum())
        return u.clamp(0.0, 1.0)

    def query_weights(self, canonical: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """(indices, weights) per feature grid for points (N, 5), planes first, ambient last."""
        can = canonical.to(self.planes.dtype)
        out = []
        if self.mode == "triplane":
            u = self._normalized(can[:, :3], self.bounds_lo, self.bounds_hi)
            for a, b in PLANE_AXES:
                out.append(bilinear_weights(u[:, [a, b]], self.grid_size))
        elif self.mode == "spherical":
            center = 0.5 * (self.bounds_lo + self.bounds_hi)
            d = can[:, :3] - center
            r = d.norm(dim=1).clamp_min(1e-9)
            polar = torch.acos((d[:, 1] / r).clamp(-1, 1)) / math.pi
            azim = torch.atan2(d[:, 0], d[:, 2]) / (2 * math.pi) + 0.5
            out.append(bilinear_weights(torch.stack([polar, azim], 1), self.grid_size))
        if self.mode != "none":
            ua = self._normalized(can[:, 3:5], self.ambient_lo, self.ambient_hi)
            out.append(bilinear_weights(ua, self.ambient_size))
        return out

    def grids(self) -> list[torch.Tensor]:
        F = self.num_features
        flat = [p.reshape(-1, F) for p in self.planes]
        if self.mode != "none":
            flat.append(self.ambient.reshape(-1, F))
        return flat

    def sample(self, canonical: torch.Tensor) -> torch.Tensor:
        """Features (N, feature_channels) for canonical points (N, 5)."""
        if self.mode == "none":
            return canonical.new_zeros((canonical.shape[0], 0))
        parts = [_GridLookup.apply(g, idx, w) for g, (idx, w) in zip(self.grids(), self.query_weights(canonical))]
        return torch.cat(parts, dim=1)

    def forward(self, canonical: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Per-pixel features (..., feature_channels) from canonical (..., 5) and mask (..., 1)."""
        lead = canonical.shape[:-1]
        flat_can = canonical.reshape(-1, 5)
        on = mask.reshape(-1) > 0
        out = flat_can.new_zeros((flat_can.shape[0], self.feature_channels), dtype=self.planes.dtype)
        if self.feature_channels and bool(on.any()):
            out = out.index_put((on.nonzero().squeeze(1),), self.sample(flat_can[on]))
        return out.reshape(*lead, self.feature_channels)


def _to_tensor(x, dtype):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def lookup(atlas: FeatureAtlas, gbuffer: GBuffer):
    """(feat (H, W, planes*F), feat_amb (H, W, F)) as numpy arrays; zero off the mask."""
    dtype = atlas.planes.dtype
    with torch.no_grad():
        f = atlas(_to_tensor(gbuffer.canonical, dtype), _to_tensor(gbuffer.mask, dtype)).numpy()
    F = atlas.num_features
    if atlas.mode == "none":
        H, W = gbuffer.shape
        return f, np.zeros((H, W, 0))
    return f[..., :-F], f[..., -F:]


def atlas_gradients(atlas: FeatureAtlas, gbuffer: GBuffer, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * lookup)`` w.r.t. (planes, ambient).

    Scatter-adds bilinear weights times upstream into the four corner nodes
    of every masked query; linear in ``upstream``.
    """
    dtype = atlas.planes.dtype
    F = atlas.num_features
    on = gbuffer.mask.reshape(-1) > 0
    can = _to_tensor(gbuffer.canonical.reshape(-1, 5)[on], dtype)
    up = _to_tensor(np.asarray(upstream).reshape(-1, atlas.feature_channels)[on], dtype)
    grads = []
    for k, (idx, w) in enumerate(atlas.query_weights(can)):
        num_nodes = atlas.grids()[k].shape[0]
        grads.append(scatter_bilinear(up[:, k * F:(k + 1) * F], idx, w, num_nodes).numpy())
    n_planes = atlas.planes.shape[0]
    G, Ga = atlas.grid_size, atlas.ambient_size
    planes = np.stack([g.reshape(G, G, F) for g in grads[:n_planes]]) if n_planes else np.zeros(atlas.planes.shape)
    amb = grads[n_planes].reshape(Ga, Ga, F) if atlas.mode != "none" else np.zeros(atlas.ambient.shape)
    return planes, amb


def assemble_control(gbuffer: GBuffer, feat, feat_amb) -> np.ndarray:
    """Concatenate features and geometry into the (H, W, C) control signal."""
    H, W = gbuffer.shape
    feat = np.asarray(feat)
    feat_amb = np.asarray(feat_amb)
    if feat.shape[:2] != (H, W) or feat_amb.shape[:2] != (H, W):
        raise ValueError(f"feature maps {feat.shape[:2]}/{feat_amb.shape[:2]} do not match buffer {(H, W)}")
    m = gbuffer.mask
    return np.concatenate([feat * m, feat_amb * m, gbuffer.canonical * m, gbuffer.depth * m, gbuffer.normals * m], axis=-1)


def control_from_stack(atlas: FeatureAtlas | None, gstack: torch.Tensor) -> torch.Tensor:
    """Batched control signal from G-buffer stacks (..., 10) as produced by ``GBuffer.stack``.

    Differentiable w.r.t. the atlas; returns (..., C) in the documented layout.
    """
    normals, depth, can, mask = gstack[..., 0:3], gstack[..., 3:4], gstack[..., 4:9], gstack[..., 9:10]
    geometry = torch.cat([can * mask, depth * mask, normals * mask], dim=-1)
    if atlas is None or atlas.mode == "none":
        return geometry
    return torch.cat([atlas(can, mask) * mask.to(atlas.planes.dtype), geometry.to(atlas.planes.dtype)], dim=-1)
