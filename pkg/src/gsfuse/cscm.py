"""Cross-structure features for anchors.

Each level pairs a tri-plane (global context, sampled bilinearly) with a
context grid (local context, trilinear blend of the features of the anchors
bound to the enclosing cell's vertices). Per level the two decoded features
are concatenated; levels are summed. Level 1 planes additionally go through
a channel + spatial attention block across all three planes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.spatial import cKDTree

from .errors import ConfigurationError
from .scene import PLANES, SceneBounds, project_to_plane


@dataclass
class CSCMConfig:
    plane_res: int = 32
    channels: int = 8
    hde_dim: int = 32
    levels: int = 3
    grid_res: int = 8
    hidden: int = 32
    feature_dim: int = 16
    attention: bool = True
    attn_kernel: int = 7


class TriplaneAttention(nn.Module):
    """Channel attention then spatial attention over the three planes
    concatenated along channels (xy, xz, yz order)."""

    def __init__(self, channels, kernel=7, reduction=4):
        super().__init__()
        c = 3 * channels
        hidden = max(c // reduction, 4)
        self.mlp = nn.Sequential(nn.Linear(c, hidden, bias=False), nn.ReLU(), nn.Linear(hidden, c, bias=False))
        self.conv = nn.Conv2d(2, 1, kernel, bias=False)
        self.pad = kernel // 2

    def gates(self, planes):
        """Channel gate (3m,) and spatial gate (h, w) for planes of shape (3, m, h, w)."""
        _, m, h, w = planes.shape
        x = planes.reshape(1, 3 * m, h, w)
        ca = torch.sigmoid(self.mlp(x.mean((2, 3))) + self.mlp(x.amax((2, 3))))
        x1 = x * ca[:, :, None, None]
        s = torch.cat([x1.mean(1, keepdim=True), x1.amax(1, keepdim=True)], 1)
        s = F.pad(s, (self.pad,) * 4, mode="reflect")
        sa = torch.sigmoid(self.conv(s))
        return ca.reshape(3 * m), sa.reshape(h, w)

    def forward(self, planes):
        _, m, h, w = planes.shape
        ca, sa = self.gates(planes)
        out = planes.reshape(3 * m, h, w) * ca[:, None, None] * sa
        return out.reshape(3, m, h, w)


def triplane_attention(planes, attention: TriplaneAttention):
    if planes.dim() != 4 or planes.shape[0] != 3:
        raise ConfigurationError(f"expected planes of shape (3, m, h, w), got {tuple(planes.shape)}")
    return attention(planes)


def bilinear(plane, uv):
    """Sample a (m, h, w) map at normalized coords uv in [0, 1]^2 (u along w).

    Texel centers sit at i / (w - 1), so u = 0 and u = 1 hit the border texels.
    """
    m, h, w = plane.shape
    if h < 2 or w < 2:
        raise ConfigurationError("plane resolution must be at least 2x2")
    x = uv[:, 0] * (w - 1)
    y = uv[:, 1] * (h - 1)
    x0 = x.floor().clamp(0, w - 2)
    y0 = y.floor().clamp(0, h - 2)
    fx = (x - x0).unsqueeze(0)
    fy = (y - y0).unsqueeze(0)
    x0, y0 = x0.long(), y0.long()
    flat = plane.reshape(m, h * w)
    i00 = y0 * w + x0
    v00, v01 = flat[:, i00], flat[:, i00 + 1]
    v10, v11 = flat[:, i00 + w], flat[:, i00 + w + 1]
    out = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    return out.T  # (N, m)


def sample_triplane(p, planes, attn_planes, bounds: SceneBounds):
    """Concatenated [base, attention] samples for xy, xz, yz: (N, 6m)."""
    feats = []
    for i, name in enumerate(PLANES):
        uv = project_to_plane(p, name, bounds)
        feats.append(bilinear(planes[i], uv))
        feats.append(bilinear(attn_planes[i], uv))
    return torch.cat(feats, dim=-1)


class ContextGrid:
    """Vertex lattice over the anchor cloud; each vertex adopts the nearest
    anchor within one cell diagonal (or none)."""

    def __init__(self, positions, bounds: SceneBounds, resolution):
        self.resolution = int(resolution)
        self.bounds = bounds
        lo, hi = bounds.aabb_min, bounds.aabb_max
        self.cell = (hi - lo) / self.resolution
        r = self.resolution + 1
        ax = [lo[d] + self.cell[d] * np.arange(r) for d in range(3)]
        verts = np.stack(np.meshgrid(*ax, indexing="ij"), -1).reshape(-1, 3)
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(pos):
            dist, idx = cKDTree(pos).query(verts, distance_upper_bound=float(np.linalg.norm(self.cell)) * (1 + 1e-12))
            idx = np.where(np.isfinite(dist), idx, -1)
        else:
            idx = np.full(len(verts), -1)
        self.vertex_anchor = torch.as_tensor(idx, dtype=torch.long)

    def cell_of(self, p):
        lo = torch.as_tensor(self.bounds.aabb_min, dtype=p.dtype)
        cell = torch.as_tensor(self.cell, dtype=p.dtype)
        hi = torch.as_tensor(self.bounds.aabb_max, dtype=p.dtype)
        q = torch.minimum(torch.maximum(p, lo), hi)
        t = (q - lo) / cell
        c = t.floor().clamp(0, self.resolution - 1)
        return c.long(), t - c

    def weights(self, p):
        """Vertex indices (N, 8) and trilinear weights (N, 8) of the cell holding p."""
        c, f = self.cell_of(p)
        r = self.resolution + 1
        corners = torch.tensor([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        v = c.unsqueeze(1) + corners  # (N, 8, 3)
        flat = (v[..., 0] * r + v[..., 1]) * r + v[..., 2]
        cf = corners.to(p.dtype)
        w = torch.prod(1 - (f.unsqueeze(1) - cf).abs(), dim=-1)
        return flat, w

    def lookup(self, p):
        """Per-query anchor ids (-1 = empty vertex) and raw weights."""
        flat, w = self.weights(p)
        return self.vertex_anchor[flat], w


def aggregate_context(fg, anchor_ids, w):
    """Normalized weighted mean of vertex features; all-empty rows give zeros.

    Returns the aggregate (N, Dg) and a mask of rows with any bound vertex.
    """
    present = anchor_ids >= 0
    we = w * present
    total = we.sum(-1, keepdim=True)
    gathered = fg[anchor_ids.clamp_min(0)]  # (N, 8, Dg)
    agg = (we.unsqueeze(-1) * gathered).sum(1)
    has = total.squeeze(-1) > 0
    agg = torch.where(has.unsqueeze(-1), agg / torch.where(total > 0, total, torch.ones_like(total)), torch.zeros_like(agg))
    return agg, has


def _mlp(n_in, hidden, n_out, zero_out=False, batchnorm=False):
    layers = [nn.Linear(n_in, hidden)]
    if batchnorm:
        layers.append(nn.BatchNorm1d(hidden))
    layers += [nn.ReLU(), nn.Linear(hidden, n_out)]
    net = nn.Sequential(*layers)
    if zero_out:
        nn.init.zeros_(net[-1].weight)
        nn.init.zeros_(net[-1].bias)
    return net


class Level(nn.Module):
    def __init__(self, index, cfg: CSCMConfig, fg_dim, positions, bounds, attention=None):
        super().__init__()
        self.index = index
        scale = 2 ** (index - 1)
        res = cfg.plane_res * scale
        m = cfg.channels
        if index == 1:
            planes = torch.empty(3, m, res, res).uniform_(-1e-4, 1e-4)
        else:
            planes = torch.zeros(3, m, res, res)
        self.planes = nn.Parameter(planes)
        self.attention = attention
        half = cfg.hde_dim // 2
        self.phi_t = _mlp(6 * m, cfg.hidden, half, zero_out=index > 1)
        self.phi_c = _mlp(fg_dim, cfg.hidden, cfg.hde_dim - half, zero_out=index > 1, batchnorm=True)
        self.grid_res = cfg.grid_res * scale
        self.rebuild(positions, bounds)

    def rebuild(self, positions, bounds):
        self.bounds = bounds
        self.grid = ContextGrid(positions, bounds, self.grid_res)

    def attention_planes(self):
        # levels without attention reuse the base map in the attention slot
        if self.attention is None:
            return self.planes
        return triplane_attention(self.planes, self.attention)

    def triplane_feature(self, p):
        return self.phi_t(sample_triplane(p, self.planes, self.attention_planes(), self.bounds))

    def context_feature(self, p, fg):
        ids, w = self.grid.lookup(p)
        agg, has = aggregate_context(fg, ids, w)
        out = agg.new_zeros(agg.shape[0], self.phi_c[-1].out_features)
        if has.any():
            if has.all():
                out = self.phi_c(agg)
            else:
                out = out.index_put((has.nonzero().squeeze(-1),), self.phi_c(agg[has]))
        return out

    def forward(self, p, fg):
        return torch.cat([self.triplane_feature(p), self.context_feature(p, fg)], dim=-1)


class CSCM(nn.Module):
    """Hierarchical feature module; levels are built on activation."""

    def __init__(self, cfg: CSCMConfig, positions, bounds: SceneBounds, seed=0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.fg_dim = cfg.feature_dim + 9
        self.bounds = bounds.expanded(0.05)
        self.levels = nn.ModuleList()
        self.activate(1, positions)

    @property
    def active(self):
        return tuple(lv.index for lv in self.levels)

    def activate(self, index, positions):
        if index in self.active:
            return False
        if index > self.cfg.levels or index != len(self.levels) + 1:
            raise ConfigurationError(f"cannot activate level {index} with levels {self.active}")
        with torch.random.fork_rng():
            torch.manual_seed(self.seed * 1000 + index)
            attn = TriplaneAttention(self.cfg.channels, self.cfg.attn_kernel) if index == 1 and self.cfg.attention else None
            lv = Level(index, self.cfg, self.fg_dim, positions, self.bounds, attn)
        ref = next(self.parameters(), None)
        if ref is not None:
            lv.to(ref.dtype)
        self.levels.append(lv)
        return True

    def rebuild(self, positions):
        for lv in self.levels:
            lv.rebuild(positions, self.bounds)

    @staticmethod
    def vertex_features(features, positions_norm, offsets, log_offset_scales):
        """Per-anchor context feature [f_p, position, mean offset, mean log-scale]."""
        return torch.cat([features, positions_norm, offsets.mean(1), log_offset_scales.mean(1)], dim=-1)

    def compose(self, p, fg, levels=None):
        """Sum over active (or the given) levels of [f_t, f_c]."""
        use = self.active if levels is None else levels
        out = None
        for lv in self.levels:
            if lv.index in use:
                f = lv(p, fg)
                out = f if out is None else out + f
        return out
