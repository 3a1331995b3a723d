"""Anchor scaffold: anchors -> cross-structure feature -> decoded neural Gaussians."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .cscm import CSCM, CSCMConfig, _mlp
from .scene import COLOR_DIM, Camera, Gaussians, SceneBounds, spawn_gaussians

# anchor parameters that feed both the rendering path and the context grid
SHARED = ("offsets", "log_offset_scales")


@dataclass
class ModelConfig:
    k: int = 5
    decoder_hidden: int = 32
    init_gaussian_scale: float = 1.0  # per-offset scale relative to anchor spacing
    cscm: CSCMConfig = field(default_factory=CSCMConfig)


@dataclass
class DecodedAttributes:
    opacity_logits: torch.Tensor  # (n, k)
    quats: torch.Tensor  # (n, k, 4)
    log_scales: torch.Tensor  # (n, k, 3), added to the anchor's per-offset base
    colors: torch.Tensor  # (n, k, 3), already in [0, 1]


class AttributeDecoder(nn.Module):
    """Two-layer MLP heads on [anchor position, view direction, f_h]."""

    def __init__(self, hde_dim, k, hidden=32, zero_out=False):
        super().__init__()
        n_in = 3 + 3 + hde_dim
        self.k = k
        self.opacity = _mlp(n_in, hidden, k, zero_out)
        self.cov = _mlp(n_in, hidden, 7 * k, zero_out)
        self.color = _mlp(n_in, hidden, 3 * k, zero_out)
        if not zero_out:
            for head in (self.cov, self.color):
                head[-1].weight.data.mul_(0.1)
                nn.init.zeros_(head[-1].bias)
        ident = torch.zeros(k, 7)
        ident[:, 3] = 1.0
        self.register_buffer("quat_bias", ident.reshape(-1))

    def forward(self, pos_norm, view_dir, f_h):
        x = torch.cat([pos_norm, view_dir, f_h], dim=-1)
        n, k = x.shape[0], self.k
        cov = (self.cov(x) + self.quat_bias.to(x.dtype)).reshape(n, k, 7)
        return DecodedAttributes(
            self.opacity(x).reshape(n, k),
            cov[..., 3:],
            cov[..., :3],
            torch.sigmoid(self.color(x)).reshape(n, k, 3),
        )


def view_directions(positions, cam: Camera):
    """Unit vectors from the camera center to each anchor."""
    c = torch.as_tensor(cam.center, dtype=positions.dtype)
    d = positions - c
    return d / d.norm(dim=-1, keepdim=True)


def decode_attributes(decoder: AttributeDecoder, pos_norm, positions, cam: Camera, f_h):
    return decoder(pos_norm, view_directions(positions, cam), f_h)


@dataclass
class Paths:
    """Parameter aliases used to split gradients into view / structural parts."""

    view: dict
    structural: dict


class ScaffoldModel(nn.Module):
    def __init__(self, positions, bounds: SceneBounds, cfg: ModelConfig | None = None, seed=0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        gen = torch.Generator().manual_seed(seed)
        pos = torch.as_tensor(np.asarray(positions), dtype=dtype).reshape(-1, 3)
        n, k = pos.shape[0], cfg.k
        spacing = _median_spacing(pos)
        self.register_buffer("positions", pos)
        self.register_buffer("alive", torch.ones(n, k, dtype=torch.bool))
        self.offsets = nn.Parameter(torch.randn(n, k, 3, generator=gen, dtype=dtype) * 0.5)
        self.log_scale = nn.Parameter(torch.full((n,), float(np.log(spacing)), dtype=dtype))
        self.features = nn.Parameter(torch.randn(n, cfg.cscm.feature_dim, generator=gen, dtype=dtype) * 0.1)
        self.log_offset_scales = nn.Parameter(
            torch.full((n, k, 3), float(np.log(spacing * cfg.init_gaussian_scale)), dtype=dtype)
        )
        self.bounds = bounds
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.cscm = CSCM(cfg.cscm, pos.numpy().astype(np.float64), bounds, seed=seed)
            self.decoder = AttributeDecoder(cfg.cscm.hde_dim, k, cfg.decoder_hidden)
        self.to(dtype)

    @property
    def n_anchors(self):
        return self.positions.shape[0]

    def pos_norm(self):
        return self.cscm.bounds.normalize(self.positions)

    def anchor_params(self):
        return {
            "offsets": self.offsets,
            "log_scale": self.log_scale,
            "features": self.features,
            "log_offset_scales": self.log_offset_scales,
        }

    def paths(self, split=False):
        """Aliases of the shared anchor parameters; distinct graph nodes when split."""
        view, struct = {}, {}
        for name in SHARED:
            p = getattr(self, name)
            view[name] = p.clone() if split else p
            struct[name] = p.clone() if split else p
        return Paths(view, struct)

    def hde(self, paths: Paths | None = None, levels=None):
        """f_h for every anchor (view independent)."""
        paths = paths or self.paths()
        pn = self.pos_norm()
        fg = self.cscm.vertex_features(self.features, pn, paths.structural["offsets"], paths.structural["log_offset_scales"])
        return self.cscm.compose(self.positions, fg, levels)

    def gaussians(self, cam: Camera, f_h, paths: Paths | None = None):
        """Neural Gaussians for one view, restricted to live (anchor, offset) slots."""
        paths = paths or self.paths()
        attrs = decode_attributes(self.decoder, self.pos_norm(), self.positions, cam, f_h)
        means = spawn_gaussians(self.positions, paths.view["offsets"], self.log_scale)
        log_scales = paths.view["log_offset_scales"] + attrs.log_scales
        n, k = self.alive.shape
        colors = torch.cat([attrs.colors, attrs.colors.new_zeros(n, k, COLOR_DIM - 3)], -1)
        g = Gaussians(
            means.reshape(-1, 3), log_scales.reshape(-1, 3), attrs.quats.reshape(-1, 4),
            attrs.opacity_logits.reshape(-1), colors.reshape(-1, COLOR_DIM),
        )
        mask = self.alive.reshape(-1)
        if not bool(mask.all()):
            g = g.subset(mask)
        return g

    def spawned_means(self):
        with torch.no_grad():
            return spawn_gaussians(self.positions, self.offsets, self.log_scale)

    def activate_level(self, index):
        return self.cscm.activate(index, self.positions.double().numpy())

    def kill(self, dead):
        """Mark (anchor, offset) slots dead; returns the indices of anchors to drop."""
        self.alive &= ~dead
        return torch.nonzero(~self.alive.any(1)).squeeze(-1)

    def remove_anchors(self, drop):
        keep = torch.ones(self.n_anchors, dtype=torch.bool)
        keep[drop] = False
        self.positions = self.positions[keep]
        self.alive = self.alive[keep]
        for name in ("offsets", "log_scale", "features", "log_offset_scales"):
            setattr(self, name, nn.Parameter(getattr(self, name).data[keep]))
        self.cscm.rebuild(self.positions.double().numpy())
        return keep


def _median_spacing(pos):
    if pos.shape[0] < 2:
        return 0.05
    d = torch.cdist(pos.double(), pos.double())
    d.fill_diagonal_(float("inf"))
    return float(d.min(1).values.median())
