"""Cross-view consistency loss over SSIM-paired views and geometric pruning.

Pruning distances d_I (to the ray through the pixel a point projects to)
and d_C (to the camera center) are measured in units of ``bounds.unit``,
the diagonal of the camera-position bounding box. d_O (to the point-cloud
centroid) is compared against 3 * bounds.spatial_sigma in world units.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np
import torch

from .errors import DimensionMismatchError
from .losses import ssim
from .scene import Camera, Gaussians, SceneBounds

PAIR_SSIM_MIN = 0.6
D_RAY = 0.01
D_CAMERA = 0.5
OUTLIER_SIGMAS = 3.0


@dataclass(frozen=True)
class ViewPair:
    i: int
    j: int
    ssim: float


def select_view_pairs(images, threshold=PAIR_SSIM_MIN):
    """All unordered pairs whose ground-truth SSIM exceeds the threshold."""
    pairs = []
    with torch.no_grad():
        for i, j in combinations(range(len(images)), 2):
            s = float(ssim(images[i], images[j]))
            if s > threshold:
                pairs.append(ViewPair(i, j, s))
    return pairs


def cvc_loss(pair, gt_i, gt_j, render_i, render_j):
    """SSIM(gt_i, gt_j) * mean |(gt_i - render_i) - (gt_j - render_j)|.

    The SSIM weight involves ground truth only and is a constant.
    """
    shapes = {tuple(x.shape) for x in (gt_i, gt_j, render_i, render_j)}
    if len(shapes) != 1:
        raise DimensionMismatchError(f"cvc_loss needs four equally sized images, got {sorted(shapes)}")
    weight = pair.ssim if isinstance(pair, ViewPair) else float(pair)
    if weight <= 0:
        return render_i.new_zeros(()) * render_i.sum()
    return weight * ((gt_i - render_i) - (gt_j - render_j)).abs().mean()


@dataclass
class PruneDecision:
    mask: torch.Tensor  # (N,) bool, True = prune
    d_ray: torch.Tensor  # (N,) in scene units, inf when not projected into the image
    d_camera: torch.Tensor  # (N,) in scene units
    d_centroid: torch.Tensor  # (N,) world units
    near_camera: torch.Tensor  # (N,) bool: on-ray and d_C criterion
    outlier: torch.Tensor  # (N,) bool: on-ray and d_O criterion


def pixel_rays(cam: Camera, px, py, dtype=torch.float64):
    """World-space unit directions of the rays through pixel centers (px, py)."""
    d = torch.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, torch.ones_like(px)], -1).to(dtype)
    d = d @ torch.as_tensor(cam.R, dtype=dtype)
    return d / d.norm(dim=-1, keepdim=True)


def prune_mask(means, cam: Camera, bounds: SceneBounds, ray_threshold=D_RAY, camera_threshold=D_CAMERA,
               outlier_sigmas=OUTLIER_SIGMAS) -> PruneDecision:
    means = torch.as_tensor(means).detach().to(torch.float64).reshape(-1, 3)
    R = torch.as_tensor(cam.R, dtype=torch.float64)
    o = torch.as_tensor(cam.center, dtype=torch.float64)
    pc = (means - o) @ R.T
    z = pc[:, 2]
    zs = torch.where(z > 0, z, torch.ones_like(z))
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    px = torch.floor(u + 0.5)
    py = torch.floor(v + 0.5)
    inside = (z > 0) & (px >= 0) & (px <= cam.width - 1) & (py >= 0) & (py <= cam.height - 1)
    rel = means - o
    d = pixel_rays(cam, px, py)
    along = (rel * d).sum(-1, keepdim=True)
    perp = (rel - along * d).norm(dim=-1)
    d_ray = torch.where(inside, perp, torch.full_like(perp, float("inf"))) / bounds.unit
    d_cam = rel.norm(dim=-1) / bounds.unit
    d_cen = (means - torch.as_tensor(bounds.centroid, dtype=torch.float64)).norm(dim=-1)
    on_ray = d_ray < ray_threshold
    near = on_ray & (d_cam < camera_threshold)
    out = on_ray & (d_cen > outlier_sigmas * bounds.spatial_sigma)
    return PruneDecision(near | out, d_ray, d_cam, d_cen, near, out)


@dataclass
class PruneReport:
    iteration: int
    flagged: int
    near_camera: int
    outlier: int
    anchors_removed: int
    surviving_gaussians: int
    surviving_anchors: int
    keep: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def to_record(self):
        rec = asdict(self)
        rec.pop("keep")
        return json.dumps({"event": "prune", **rec}, sort_keys=True)


def combine(decisions):
    """Any-camera policy: a point is pruned if any sampled camera flags it."""
    mask = torch.zeros_like(decisions[0].mask)
    near = torch.zeros_like(mask)
    out = torch.zeros_like(mask)
    for dec in decisions:
        mask |= dec.mask
        near |= dec.near_camera
        out |= dec.outlier
    return mask, near, out


def apply_pruning(scene, decisions, iteration=0):
    """Remove flagged Gaussians from a Gaussians batch or a ScaffoldModel.

    For a scaffold, an anchor goes once all of its k Gaussians are gone.
    Returns (scene, report); Gaussians batches are returned filtered, models
    are updated in place.
    """
    if not decisions:
        n = len(scene) if isinstance(scene, Gaussians) else int(scene.alive.sum())
        anchors = 0 if isinstance(scene, Gaussians) else scene.n_anchors
        return scene, PruneReport(iteration, 0, 0, 0, 0, n, anchors)
    mask, near, out = combine(decisions)
    if isinstance(scene, Gaussians):
        kept = scene.subset(~mask)
        return kept, PruneReport(iteration, int(mask.sum()), int(near.sum()), int(out.sum()), 0, len(kept), 0)
    live = scene.alive.reshape(-1)
    dead = (mask & live).reshape(scene.alive.shape)
    flagged = int(dead.sum())
    drop = scene.kill(dead)
    keep = scene.remove_anchors(drop) if len(drop) else None
    report = PruneReport(
        iteration, flagged, int((near & live).sum()), int((out & live).sum()), len(drop),
        int(scene.alive.sum()), scene.n_anchors, keep,
    )
    return scene, report
