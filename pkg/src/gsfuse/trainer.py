"""Training loop with structure-view co-learning.

Each step samples M views, computes the anchor features once, decodes and
renders every view, and backpropagates the summed loss in one pass. The
gradient reaching an anchor parameter is split into the part that arrives
through the rendered Gaussians (view path) and the part that arrives through
the context-grid features (structural path); both are summed over the M
views before a single Adam step.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .cscm import CSCMConfig
from .cvpm import apply_pruning, cvc_loss, prune_mask, select_view_pairs
from .errors import NonFiniteLossError
from .losses import fine_loss, l1_loss, psnr, ssim
from .model import SHARED, ModelConfig, ScaffoldModel
from .rasterizer import rasterize
from .scene import SceneBounds

log = logging.getLogger(__name__)

LEVEL_FRACTIONS = (1 / 30000, 12000 / 30000, 21000 / 30000)


@dataclass
class TrainConfig:
    total_iterations: int = 3000
    views_per_step: int = 4
    lambda_ssim: float = 0.2
    lambda_fine: float = 0.01
    lambda_cvc: float = 0.05
    level_fractions: tuple = LEVEL_FRACTIONS
    lr_planes: float = 1e-2
    lr_mlp: float = 2e-3
    lr_offsets: float = 1e-3
    lr_opacity: float = 5e-2
    lr_scales: float = 5e-3
    lr_features: float = 5e-3
    prune_every: int = 500
    prune_cameras: int = 4
    seed: int = 0
    use_cvpm: bool = True
    use_svc: bool = True
    use_attention: bool = True
    k: int = 5
    plane_res: int = 32
    channels: int = 8
    hde_dim: int = 32
    levels: int = 3
    grid_res: int = 8
    hidden: int = 32
    feature_dim: int = 16
    min_scale_factor: float = 1e-6
    dtype: str = "float32"

    def model_config(self):
        return ModelConfig(
            k=self.k,
            decoder_hidden=self.hidden,
            cscm=CSCMConfig(
                plane_res=self.plane_res, channels=self.channels, hde_dim=self.hde_dim,
                levels=self.levels, grid_res=self.grid_res, hidden=self.hidden,
                feature_dim=self.feature_dim, attention=self.use_attention,
            ),
        )

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def to_dict(self):
        d = asdict(self)
        d["level_fractions"] = list(self.level_fractions)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "level_fractions" in d:
            d["level_fractions"] = tuple(d["level_fractions"])
        return cls(**d)


def level_schedule(iteration, cfg: TrainConfig):
    """Active levels at a (1-based) iteration; level 1 is always on."""
    active = [1]
    for lvl, frac in enumerate(cfg.level_fractions[1 : cfg.levels], start=2):
        if iteration >= round(frac * cfg.total_iterations):
            active.append(lvl)
    return tuple(active)


def param_group(name):
    if name.endswith("planes"):
        return "planes"
    if name.startswith(("cscm.", "decoder.")):
        return "mlp"
    if name == "offsets":
        return "offsets"
    if name in ("log_scale", "log_offset_scales", "log_scales"):
        return "scales"
    if name == "features":
        return "features"
    if name in ("opacity_logits",):
        return "opacity"
    if name in ("means",):
        return "offsets"
    return "mlp"


class Adam:
    """Adam with per-group learning rates and per-group NaN rejection.

    Parameters are addressed by name so that levels added mid-run and
    anchors removed by pruning keep consistent moment buffers.
    """

    def __init__(self, lrs, betas=(0.9, 0.999), eps=1e-15, normalize=()):
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.normalize = set(normalize)
        self.m, self.v = {}, {}
        self.steps = {}
        self.rejected = []

    def step(self, params, grads, group_of=param_group):
        """params, grads: dicts name -> tensor. Missing / None grads are skipped."""
        by_group = {}
        for name, g in grads.items():
            if g is not None:
                by_group.setdefault(group_of(name), []).append(name)
        with torch.no_grad():
            for group, names in sorted(by_group.items()):
                if not all(bool(torch.isfinite(grads[n]).all()) for n in names):
                    log.warning("non-finite gradient in group %s; step rejected", group)
                    self.rejected.append(group)
                    continue
                t = self.steps.get(group, 0) + 1
                self.steps[group] = t
                lr = self.lrs[group]
                for n in names:
                    p, g = params[n], grads[n]
                    if n not in self.m:
                        self.m[n] = torch.zeros_like(p)
                        self.v[n] = torch.zeros_like(p)
                    m, v = self.m[n], self.v[n]
                    m.mul_(self.b1).add_(g, alpha=1 - self.b1)
                    v.mul_(self.b2).addcmul_(g, g, value=1 - self.b2)
                    mhat = m / (1 - self.b1**t)
                    vhat = v / (1 - self.b2**t)
                    p.sub_(lr * mhat / (vhat.sqrt() + self.eps))
                    if n in self.normalize:
                        p.div_(p.norm(dim=-1, keepdim=True))

    def reindex(self, names, keep):
        for n in names:
            if n in self.m:
                self.m[n] = self.m[n][keep]
                self.v[n] = self.v[n][keep]

    def state_tensors(self):
        out = {}
        for n in sorted(self.m):
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out


@dataclass
class GradientReport:
    """Per-group gradient norms split by path; total = view + structural."""

    view: dict = field(default_factory=dict)
    structural: dict = field(default_factory=dict)
    total: dict = field(default_factory=dict)
    residual: float = 0.0

    def to_record(self):
        return {"view": self.view, "structural": self.structural, "total": self.total}


@dataclass
class StepResult:
    loss: float
    terms: dict
    grads: dict
    view_grads: dict
    structural_grads: dict
    report: GradientReport


def view_loss(render, gt, log_scales, cfg: TrainConfig):
    """Per-view terms: L1, 1 - SSIM, and the volume regularizer."""
    l_pix = l1_loss(render, gt)
    l_ssim = 1.0 - ssim(render, gt)
    l_fine = fine_loss(log_scales)
    total = (1 - cfg.lambda_ssim) * l_pix + cfg.lambda_ssim * l_ssim + cfg.lambda_fine * l_fine
    return total, {"pixel": l_pix, "ssim": l_ssim, "fine": l_fine}


def batch_loss(renders, gts, log_scales, pairs, cfg: TrainConfig, use_cvc=True):
    """Sum of per-view losses plus the weighted consistency term over pairs
    whose two views are both in the batch. renders/gts/log_scales are dicts
    keyed by view index."""
    total = 0.0
    terms = {"pixel": 0.0, "ssim": 0.0, "fine": 0.0, "cvc": 0.0}
    for i in renders:
        l, t = view_loss(renders[i], gts[i], log_scales[i], cfg)
        total = total + l
        for key, val in t.items():
            terms[key] = terms[key] + val
    if use_cvc and cfg.lambda_cvc > 0:
        for pr in pairs:
            if pr.i in renders and pr.j in renders:
                c = cvc_loss(pr, gts[pr.i], gts[pr.j], renders[pr.i], renders[pr.j])
                terms["cvc"] = terms["cvc"] + c
                total = total + cfg.lambda_cvc * c
    return total, terms


class Trainer:
    def __init__(self, dataset, cfg: TrainConfig, model: ScaffoldModel | None = None, anchors=None):
        self.cfg = cfg
        self.data = dataset
        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        dtype = cfg.torch_dtype
        self.train_ids = list(dataset.train)
        self.gts = {i: dataset.images[i].to(dtype) for i in range(len(dataset.images))}
        self.cameras = dataset.cameras
        if model is None:
            pts = anchors if anchors is not None else dataset.points
            bounds = SceneBounds.from_points(pts, [dataset.cameras[i] for i in self.train_ids])
            model = ScaffoldModel(pts, bounds, cfg.model_config(), seed=cfg.seed, dtype=dtype)
        self.model = model
        self.bounds = model.bounds
        self.min_scale = cfg.min_scale_factor * self.bounds.diagonal
        lrs = {
            "planes": cfg.lr_planes, "mlp": cfg.lr_mlp, "offsets": cfg.lr_offsets,
            "opacity": cfg.lr_opacity, "scales": cfg.lr_scales, "features": cfg.lr_features,
        }
        self.opt = Adam(lrs)
        self.iteration = 0
        self.pairs = select_view_pairs([self.gts[i] for i in self.train_ids]) if cfg.use_cvpm else []
        # pair indices refer to positions in train_ids; map back to view ids
        self.pairs = [type(p)(self.train_ids[p.i], self.train_ids[p.j], p.ssim) for p in self.pairs]
        self._queue = []
        self._prune_cursor = 0
        self.log_records = []
        self.activation_jumps = {}
        self.freeze_structure = False

    # -- sampling -------------------------------------------------------
    def sample_views(self):
        m = min(self.cfg.views_per_step, len(self.train_ids))
        if len(self._queue) < m:
            self._queue = [self.train_ids[i] for i in self.rng.permutation(len(self.train_ids))]
        batch, self._queue = self._queue[:m], self._queue[m:]
        return batch

    # -- forward / backward ---------------------------------------------
    def forward(self, views, split=True):
        model = self.model
        paths = model.paths(split=split)
        if self.freeze_structure:
            with torch.no_grad():
                f_h = model.hde(paths)
        else:
            f_h = model.hde(paths)
        renders, scales = {}, {}
        for i in views:
            g = model.gaussians(self.cameras[i], f_h, paths)
            renders[i] = rasterize(g, self.cameras[i], self.min_scale).color
            scales[i] = g.log_scales
        total, terms = batch_loss(renders, self.gts, scales, self.pairs, self.cfg, self.cfg.use_cvpm)
        return total, terms, paths

    def compute_step(self, views):
        """Loss and path-split gradients for one batch (no parameter update)."""
        model = self.model
        model.train()
        total, terms, paths = self.forward(views)
        for key, val in terms.items():
            if not math.isfinite(float(val.detach() if torch.is_tensor(val) else val)):
                raise NonFiniteLossError(self.iteration, key)
        if not math.isfinite(float(total.detach())):
            raise NonFiniteLossError(self.iteration, "total")

        named = dict(model.named_parameters())
        leaf_names = list(named)
        alias_v = [paths.view[n] for n in SHARED]
        alias_s = [paths.structural[n] for n in SHARED]
        inputs = [named[n] for n in leaf_names] + alias_v + alias_s
        grads = torch.autograd.grad(total, inputs, allow_unused=True)
        full = {n: g for n, g in zip(leaf_names, grads[: len(leaf_names)])}
        gv = dict(zip(SHARED, grads[len(leaf_names) : len(leaf_names) + len(SHARED)]))
        gs = dict(zip(SHARED, grads[len(leaf_names) + len(SHARED) :]))

        view_g, struct_g = {}, {}
        for n in leaf_names:
            g = full[n]
            if n in SHARED:
                view_g[n] = _zero_if_none(gv[n], named[n])
                struct_g[n] = _zero_if_none(gs[n], named[n])
            elif n == "features" or n.startswith("cscm."):
                struct_g[n] = _zero_if_none(g, named[n])
                view_g[n] = torch.zeros_like(named[n])
            else:
                view_g[n] = _zero_if_none(g, named[n])
                struct_g[n] = torch.zeros_like(named[n])
            full[n] = _zero_if_none(g, named[n])

        report = GradientReport()
        resid = 0.0
        for n in leaf_names:
            grp = param_group(n)
            for dst, src in ((report.view, view_g), (report.structural, struct_g), (report.total, full)):
                dst[grp] = dst.get(grp, 0.0) + float(src[n].double().pow(2).sum())
            resid = max(resid, float((full[n] - view_g[n] - struct_g[n]).abs().max()) if full[n].numel() else 0.0)
        for dct in (report.view, report.structural, report.total):
            for grp in dct:
                dct[grp] = math.sqrt(dct[grp])
        report.residual = resid

        applied = {}
        for n in leaf_names:
            if self.cfg.use_svc:
                applied[n] = full[n]
            else:
                # anchor parameters only learn from the rendering path
                applied[n] = view_g[n] if (n in SHARED or n == "features") else full[n]
        terms = {k: float(v.detach() if torch.is_tensor(v) else v) for k, v in terms.items()}
        return StepResult(float(total.detach()), terms, applied, view_g, struct_g, report)

    def step(self):
        """One full training iteration: schedule, batch, update, pruning."""
        self.iteration += 1
        it = self.iteration
        jump = self._apply_schedule(it)
        views = self.sample_views()
        res = self.compute_step(views)
        params = dict(self.model.named_parameters())
        self.opt.step(params, res.grads)
        rec = {
            "iteration": it,
            "loss": res.loss,
            **{f"l_{k}": v for k, v in res.terms.items()},
            "grad_view": res.report.view,
            "grad_structural": res.report.structural,
            "gaussians": int(self.model.alive.sum()),
            "anchors": self.model.n_anchors,
            "levels": list(self.model.cscm.active),
        }
        if jump is not None:
            rec["activation_jump"] = jump
        self.log_records.append(json.dumps(rec, sort_keys=True))
        if self.cfg.use_cvpm and self.cfg.prune_every > 0 and it % self.cfg.prune_every == 0:
            report = self.prune()
            self.log_records.append(report.to_record())
        return res

    def _apply_schedule(self, it):
        want = level_schedule(it, self.cfg)
        jump = None
        for lvl in want:
            if lvl not in self.model.cscm.active:
                views = self._queue[: self.cfg.views_per_step] or self.train_ids[: self.cfg.views_per_step]
                before = self.batch_value(views)
                self.model.activate_level(lvl)
                after = self.batch_value(views)
                jump = abs(after - before)
                self.activation_jumps[lvl] = jump
                log.info("level %d active at iteration %d (loss jump %.3g)", lvl, it, jump)
        return jump

    def batch_value(self, views):
        with torch.no_grad():
            return float(self.forward(views, split=False)[0])

    def prune(self):
        model = self.model
        ids = self.train_ids
        cams = [self.cameras[ids[(self._prune_cursor + j) % len(ids)]] for j in range(min(self.cfg.prune_cameras, len(ids)))]
        self._prune_cursor = (self._prune_cursor + len(cams)) % len(ids)
        means = model.spawned_means().reshape(-1, 3)
        decisions = [prune_mask(means, cam, self.bounds) for cam in cams]
        _, report = apply_pruning(model, decisions, self.iteration)
        if report.keep is not None:
            self.opt.reindex(["offsets", "log_scale", "features", "log_offset_scales"], report.keep)
        return report

    def train(self, iterations=None, callback=None):
        n = self.cfg.total_iterations if iterations is None else iterations
        for _ in range(n):
            res = self.step()
            if callback is not None:
                callback(self, res)
        return self

    def evaluate(self, views=None):
        return evaluate(self.model, self.cameras, self.gts, self.data.test if views is None else views, self.min_scale)


def _zero_if_none(g, p):
    return torch.zeros_like(p) if g is None else g


def evaluate(model: ScaffoldModel, cameras, images, views, min_scale=0.0):
    """Per-view and mean PSNR / SSIM on the given (held-out) views."""
    model.eval()
    rows = []
    with torch.no_grad():
        f_h = model.hde()
        for i in views:
            g = model.gaussians(cameras[i], f_h)
            img = rasterize(g, cameras[i], min_scale).color.clamp(0, 1)
            gt = images[i].to(img.dtype)
            rows.append({"view": int(i), "psnr": psnr(img, gt), "ssim": float(ssim(img, gt))})
    model.train()
    mean = {
        "psnr": float(np.mean([r["psnr"] for r in rows])) if rows else float("nan"),
        "ssim": float(np.mean([r["ssim"] for r in rows])) if rows else float("nan"),
    }
    return {"views": rows, "mean": mean}


def render_model(model: ScaffoldModel, cam, min_scale=0.0):
    model.eval()
    with torch.no_grad():
        out = rasterize(model.gaussians(cam, model.hde()), cam, min_scale)
    model.train()
    return out
