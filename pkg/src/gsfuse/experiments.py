"""Scaled reconstruction and ablation runs on the synthetic acceptance scene."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

from .data import SyntheticSpec, synthetic_dataset
from .trainer import TrainConfig, Trainer

ABLATIONS = {
    "full": {},
    "no-cvpm": {"use_cvpm": False},
    "no-svc": {"use_svc": False},
    "no-attention": {"use_attention": False},
}


@dataclass
class RunResult:
    name: str
    psnr: float
    ssim: float
    activation_jumps: dict
    seconds: float
    gaussians: int
    anchors: int

    def line(self):
        jumps = ", ".join(f"L{k}={v:.1e}" for k, v in sorted(self.activation_jumps.items()))
        return (f"{self.name:<13} PSNR {self.psnr:6.2f} dB  SSIM {self.ssim:.4f}  "
                f"gaussians {self.gaussians:5d}  jumps [{jumps}]  {self.seconds:6.1f} s")


def reconstruct(name="full", spec: SyntheticSpec | None = None, cfg: TrainConfig | None = None, dataset=None,
                progress=None):
    """Train on the synthetic scene and evaluate the held-out views."""
    if dataset is None:
        _, dataset = synthetic_dataset(spec or SyntheticSpec())
    cfg = replace(cfg or TrainConfig(), **ABLATIONS.get(name, {}))
    t0 = time.perf_counter()
    tr = Trainer(dataset, cfg)
    tr.train(callback=progress)
    m = tr.evaluate()["mean"]
    return RunResult(name, m["psnr"], m["ssim"], dict(tr.activation_jumps), time.perf_counter() - t0,
                     int(tr.model.alive.sum()), tr.model.n_anchors)


def ablation(names=tuple(ABLATIONS), spec: SyntheticSpec | None = None, cfg: TrainConfig | None = None,
             progress=None):
    _, dataset = synthetic_dataset(spec or SyntheticSpec())
    return {n: reconstruct(n, cfg=cfg, dataset=dataset, progress=progress) for n in names}


def ablation_verdict(results, slack=0.1):
    """Full must be within slack of every ablation and strictly above at least two."""
    full = results["full"].psnr
    others = [r for n, r in results.items() if n != "full"]
    within = all(full >= r.psnr - slack for r in others)
    above = sum(full > r.psnr for r in others)
    return within and above >= 2, within, above
