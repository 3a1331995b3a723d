import numpy as np
import pytest
import torch

from gsfuse.scene import Camera, Gaussians

D = torch.float64


def random_gaussians(n, seed=0, spread=0.5, scale=(0.1, 0.3), dtype=D, sh=True):
    gen = torch.Generator().manual_seed(seed)
    means = torch.randn(n, 3, generator=gen, dtype=dtype) * spread
    log_scales = torch.log(torch.rand(n, 3, generator=gen, dtype=dtype) * (scale[1] - scale[0]) + scale[0])
    quats = torch.randn(n, 4, generator=gen, dtype=dtype)
    logits = torch.randn(n, generator=gen, dtype=dtype)
    colors = torch.rand(n, 12, generator=gen, dtype=dtype)
    if sh:
        colors[:, 3:] = (colors[:, 3:] - 0.5) * 0.4
    else:
        colors[:, 3:] = 0
    return Gaussians(means, log_scales, quats, logits, colors)


def small_camera(size=16, fx=20.0, eye=(0.3, -0.2, -4.0)):
    return Camera.look_at(eye, [0, 0, 0], fx=fx, width=size, height=size)


def central_difference(f, x, h):
    """Numerical gradient of scalar f at tensor x (modified in place, restored)."""
    g = torch.zeros_like(x)
    flat, gf = x.view(-1), g.view(-1)
    for j in range(flat.numel()):
        old = float(flat[j])
        flat[j] = old + h
        fp = float(f())
        flat[j] = old - h
        fm = float(f())
        flat[j] = old
        gf[j] = (fp - fm) / (2 * h)
    return g


def rel_error(a, n, floor=1e-6):
    """Max entrywise |a - n| / max(|a|, |n|), entries below the absolute floor ignored."""
    a, n = a.detach().reshape(-1).double(), n.detach().reshape(-1).double()
    diff = (a - n).abs()
    scale = torch.maximum(a.abs(), n.abs())
    ok = diff <= floor
    r = torch.where(ok, torch.zeros_like(diff), diff / scale.clamp_min(floor))
    return float(r.max()) if r.numel() else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
