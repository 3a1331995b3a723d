import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, rel_error
from gsfuse.errors import DimensionMismatchError, InvalidParameterError
from gsfuse.losses import SSIMParams, fine_loss, l1_loss, psnr, ssim, ssim_loss, value_and_grad

D = torch.float64


def _rand(seed, shape=(16, 16, 3)):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


def ssim_oracle(a, b, p=SSIMParams()):
    """Sliding-window SSIM with an explicit 2D Gaussian window."""
    a, b = a.numpy(), b.numpy()
    x = np.arange(p.window) - (p.window - 1) / 2
    g = np.exp(-(x**2) / (2 * p.sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    H, W, C = a.shape
    vals = []
    for c in range(C):
        for r in range(H - p.window + 1):
            for q in range(W - p.window + 1):
                pa = a[r : r + p.window, q : q + p.window, c]
                pb = b[r : r + p.window, q : q + p.window, c]
                mx, my = (w * pa).sum(), (w * pb).sum()
                vx = (w * (pa - mx) ** 2).sum()
                vy = (w * (pb - my) ** 2).sum()
                cxy = (w * (pa - mx) * (pb - my)).sum()
                vals.append(((2 * mx * my + p.c1) * (2 * cxy + p.c2)) / ((mx**2 + my**2 + p.c1) * (vx + vy + p.c2)))
    return float(np.mean(vals))


def test_window_sums_to_one():
    assert abs(float(SSIMParams().kernel1d().sum()) - 1.0) < 1e-12
    k = SSIMParams().kernel1d()
    assert abs(float(torch.outer(k, k).sum()) - 1.0) < 1e-12


def test_l1_examples():
    a = _rand(0)
    assert float(l1_loss(a, a)) == 0.0
    assert float(l1_loss(torch.ones(4, 4, 3, dtype=D), torch.zeros(4, 4, 3, dtype=D))) == 1.0
    b = _rand(1)
    oracle = float(np.mean(np.abs(a.numpy() - b.numpy())))
    assert abs(float(l1_loss(a, b)) - oracle) < 1e-12


def test_dimension_mismatch_raises():
    with pytest.raises(DimensionMismatchError):
        l1_loss(_rand(0), _rand(0, (16, 15, 3)))
    with pytest.raises(DimensionMismatchError):
        psnr(_rand(0), _rand(0, (16, 15, 3)))
    with pytest.raises(DimensionMismatchError):
        ssim(_rand(0), _rand(0, (15, 16, 3)))


def test_ssim_identity_and_window_size():
    a = _rand(2)
    assert abs(float(ssim(a, a)) - 1.0) < 1e-12
    with pytest.raises(InvalidParameterError):
        ssim(_rand(0, (10, 16, 3)), _rand(1, (10, 16, 3)))


@pytest.mark.parametrize("c,c2", [(0.2, 0.7), (0.5, 0.1), (1.0, 0.0)])
def test_ssim_constant_images_closed_form(c, c2):
    p = SSIMParams()
    a = torch.full((16, 16, 3), c, dtype=D)
    b = torch.full((16, 16, 3), c2, dtype=D)
    expected = (2 * c * c2 + p.c1) / (c * c + c2 * c2 + p.c1)
    assert abs(float(ssim(a, b)) - expected) < 1e-10


def test_ssim_matches_sliding_window_oracle():
    for seed in range(3):
        a, b = _rand(10 + seed), _rand(20 + seed)
        b = 0.5 * a + 0.5 * b  # correlated pair
        assert abs(float(ssim(a, b)) - ssim_oracle(a, b)) < 1e-8


def test_ssim_loss_definitional_and_anticorrelated():
    a, b = _rand(3), _rand(4)
    assert abs(float(ssim_loss(a, b)) - (1 - float(ssim(a, b)))) < 1e-12
    assert float(ssim_loss(a, a)) == pytest.approx(0.0, abs=1e-12)
    # structured pattern against its inversion
    yy, xx = torch.meshgrid(torch.arange(16.0), torch.arange(16.0), indexing="ij")
    pat = (0.5 + 0.4 * torch.sin(xx / 2) * torch.cos(yy / 3)).to(D).unsqueeze(-1).repeat(1, 1, 3)
    val = float(ssim_loss(pat, 1 - pat))
    assert 1.0 < val <= 2.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(s1, s2):
    a, b = _rand(s1), _rand(s2)
    ab, ba = float(ssim(a, b)), float(ssim(b, a))
    assert abs(ab - ba) <= 1e-12
    assert -1.0 <= ab <= 1.0


@pytest.mark.parametrize("offset", [0.05, 0.1, -0.1])
def test_ssim_offset_invariance(offset):
    # the contrast-structure factor is exactly shift invariant; with the
    # luminance factor neutralized (huge C1) SSIM must not move
    a = 0.1 + 0.8 * _rand(5)
    b = 0.1 + 0.8 * _rand(6)
    p = SSIMParams(c1=1e12)
    assert abs(float(ssim(a, b, p)) - float(ssim(a + offset, b + offset, p))) < 1e-9
    # pairs with matching local means keep their full SSIM as well
    assert abs(float(ssim(a, a)) - float(ssim(a + offset, a + offset))) < 1e-9


def test_fine_loss_examples():
    assert float(fine_loss(torch.zeros(0, 3, dtype=D))) == 0.0
    assert float(fine_loss(torch.zeros(1, 3, dtype=D))) == 1.0
    ls = torch.log(torch.tensor([[2.0, 3.0, 4.0], [1.0, 1.0, 2.0]], dtype=D))
    assert abs(float(fine_loss(ls)) - 26.0) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5), st.integers(0, 2), st.floats(1e-3, 1.0))
def test_fine_loss_strictly_monotone(i, j, delta):
    ls = torch.log(_rand(7, (6, 3)) + 0.1)
    bigger = ls.clone()
    bigger[i, j] += delta
    assert float(fine_loss(bigger)) > float(fine_loss(ls))


def test_psnr_examples():
    a = _rand(8)
    assert psnr(a, a) == 99.0
    b = torch.full((8, 8, 3), 0.3, dtype=D)
    assert abs(psnr(b + 0.1, b) - 20.0) < 1e-6
    c = _rand(9)
    mse = float(np.mean((a.numpy() - c.numpy()) ** 2))
    assert abs(psnr(a, c) - (-10 * math.log10(mse))) < 1e-9


def test_loss_gradients_match_finite_differences():
    a = 0.2 + 0.6 * _rand(30)
    sign = torch.where(_rand(31) > 0.5, 1.0, -1.0).to(D)
    b = a + sign * (0.01 + 0.15 * _rand(32))  # away from the L1 kink
    h = 1e-4
    for fn in (l1_loss, ssim, ssim_loss):
        _, g = value_and_grad(fn, a, b)
        x = a.clone()
        num = central_difference(lambda: fn(x, b), x, h)
        assert rel_error(g, num) < 1e-3, fn.__name__
    ls = torch.log(_rand(33, (5, 3)) + 0.2)
    _, g = value_and_grad(fine_loss, ls)
    x = ls.clone()
    assert rel_error(g, central_difference(lambda: fine_loss(x), x, h)) < 1e-3
