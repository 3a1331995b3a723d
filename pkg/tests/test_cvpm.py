from functools import lru_cache
from itertools import combinations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gsfuse.cvpm import (
    ViewPair, apply_pruning, cvc_loss, pixel_rays, prune_mask, select_view_pairs,
)
from gsfuse.data import SyntheticSpec, synthetic_dataset
from gsfuse.errors import DimensionMismatchError
from gsfuse.losses import ssim
from gsfuse.model import ModelConfig, ScaffoldModel
from gsfuse.scene import Camera, Gaussians, SceneBounds, quat_to_rotmat

D = torch.float64


def _img(seed, shape=(16, 16, 3)):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


# -- view pairs -------------------------------------------------------------------


def test_duplicate_views_pair_and_inverted_do_not():
    yy, xx = torch.meshgrid(torch.arange(16.0), torch.arange(16.0), indexing="ij")
    pat = (0.5 + 0.4 * torch.sin(xx / 2) * torch.cos(yy / 3)).to(D).unsqueeze(-1).repeat(1, 1, 3)
    pairs = select_view_pairs([pat, pat.clone(), 1 - pat])
    assert [(p.i, p.j) for p in pairs] == [(0, 1)]
    assert pairs[0].ssim == pytest.approx(1.0, abs=1e-12)


def test_orbit_pairs_match_all_pairs_oracle():
    _, ds = synthetic_dataset(SyntheticSpec(seed=2, gaussians=60, cameras=8, size=32, rig="orbit", distance=6.0, held_out=0))
    pairs = select_view_pairs(ds.images)
    expected = []
    for i, j in combinations(range(8), 2):
        s = float(ssim(ds.images[i], ds.images[j]))
        if s > 0.6:
            expected.append((i, j, s))
    assert [(p.i, p.j) for p in pairs] == [(i, j) for i, j, _ in expected]
    assert all(abs(p.ssim - s) < 1e-12 for p, (_, _, s) in zip(pairs, expected))
    assert all(p.i < p.j for p in pairs)
    assert 0 < len(pairs) < 28


# -- cross-view consistency loss ----------------------------------------------------


def test_cvc_zero_cases():
    a, b, ra, rb = _img(0), _img(1), _img(2), _img(3)
    assert float(cvc_loss(ViewPair(0, 1, 0.8), a, b, a, b)) == 0.0
    # equal residuals cancel
    assert float(cvc_loss(ViewPair(0, 1, 0.8), a, b, a - 0.1, b - 0.1)) == pytest.approx(0.0, abs=1e-15)
    assert float(cvc_loss(0.0, a, b, ra, rb)) == 0.0
    assert float(cvc_loss(-0.3, a, b, ra, rb)) == 0.0


def test_cvc_symmetric_and_direct_formula():
    a, b, ra, rb = _img(4), _img(5), _img(6), _img(7)
    w = 0.73
    ab = float(cvc_loss(w, a, b, ra, rb))
    ba = float(cvc_loss(w, b, a, rb, ra))
    assert abs(ab - ba) <= 1e-12
    direct = w * np.mean(np.abs((a.numpy() - ra.numpy()) - (b.numpy() - rb.numpy())))
    assert abs(ab - direct) <= 1e-10


def test_cvc_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        cvc_loss(0.5, _img(0), _img(1), _img(2), _img(3, (16, 15, 3)))


# -- pruning ----------------------------------------------------------------------


def _axis_setup():
    cam = Camera.look_at([0, 0, 0], [0, 0, 1], fx=30.0, width=32, height=32)
    bounds = SceneBounds(np.array([-1.0, -1, 4]), np.array([1.0, 1, 6]), np.array([0.0, 0, 5]), 1.0, 1.0)
    return cam, bounds


def test_prune_examples():
    cam, bounds = _axis_setup()
    pts = torch.tensor([[0, 0, 0.1], [0, 0, 5.0], [0, 0, 9.0], [1.0, 0, 0.1], [0.4, 0.3, 5.0]], dtype=D)
    dec = prune_mask(pts, cam, bounds)
    assert dec.mask.tolist() == [True, False, True, False, False]
    assert dec.near_camera.tolist() == [True, False, False, False, False]
    # the near-camera point is also 4.9 sigma from the centroid
    assert dec.outlier.tolist() == [True, False, True, False, False]
    assert float(dec.d_ray[0]) < 1e-12 and torch.isinf(dec.d_ray[3])
    assert float(dec.d_camera[0]) == pytest.approx(0.1, abs=1e-12)


def _rigid(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    Q = quat_to_rotmat(torch.tensor(q / np.linalg.norm(q))).numpy()
    return Q, rng.normal(size=3) * 3


def _move_camera(cam, Q, s):
    R = cam.R @ Q.T
    c = Q @ cam.center + s
    return Camera(R, -R @ c, cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_prune_invariant_under_rigid_motion(seed):
    scene, cams = _scene()
    pts = scene.all_gaussians.means.double()
    cam = cams[seed % len(cams)]
    bounds = scene.bounds
    Q, s = _rigid(seed)
    moved = SceneBounds(bounds.aabb_min - 50, bounds.aabb_max + 50, Q @ bounds.centroid + s,
                        bounds.spatial_sigma, bounds.unit)
    a = prune_mask(pts, cam, bounds)
    b = prune_mask(pts @ torch.tensor(Q.T) + torch.tensor(s), _move_camera(cam, Q, s), moved)
    assert torch.equal(a.mask, b.mask)
    fin = torch.isfinite(a.d_ray)
    assert torch.equal(fin, torch.isfinite(b.d_ray))
    assert (a.d_ray[fin] - b.d_ray[fin]).abs().max() < 1e-9
    assert (a.d_camera - b.d_camera).abs().max() < 1e-9
    assert (a.d_centroid - b.d_centroid).abs().max() < 1e-9


@lru_cache(maxsize=1)
def _scene():
    scene, _ = synthetic_dataset(SyntheticSpec(seed=3, gaussians=80, floaters=8, outliers=5, cameras=6, size=32))
    return scene, scene.cameras


@pytest.mark.parametrize("which", ["ray", "camera", "sigma"])
def test_prune_threshold_monotone(which):
    scene, cams = _scene()
    pts = scene.all_gaussians.means.double()
    prev = None
    for t in (0.25, 0.5, 1.0, 2.0, 4.0):
        kw = {"ray": dict(ray_threshold=0.01 * t), "camera": dict(camera_threshold=0.5 * t),
              "sigma": dict(outlier_sigmas=3.0 / t)}[which]
        m = torch.zeros(len(pts), dtype=torch.bool)
        for cam in cams:
            m |= prune_mask(pts, cam, scene.bounds, **kw).mask
        if prev is not None:
            assert bool((prev & ~m).sum() == 0)
        prev = m


def test_ray_distance_against_bundle_brute_force():
    """d_ray uses the pixel the point projects into; the true nearest of all
    32x32 pixel rays can only be closer, by at most a pixel footprint."""
    scene, cams = _scene()
    cam = cams[0]
    rng = np.random.default_rng(0)
    pts = torch.tensor(rng.normal(size=(300, 3)) * 0.8, dtype=D)
    dec = prune_mask(pts, cam, scene.bounds)
    ys, xs = torch.meshgrid(torch.arange(32.0, dtype=D), torch.arange(32.0, dtype=D), indexing="ij")
    rays = pixel_rays(cam, xs.reshape(-1), ys.reshape(-1))
    rel = pts - torch.as_tensor(cam.center)
    along = rel @ rays.T
    perp = (rel.norm(dim=-1, keepdim=True) ** 2 - along**2).clamp_min(0).sqrt()
    brute = perp.min(1).values / scene.bounds.unit
    fin = torch.isfinite(dec.d_ray)
    assert fin.sum() > 200
    assert (dec.d_ray[fin] >= brute[fin] - 1e-9).all()
    footprint = rel.norm(dim=-1) * (2**0.5) / cam.fx / scene.bounds.unit
    assert (dec.d_ray[fin] - brute[fin] <= footprint[fin]).all()
    # the two agree on which points are within the ray threshold away from the boundary
    clear = fin & ((dec.d_ray - 0.01).abs() > footprint)
    assert torch.equal((dec.d_ray < 0.01)[clear], (brute < 0.01)[clear])


def test_apply_pruning_none_and_all():
    g = Gaussians.create(np.zeros((3, 3)) + [0, 0, 5.0], np.full((3, 3), 0.1), np.tile([1.0, 0, 0, 0], (3, 1)),
                         np.full(3, 0.5), np.full((3, 3), 0.5))
    cam, bounds = _axis_setup()
    kept, rep = apply_pruning(g, [])
    assert kept is g and rep.flagged == 0 and rep.surviving_gaussians == 3
    kept, rep = apply_pruning(g, [prune_mask(g.means, cam, bounds)])
    assert len(kept) == 3 and rep.flagged == 0
    far = Gaussians.create(np.zeros((3, 3)) + [0, 0, 9.0], np.full((3, 3), 0.1), np.tile([1.0, 0, 0, 0], (3, 1)),
                           np.full(3, 0.5), np.full((3, 3), 0.5))
    kept, rep = apply_pruning(far, [prune_mask(far.means, cam, bounds)])
    assert len(kept) == 0 and rep.flagged == 3 and rep.outlier == 3


def test_apply_pruning_on_scaffold_drops_empty_anchors():
    cam, bounds = _axis_setup()
    pts = np.array([[0, 0, 5.0], [0.5, 0.5, 5.0], [0, 0, 9.0]])
    model = ScaffoldModel(pts, SceneBounds.from_points(pts), ModelConfig(k=2), dtype=D)
    with torch.no_grad():
        model.offsets.zero_()
    dec = prune_mask(model.spawned_means().reshape(-1, 3), cam, bounds)
    assert dec.mask.tolist() == [False, False, False, False, True, True]
    _, rep = apply_pruning(model, [dec], iteration=7)
    assert rep.anchors_removed == 1 and rep.surviving_anchors == 2 and rep.surviving_gaussians == 4
    assert model.positions.shape == (2, 3) and model.offsets.shape == (2, 2, 3)
    assert '"event": "prune"' in rep.to_record()
    # the remaining scene still decodes
    g = model.gaussians(cam, model.hde())
    assert len(g) == 4
