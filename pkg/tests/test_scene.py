import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gsfuse.errors import ConfigurationError, InvalidParameterError, NumericDegenerateError
from gsfuse.scene import (
    Camera, Gaussians, SceneBounds, build_covariance, eval_gaussian, project_to_plane,
    quat_to_rotmat, rotmat_to_quat, spawn_gaussians,
)

D = torch.float64
floats = st.floats(-3, 3, allow_nan=False)


def _quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return torch.tensor([math.cos(angle / 2), *(math.sin(angle / 2) * axis)], dtype=D)


def _rotz(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def test_covariance_identity():
    cov = build_covariance(torch.ones(3, dtype=D), torch.tensor([1.0, 0, 0, 0], dtype=D))
    assert torch.equal(cov, torch.eye(3, dtype=D))


def test_covariance_diagonal():
    cov = build_covariance(torch.tensor([2.0, 1, 1], dtype=D), torch.tensor([1.0, 0, 0, 0], dtype=D))
    assert torch.allclose(cov, torch.diag(torch.tensor([4.0, 1, 1], dtype=D)), atol=0)


def test_covariance_rotated_matches_matrix_oracle():
    s = np.array([1.0, 2.0, 3.0])
    R = _rotz(math.pi / 2)
    expected = R @ np.diag(s) @ np.diag(s).T @ R.T
    cov = build_covariance(torch.tensor(s), _quat([0, 0, 1], math.pi / 2))
    np.testing.assert_allclose(cov.numpy(), expected, atol=1e-12)
    np.testing.assert_allclose(cov.numpy(), np.diag([4.0, 1, 9]), atol=1e-12)


def test_covariance_rejects_bad_input():
    q = torch.tensor([1.0, 0, 0, 0], dtype=D)
    with pytest.raises(InvalidParameterError):
        build_covariance(torch.tensor([1.0, float("nan"), 1], dtype=D), q)
    with pytest.raises(InvalidParameterError):
        build_covariance(torch.tensor([1.0, 0.0, 1], dtype=D), q)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 5), min_size=3, max_size=3), st.lists(floats, min_size=4, max_size=4))
def test_covariance_sign_flip_and_psd(scale, q):
    q = torch.tensor(q, dtype=D)
    if q.norm() < 1e-3:
        q = torch.tensor([1.0, 0, 0, 0], dtype=D)
    q = q / q.norm()
    s = torch.tensor(scale, dtype=D)
    a, b = build_covariance(s, q), build_covariance(s, -q)
    assert (a - b).abs().max() <= 1e-12
    assert (a - a.T).abs().max() <= 1e-9 * max(1.0, float(a.abs().max()))
    assert torch.linalg.eigvalsh(a).min() >= -1e-9 * float(a.abs().max())


def test_rotmat_quat_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        R = quat_to_rotmat(torch.tensor(q)).numpy()
        q2 = rotmat_to_quat(R)
        np.testing.assert_allclose(quat_to_rotmat(torch.tensor(q2)).numpy(), R, atol=1e-12)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)


def _one(mean, scale, q):
    mean = torch.as_tensor(np.asarray(mean, dtype=np.float64)).reshape(1, 3)
    scale = torch.as_tensor(np.asarray(scale, dtype=np.float64)).reshape(1, 3)
    return Gaussians.create(mean, scale, torch.as_tensor(q, dtype=D).reshape(1, 4))


def test_eval_gaussian_closed_forms():
    ident = torch.tensor([1.0, 0, 0, 0], dtype=D)
    g = _one([0.3, -0.2, 1.0], [1.0, 1.0, 1.0], ident)
    assert float(eval_gaussian(g, [0.3, -0.2, 1.0])[0]) == 1.0
    for axis in np.eye(3):
        x = np.array([0.3, -0.2, 1.0]) + axis
        assert abs(float(eval_gaussian(g, x)[0]) - math.exp(-0.5)) < 1e-15


def test_eval_gaussian_matches_explicit_inverse():
    rng = np.random.default_rng(1)
    for _ in range(10):
        s = rng.uniform(0.2, 2.0, 3)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        mu, x = rng.normal(size=3), rng.normal(size=3)
        R = quat_to_rotmat(torch.tensor(q)).numpy()
        cov = R @ np.diag(s**2) @ R.T
        # adjugate / determinant inverse, independent of the solver path
        adj = np.array([[np.linalg.det(np.delete(np.delete(cov, i, 0), j, 1)) * (-1) ** (i + j) for i in range(3)] for j in range(3)])
        inv = adj / np.linalg.det(cov)
        d = x - mu
        expected = math.exp(-0.5 * d @ inv @ d)
        got = float(eval_gaussian(_one(mu, s, torch.tensor(q)), x)[0])
        assert abs(got - expected) <= 1e-12


def test_eval_gaussian_rotation_invariant():
    rng = np.random.default_rng(2)
    s = torch.tensor([0.5, 1.0, 2.0], dtype=D)
    q = torch.tensor(rng.normal(size=4))
    q = q / q.norm()
    mu, x = rng.normal(size=3), rng.normal(size=3)
    base = float(eval_gaussian(_one(mu, s, q), x)[0])
    for _ in range(5):
        r = rng.normal(size=4)
        r /= np.linalg.norm(r)
        Rm = quat_to_rotmat(torch.tensor(r)).numpy()
        q2 = torch.tensor(rotmat_to_quat(Rm @ quat_to_rotmat(q).numpy()))
        got = float(eval_gaussian(_one(Rm @ mu, s, q2), Rm @ x)[0])
        assert abs(got - base) < 1e-9


def test_eval_gaussian_degenerate():
    g = _one([0, 0, 0], [1e-200, 1.0, 1.0], torch.tensor([1.0, 0, 0, 0], dtype=D))
    with pytest.raises(NumericDegenerateError):
        eval_gaussian(g, [0.1, 0, 0])
    # the scale floor makes it well-posed again
    assert float(eval_gaussian(g, [0, 0, 0], min_scale=1e-6)[0]) == 1.0


def test_spawn_examples():
    pos = torch.tensor([[1.0, 0, 0]], dtype=D)
    off = torch.zeros(1, 4, 3, dtype=D)
    assert torch.equal(spawn_gaussians(pos, off, torch.zeros(1, dtype=D)), pos.expand(4, 3).unsqueeze(0))
    off = torch.randn(1, 4, 3, dtype=D)
    tiny = spawn_gaussians(pos, off, torch.tensor([math.log(1e-8)], dtype=D))
    assert (tiny - pos).abs().max() < 1e-7
    off = torch.tensor([[[0.0, 1, 0]]], dtype=D)
    mu = spawn_gaussians(pos, off, torch.tensor([math.log(2.0)], dtype=D))
    assert torch.allclose(mu[0, 0], torch.tensor([1.0, 2, 0], dtype=D), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(floats, min_size=3, max_size=3), st.floats(0.1, 10))
def test_spawn_translation_and_scale_equivariance(t, c):
    gen = torch.Generator().manual_seed(0)
    pos = torch.randn(5, 3, generator=gen, dtype=D)
    off = torch.randn(5, 3, 3, generator=gen, dtype=D)
    ls = torch.randn(5, generator=gen, dtype=D) * 0.3
    t = torch.tensor(t, dtype=D)
    base = spawn_gaussians(pos, off, ls)
    assert torch.equal(spawn_gaussians(pos + t, off, ls) - t, (pos + t).unsqueeze(1) + off * ls.exp()[:, None, None] - t)
    assert (spawn_gaussians(pos + t, off, ls) - (base + t)).abs().max() <= 1e-12
    scaled = spawn_gaussians(pos, off * c, ls - math.log(c))
    assert (scaled - base).abs().max() <= 1e-10


def test_camera_validation_and_center():
    cam = Camera.look_at([0, 0, -4], [0, 0, 0], fx=50, width=32, height=24)
    np.testing.assert_allclose(cam.center, [0, 0, -4], atol=1e-12)
    np.testing.assert_allclose(cam.R @ cam.R.T, np.eye(3), atol=1e-12)
    with pytest.raises(InvalidParameterError):
        Camera(np.eye(3) * 1.01, np.zeros(3), 1, 1, 0, 0, 4, 4)
    with pytest.raises(InvalidParameterError):
        Camera(np.eye(3), np.zeros(3), 0.0, 1, 0, 0, 4, 4)


def _unit_bounds():
    return SceneBounds(np.zeros(3), np.ones(3), np.full(3, 0.5), 0.5)


def test_project_to_plane_examples():
    b = _unit_bounds()
    p = torch.tensor([0.5, 0.5, 0.5], dtype=D)
    assert torch.equal(project_to_plane(p, "xy", b), torch.tensor([0.5, 0.5], dtype=D))
    for plane in ("xy", "xz", "yz"):
        assert torch.equal(project_to_plane(torch.zeros(3, dtype=D), plane, b), torch.zeros(2, dtype=D))


def test_project_to_plane_clamps_outside_points():
    b = _unit_bounds()
    p = torch.tensor([1.1, -0.1, 0.3], dtype=D)
    clamped = p.clamp(0, 1)
    for plane, (i, j) in (("xy", (0, 1)), ("xz", (0, 2)), ("yz", (1, 2))):
        assert torch.equal(project_to_plane(p, plane, b), clamped[[i, j]])


def test_project_to_plane_errors():
    with pytest.raises(ConfigurationError):
        project_to_plane(torch.zeros(3), "xw", _unit_bounds())
    with pytest.raises(ConfigurationError):
        SceneBounds(np.zeros(3), np.array([1.0, 0.0, 1.0]), np.zeros(3), 1.0)


def test_bounds_statistics():
    pts = np.random.default_rng(3).normal(size=(200, 3))
    b = SceneBounds.from_points(pts)
    c = pts.mean(0)
    assert np.allclose(b.centroid, c)
    assert abs(b.spatial_sigma - np.sqrt(((pts - c) ** 2).sum(1).mean())) < 1e-12
    assert not b.needs_refresh(201)
    assert b.needs_refresh(203)
