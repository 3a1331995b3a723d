"""Scene-domain types and geometry shared by the renderer, the feature
module and the pruning logic.

Tensors are batched along the leading dimension. Raw (pre-activation)
values are what the optimizer sees: scales are stored as logs, opacities
as logits and quaternions unnormalized.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, InvalidParameterError, NumericDegenerateError

PLANES = ("xy", "xz", "yz")
PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}

SH_C1 = 0.4886025119029199
COLOR_DIM = 12  # rgb base + 3 degree-1 SH coefficients per channel


def _check_finite(name, t):
    if not torch.isfinite(t).all():
        raise InvalidParameterError(f"{name} contains non-finite values")


def normalize_quat(q):
    return q / q.norm(dim=-1, keepdim=True)


def quat_to_rotmat(q):
    """Rotation matrices from (w, x, y, z) quaternions; q must be unit length."""
    w, x, y, z = q.unbind(-1)
    r = torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return r.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(r):
    """Inverse of quat_to_rotmat for a single 3x3 matrix (numpy), w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q if q[0] >= 0 else -q


def build_covariance(scale, rotation):
    """Sigma = R S S^T R^T for positive scales (..., 3) and unit quaternions (..., 4)."""
    scale = torch.as_tensor(scale)
    rotation = torch.as_tensor(rotation, dtype=scale.dtype)
    _check_finite("scale", scale)
    _check_finite("rotation", rotation)
    if (scale <= 0).any():
        raise InvalidParameterError("scale components must be positive")
    m = quat_to_rotmat(rotation) * scale.unsqueeze(-2)
    return m @ m.transpose(-1, -2)


@dataclass
class Gaussians:
    """A batch of N world-space anisotropic Gaussian primitives (raw parameters)."""

    means: torch.Tensor  # (N, 3)
    log_scales: torch.Tensor  # (N, 3)
    quats: torch.Tensor  # (N, 4), normalized on use
    opacity_logits: torch.Tensor  # (N,)
    colors: torch.Tensor  # (N, 12): rgb base, then SH1 coefficients per basis fn

    def __len__(self):
        return self.means.shape[0]

    @property
    def scales(self):
        return self.log_scales.exp()

    @property
    def opacities(self):
        return torch.sigmoid(self.opacity_logits)

    @property
    def rotations(self):
        return normalize_quat(self.quats)

    def covariances(self, min_scale=0.0):
        scales = self.scales.clamp_min(min_scale) if min_scale > 0 else self.scales
        return build_covariance(scales, self.rotations)

    def subset(self, idx):
        return Gaussians(
            self.means[idx], self.log_scales[idx], self.quats[idx],
            self.opacity_logits[idx], self.colors[idx],
        )

    def detach(self):
        return Gaussians(*(t.detach() for t in self.tensors()))

    def tensors(self):
        return (self.means, self.log_scales, self.quats, self.opacity_logits, self.colors)

    @classmethod
    def create(cls, means, scales=None, quats=None, opacities=None, colors=None, dtype=torch.float64):
        """Build from activated values; missing attributes get neutral defaults."""

        def as_t(x):
            return torch.as_tensor(x if torch.is_tensor(x) else np.asarray(x, dtype=np.float64), dtype=dtype)

        means = as_t(means).reshape(-1, 3)
        n = means.shape[0]
        scales = torch.full((n, 3), 0.1, dtype=dtype) if scales is None else as_t(scales).reshape(n, 3)
        if quats is None:
            quats = torch.zeros(n, 4, dtype=dtype)
            quats[:, 0] = 1
        quats = as_t(quats).reshape(n, 4)
        opacities = torch.full((n,), 0.5, dtype=dtype) if opacities is None else as_t(opacities).reshape(n)
        rgb = torch.full((n, 3), 0.5, dtype=dtype) if colors is None else as_t(colors).reshape(n, -1 if n else 3)
        col = torch.zeros(n, COLOR_DIM, dtype=dtype)
        col[:, : rgb.shape[1]] = rgb
        return cls(means, scales.log(), quats, torch.logit(opacities), col)

    @classmethod
    def cat(cls, items):
        return cls(*(torch.cat(ts) for ts in zip(*(g.tensors() for g in items))))


def eval_sh_color(colors, view_dirs):
    """Evaluated per-Gaussian rgb for unit view directions (N, 3)."""
    base = colors[:, :3]
    sh = colors[:, 3:].reshape(-1, 3, 3)  # (N, basis, rgb)
    x, y, z = view_dirs.unbind(-1)
    return base + SH_C1 * (
        -y.unsqueeze(-1) * sh[:, 0] + z.unsqueeze(-1) * sh[:, 1] - x.unsqueeze(-1) * sh[:, 2]
    )


def eval_gaussian(g: Gaussians, x, min_scale=0.0):
    """Unnormalized density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)) for every Gaussian in g."""
    x = torch.as_tensor(x, dtype=g.means.dtype)
    cov = g.covariances(min_scale)
    det = torch.linalg.det(cov)
    if not torch.isfinite(det).all() or (det <= torch.finfo(cov.dtype).tiny).any():
        raise NumericDegenerateError("singular covariance; raise the scale floor")
    d = (x - g.means).unsqueeze(-1)
    m = torch.linalg.solve(cov, d)
    return torch.exp(-0.5 * (d * m).sum(dim=(-1, -2)))


@dataclass
class Anchors:
    """Scaffold points that each spawn k neural Gaussians."""

    positions: torch.Tensor  # (n, 3), fixed
    offsets: torch.Tensor  # (n, k, 3), dimensionless
    log_scale: torch.Tensor  # (n,), log l^a
    features: torch.Tensor  # (n, F)
    log_offset_scales: torch.Tensor  # (n, k, 3)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def k(self):
        return self.offsets.shape[1]


def spawn_gaussians(positions, offsets, log_scale):
    """Means of the spawned Gaussians: x_a + O_i * l_a, shape (n, k, 3)."""
    _check_finite("offsets", offsets)
    return positions.unsqueeze(1) + offsets * log_scale.exp()[:, None, None]


@dataclass
class Camera:
    """Pinhole camera with world-to-camera extrinsics (x_cam = R x_world + t)."""

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    name: str = ""

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.R).all() and np.isfinite(self.t).all()):
            raise InvalidParameterError("camera extrinsics must be finite")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-8:
            raise InvalidParameterError("camera rotation is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("image size must be positive")

    @property
    def center(self):
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0), fx=80.0, fy=None, width=64, height=64, name=""):
        """Camera at eye looking at target; camera +y points down the image."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(np.asarray(up, dtype=np.float64), fwd)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(np.array([1.0, 0.0, 0.0]), fwd)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(R, -R @ eye, fx, fx if fy is None else fy, width / 2, height / 2, width, height, name)


@dataclass
class SceneBounds:
    """Axis-aligned bounds plus the point-cloud statistics used for pruning.

    ``unit`` is the length that pruning distance thresholds are expressed
    in (the diagonal of the camera-position bounding box).
    """

    aabb_min: np.ndarray
    aabb_max: np.ndarray
    centroid: np.ndarray
    spatial_sigma: float
    unit: float = 1.0
    count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.aabb_min = np.asarray(self.aabb_min, dtype=np.float64)
        self.aabb_max = np.asarray(self.aabb_max, dtype=np.float64)
        self.centroid = np.asarray(self.centroid, dtype=np.float64)
        if not (self.aabb_min < self.aabb_max).all():
            raise ConfigurationError("degenerate bounds: aabb_min must be < aabb_max on every axis")

    @classmethod
    def from_points(cls, points, cameras=None):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo, hi = pts.min(0), pts.max(0)
        pad = np.maximum(hi - lo, 1e-6) * 1e-6
        centroid = pts.mean(0)
        sigma = float(np.sqrt(((pts - centroid) ** 2).sum(1).mean()))
        unit = 1.0
        if cameras:
            unit = camera_unit([c.center for c in cameras])
        return cls(lo - pad, hi + pad, centroid, sigma, unit, len(pts))

    def expanded(self, margin=0.05):
        ext = self.aabb_max - self.aabb_min
        return SceneBounds(
            self.aabb_min - margin * ext, self.aabb_max + margin * ext,
            self.centroid, self.spatial_sigma, self.unit, self.count,
        )

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.aabb_max - self.aabb_min))

    def needs_refresh(self, count):
        return self.count == 0 or abs(count - self.count) > 0.01 * self.count

    def normalize(self, p):
        """Map points into [0, 1]^3 (clamped)."""
        lo = torch.as_tensor(self.aabb_min, dtype=p.dtype)
        hi = torch.as_tensor(self.aabb_max, dtype=p.dtype)
        return ((p - lo) / (hi - lo)).clamp(0.0, 1.0)


def camera_unit(centers):
    """Diagonal of the bounding box of camera centers, or 1.0 if it collapses."""
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    d = float(np.linalg.norm(c.max(0) - c.min(0))) if len(c) else 0.0
    return d if d > 1e-9 else 1.0


def project_to_plane(p, plane, bounds: SceneBounds):
    """Orthographic projection onto an axis plane, normalized to [0, 1]^2.

    Points outside the bounds are clamped onto them first.
    """
    if plane not in PLANE_AXES:
        raise ConfigurationError(f"unknown plane {plane!r}")
    ext = bounds.aabb_max - bounds.aabb_min
    if (ext <= 0).any():
        raise ConfigurationError("degenerate bounds: zero extent")
    p = torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
    a, b = PLANE_AXES[plane]
    return bounds.normalize(p)[..., [a, b]]
