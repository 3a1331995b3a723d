"""Datasets: COLMAP text reconstructions and deterministic synthetic scenes.

COLMAP text layout (one record per non-comment line):

cameras.txt   CAMERA_ID MODEL WIDTH HEIGHT PARAMS...
              SIMPLE_PINHOLE params: f cx cy
              PINHOLE        params: fx fy cx cy
images.txt    IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME
              followed by one line of 2D points (X Y POINT3D_ID ...), may be empty.
              (QW..QZ, TX..TZ) is the world-to-camera rotation / translation.
points3D.txt  POINT3D_ID X Y Z R G B ERROR TRACK...   (optional; anchor seeds)

A ``split.json`` with {"train": [...], "test": [...]} (indices in images.txt
order) is honored when present; otherwise every 8th image is held out.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DimensionMismatchError, ParseError, UnsupportedModelError
from .imageio import read_image, write_image
from .rasterizer import render_view
from .scene import Camera, Gaussians, SceneBounds, camera_unit, quat_to_rotmat, rotmat_to_quat

MODELS = {"SIMPLE_PINHOLE": 3, "PINHOLE": 4}


@dataclass
class Dataset:
    cameras: list
    images: list  # (H, W, 3) float tensors in [0, 1]
    names: list = field(default_factory=list)
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    points: np.ndarray | None = None

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise DimensionMismatchError(f"{len(self.cameras)} cameras but {len(self.images)} images")
        for i, (cam, img) in enumerate(zip(self.cameras, self.images)):
            if tuple(img.shape[:2]) != (cam.height, cam.width):
                name = self.names[i] if i < len(self.names) else str(i)
                raise DimensionMismatchError(
                    f"image {name!r} is {img.shape[1]}x{img.shape[0]} but its camera is {cam.width}x{cam.height}"
                )
        if not self.train and not self.test:
            self.test = list(range(0, len(self.images), 8))[1:] if len(self.images) > 8 else []
            self.train = [i for i in range(len(self.images)) if i not in self.test]


def _records(path):
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield lineno, s


def read_cameras_text(path):
    cams = {}
    for lineno, s in _records(path):
        el = s.split()
        if len(el) < 4:
            raise ParseError("camera record needs at least 4 fields", path, lineno)
        model = el[1]
        if model not in MODELS:
            raise UnsupportedModelError(f"unsupported camera model {model}", path, lineno)
        try:
            cid, w, h = int(el[0]), int(el[2]), int(el[3])
            params = [float(x) for x in el[4:]]
        except ValueError as e:
            raise ParseError(f"bad number in camera record ({e})", path, lineno) from None
        if len(params) != MODELS[model]:
            raise ParseError(f"{model} expects {MODELS[model]} parameters, got {len(params)}", path, lineno)
        if model == "SIMPLE_PINHOLE":
            f_, cx, cy = params
            params = [f_, f_, cx, cy]
        cams[cid] = (w, h, params)
    return cams


def read_images_text(path):
    """List of (image_id, qvec, tvec, camera_id, name), file order."""
    out = []
    expect_points = False
    with open(path) as f:
        lines = f.read().split("\n")
    for lineno, raw in enumerate(lines, 1):
        s = raw.strip()
        if s.startswith("#"):
            continue
        if expect_points:
            expect_points = False
            continue
        if not s:
            continue
        el = s.split()
        if len(el) < 10:
            raise ParseError("image record needs 10 fields", path, lineno)
        try:
            iid = int(el[0])
            q = np.array([float(x) for x in el[1:5]])
            t = np.array([float(x) for x in el[5:8]])
            cid = int(el[8])
        except ValueError as e:
            raise ParseError(f"bad number in image record ({e})", path, lineno) from None
        out.append((iid, q, t, cid, " ".join(el[9:])))
        expect_points = True
    return out


def read_points3d_text(path):
    pts = []
    for lineno, s in _records(path):
        el = s.split()
        try:
            pts.append([float(x) for x in el[1:4]])
        except (ValueError, IndexError):
            raise ParseError("bad point record", path, lineno) from None
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def load_colmap_text(directory, load_images=True):
    d = Path(directory)
    cams = read_cameras_text(d / "cameras.txt")
    cameras, images, names = [], [], []
    for iid, q, t, cid, name in read_images_text(d / "images.txt"):
        if cid not in cams:
            raise ParseError(f"image {name!r} references unknown camera {cid}", d / "images.txt")
        w, h, (fx, fy, cx, cy) = cams[cid]
        qn = q / np.linalg.norm(q)
        R = quat_to_rotmat(torch.as_tensor(qn)).numpy()
        cameras.append(Camera(R, t, fx, fy, cx, cy, w, h, name))
        names.append(name)
        if load_images:
            img_path = d / "images" / name
            if not img_path.exists():
                img_path = d / name
            images.append(read_image(img_path))
        else:
            images.append(torch.zeros(h, w, 3, dtype=torch.float64))
    split = {}
    if (d / "split.json").exists():
        split = json.loads((d / "split.json").read_text())
    points = read_points3d_text(d / "points3D.txt") if (d / "points3D.txt").exists() else None
    return Dataset(cameras, images, names, list(split.get("train", [])), list(split.get("test", [])), points)


def write_colmap_text(directory, dataset: Dataset, image_ext=".ppm"):
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    with open(d / "cameras.txt", "w") as f:
        f.write("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for i, c in enumerate(dataset.cameras, 1):
            f.write(f"{i} PINHOLE {c.width} {c.height} " + " ".join(repr(float(x)) for x in (c.fx, c.fy, c.cx, c.cy)) + "\n")
    with open(d / "images.txt", "w") as f:
        f.write("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for i, c in enumerate(dataset.cameras, 1):
            q = rotmat_to_quat(c.R)
            name = dataset.names[i - 1] if dataset.names else f"view_{i - 1:03d}{image_ext}"
            vals = " ".join(repr(float(x)) for x in (*q, *c.t))
            f.write(f"{i} {vals} {i} {name}\n\n")
            if dataset.images:
                write_image(d / "images" / name, dataset.images[i - 1])
    if dataset.points is not None:
        with open(d / "points3D.txt", "w") as f:
            f.write("# POINT3D_ID X Y Z R G B ERROR TRACK[]\n")
            for i, p in enumerate(dataset.points, 1):
                f.write(f"{i} " + " ".join(repr(float(x)) for x in p) + " 128 128 128 0\n")
    (d / "split.json").write_text(json.dumps({"train": dataset.train, "test": dataset.test}))


# -- synthetic scenes --------------------------------------------------------


@dataclass
class SyntheticSpec:
    seed: int = 0
    gaussians: int = 150
    floaters: int = 0
    outliers: int = 0
    cameras: int = 12
    size: int = 64
    rig: str = "grid"
    held_out: int = 2
    scene_radius: float = 1.0
    distance: float = 4.0
    point_noise: float = 0.02


@dataclass
class SyntheticScene:
    clean: Gaussians
    artifacts: Gaussians
    labels: dict  # {"floater": [idx...], "outlier": [idx...]} into `artifacts`
    cameras: list
    bounds: SceneBounds  # statistics of the clean point cloud

    @property
    def all_gaussians(self):
        return Gaussians.cat([self.clean, self.artifacts])

    @property
    def artifact_mask(self):
        m = torch.zeros(len(self.clean) + len(self.artifacts), dtype=torch.bool)
        m[len(self.clean):] = True
        return m


def make_rig(spec: SyntheticSpec):
    n, size = spec.cameras, spec.size
    fx = 0.5 * size / np.tan(np.radians(22.0))
    cams = []
    if spec.rig == "grid":
        cols = int(np.ceil(np.sqrt(n * 4 / 3)))
        rows = int(np.ceil(n / cols))
        for i in range(n):
            r, c = divmod(i, cols)
            x = (c - (cols - 1) / 2) * 0.5
            y = (r - (rows - 1) / 2) * 0.5
            cams.append(Camera.look_at([x, y, -spec.distance], [0, 0, 0], fx=fx, width=size, height=size, name=f"view_{i:03d}.ppm"))
    elif spec.rig == "orbit":
        for i in range(n):
            a = 2 * np.pi * i / n
            el = 0.3 * np.sin(3 * a)
            eye = spec.distance * np.array([np.sin(a) * np.cos(el), np.sin(el), -np.cos(a) * np.cos(el)])
            cams.append(Camera.look_at(eye, [0, 0, 0], fx=fx, width=size, height=size, name=f"view_{i:03d}.ppm"))
    else:
        raise ValueError(f"unknown rig {spec.rig!r}")
    return cams


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _point_on_pixel_ray(cam, rng, margin=0.25):
    px = float(rng.integers(int(cam.width * margin), int(cam.width * (1 - margin))))
    py = float(rng.integers(int(cam.height * margin), int(cam.height * (1 - margin))))
    d = np.array([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0]) @ cam.R
    return cam.center, d / np.linalg.norm(d)


def generate_synthetic(spec: SyntheticSpec):
    """Deterministic scene: clean Gaussians in a ball, plus labeled floaters
    (on a pixel ray, closer than half a scene unit to that camera) and
    outliers (on a pixel ray, 3.5-5 sigma from the clean centroid)."""
    rng = np.random.default_rng(spec.seed)
    n = spec.gaussians
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = dirs * spec.scene_radius * rng.uniform(0, 1, size=(n, 1)) ** (1 / 3)
    scales = np.exp(rng.uniform(np.log(0.06), np.log(0.16), size=(n, 3))) * spec.scene_radius
    clean = Gaussians.create(
        means, scales, _random_quats(rng, n), rng.uniform(0.6, 0.95, size=n), rng.uniform(0.05, 0.95, size=(n, 3))
    )
    cams = make_rig(spec)
    bounds = SceneBounds.from_points(means, cams)

    art_means, labels = [], {"floater": [], "outlier": []}
    for j in range(spec.floaters):
        cam = cams[int(rng.integers(len(cams)))]
        o, d = _point_on_pixel_ray(cam, rng)
        t = rng.uniform(0.1, 0.45) * bounds.unit
        labels["floater"].append(len(art_means))
        art_means.append(o + t * d)
    for j in range(spec.outliers):
        while True:
            cam = cams[int(rng.integers(len(cams)))]
            o, d = _point_on_pixel_ray(cam, rng)
            r = rng.uniform(3.5, 5.0) * bounds.spatial_sigma
            # far intersection of the ray with the sphere of radius r about the centroid
            oc = o - bounds.centroid
            b = float(oc @ d)
            disc = b * b - (float(oc @ oc) - r * r)
            if disc > 0:
                t = -b + np.sqrt(disc)
                p = o + t * d
                if np.linalg.norm(p - o) >= 0.5 * bounds.unit:
                    break
        labels["outlier"].append(len(art_means))
        art_means.append(p)
    na = len(art_means)
    artifacts = Gaussians.create(
        np.asarray(art_means).reshape(-1, 3),
        np.full((na, 3), 0.03), _random_quats(rng, na).reshape(-1, 4),
        np.full(na, 0.8), rng.uniform(0.05, 0.95, size=(na, 3)),
    )
    return SyntheticScene(clean, artifacts, labels, cams, bounds)


def held_out_views(cameras, k):
    """The k cameras closest to the rig centroid (interpolation views)."""
    if k <= 0:
        return []
    c = np.array([cam.center for cam in cameras])
    d = np.linalg.norm(c - c.mean(0), axis=1)
    return sorted(int(i) for i in np.argsort(d, kind="stable")[:k])


def synthetic_dataset(spec: SyntheticSpec):
    """Render ground truth from the clean and injected Gaussians of a scene."""
    scene = generate_synthetic(spec)
    g = scene.all_gaussians
    images = [render_view(g, cam, retain=False).color.clamp(0, 1) for cam in scene.cameras]
    test = held_out_views(scene.cameras, spec.held_out)
    train = [i for i in range(len(images)) if i not in test]
    rng = np.random.default_rng(spec.seed + 1)
    pts = scene.clean.means.numpy() + rng.normal(scale=spec.point_noise, size=(len(scene.clean), 3))
    names = [c.name for c in scene.cameras]
    return scene, Dataset(scene.cameras, images, names, train, test, pts)
