"""Image files.

PPM (P6): ASCII header ``P6\\n<width> <height>\\n255\\n`` followed by
width*height*3 bytes, row-major from the top-left pixel, RGB order.

PGM (P5) depth: header ``P5\\n<width> <height>\\n65535\\n`` followed by
width*height big-endian uint16 samples (netpbm convention); the sample is
round(depth / max_depth * 65535), with max_depth recorded in a ``#`` comment
line after the magic.

PNG is read and written through Pillow.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import torch

from .errors import ParseError

_HEADER = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def to_uint8(img):
    a = img.detach().double().clamp(0, 1).cpu().numpy() if torch.is_tensor(img) else np.clip(np.asarray(img, np.float64), 0, 1)
    return np.floor(a * 255 + 0.5).astype(np.uint8)


def write_ppm(path, img):
    a = to_uint8(img)
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(a[..., :3]).tobytes())


def _read_netpbm(data, magic, path):
    if not data.startswith(magic):
        raise ParseError(f"not a {magic.decode()} file", path)
    m = _HEADER.match(data, len(magic))
    if not m:
        raise ParseError("malformed netpbm header", path)
    w, h, maxval = (int(g) for g in m.groups())
    return w, h, maxval, data[m.end():]


def read_ppm(path):
    data = Path(path).read_bytes()
    w, h, maxval, body = _read_netpbm(data, b"P6", path)
    if maxval != 255:
        raise ParseError(f"unsupported PPM maxval {maxval}", path)
    if len(body) < w * h * 3:
        raise ParseError("truncated PPM payload", path)
    a = np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return torch.from_numpy(a.astype(np.float64) / 255.0)


def write_depth_pgm(path, depth, max_depth=None):
    d = depth.detach().double().cpu().numpy() if torch.is_tensor(depth) else np.asarray(depth, np.float64)
    md = float(d.max()) if max_depth is None else float(max_depth)
    md = md if md > 0 else 1.0
    q = np.floor(np.clip(d / md, 0, 1) * 65535 + 0.5).astype(">u2")
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(b"P5\n# max_depth %r\n%d %d\n65535\n" % (md, w, h))
        f.write(q.tobytes())


def read_depth_pgm(path):
    data = Path(path).read_bytes()
    m = re.search(rb"# max_depth (\S+)", data[:200])
    md = float(m.group(1)) if m else 1.0
    w, h, maxval, body = _read_netpbm(data, b"P5", path)
    q = np.frombuffer(body[: w * h * 2], dtype=">u2").reshape(h, w)
    return torch.from_numpy(q.astype(np.float64) / maxval * md)


def read_image(path):
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(a)


def write_image(path, img):
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(to_uint8(img)).save(path)
    else:
        write_ppm(path, img)
