"""Versioned little-endian checkpoint files.

Layout::

    magic      8 bytes   b"GSFCKPT1"
    version    u32       1
    sections   u32       number of sections that follow
    section    repeated:
        name_len  u16, name (utf-8)
        dtype     u8     0 float32, 1 float64, 2 int64, 3 bool, 4 uint8, 5 int32
        ndim      u8, then ndim x u32 dims
        nbytes    u64, then the raw little-endian payload (C order)

Section ``meta`` is a uint8 array holding sorted-key JSON: the training
config, scene bounds, active levels and iteration. Every remaining section is a
model tensor (``state_dict`` order), followed by ``grid.<level>.vertex_anchor``
for each active level. Channels of a sampled tri-plane feature are laid out
as [xy base, xy attention, xz base, xz attention, yz base, yz attention].
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ParseError
from .model import ScaffoldModel
from .scene import SceneBounds

MAGIC = b"GSFCKPT1"
VERSION = 1
DTYPES = {
    torch.float32: (0, "<f4"), torch.float64: (1, "<f8"), torch.int64: (2, "<i8"),
    torch.bool: (3, "|b1"), torch.uint8: (4, "|u1"), torch.int32: (5, "<i4"),
}
CODES = {code: (dt, np_dt) for dt, (code, np_dt) in DTYPES.items()}


def _bounds_dict(b: SceneBounds):
    return {
        "aabb_min": [float(x) for x in b.aabb_min], "aabb_max": [float(x) for x in b.aabb_max],
        "centroid": [float(x) for x in b.centroid], "spatial_sigma": float(b.spatial_sigma),
        "unit": float(b.unit), "count": int(b.count),
    }


def _write_section(f, name, t: torch.Tensor):
    code, np_dt = DTYPES[t.dtype]
    raw = name.encode()
    a = np.ascontiguousarray(t.detach().cpu().numpy().astype(np_dt, copy=False))
    f.write(struct.pack("<H", len(raw)) + raw)
    f.write(struct.pack("<BB", code, a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    payload = a.tobytes()
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)


def encode(sections):
    """sections: list of (name, tensor) -> bytes."""
    f = io.BytesIO()
    f.write(MAGIC + struct.pack("<II", VERSION, len(sections)))
    for name, t in sections:
        _write_section(f, name, t)
    return f.getvalue()


def decode(data, path="<bytes>"):
    """bytes -> list of (name, tensor)."""
    if data[:8] != MAGIC:
        raise ParseError("not a checkpoint (bad magic)", path)
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path)
    off = 16
    out = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode()
            off += nlen
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", data, off)
            off += 8
            dt, np_dt = CODES[code]
            a = np.frombuffer(data[off : off + nbytes], dtype=np_dt).reshape(dims)
            off += nbytes
            out.append((name, torch.from_numpy(a.copy()).to(dt)))
    except (struct.error, KeyError, ValueError) as e:
        raise ParseError(f"corrupt checkpoint ({e})", path) from None
    return out


def model_sections(model: ScaffoldModel, config: dict, iteration=0):
    meta = {
        "config": config,
        "bounds": _bounds_dict(model.bounds),
        "levels": list(model.cscm.active),
        "iteration": int(iteration),
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    sections = [("meta", torch.frombuffer(bytearray(blob), dtype=torch.uint8))]
    sections += list(model.state_dict().items())
    for lv in model.cscm.levels:
        sections.append((f"grid.{lv.index}.vertex_anchor", lv.grid.vertex_anchor))
    return sections


def save_checkpoint(path, model: ScaffoldModel, config: dict, iteration=0):
    Path(path).write_bytes(encode(model_sections(model, config, iteration)))


def load_checkpoint(path):
    """Returns (model, meta)."""
    from .trainer import TrainConfig

    sections = decode(Path(path).read_bytes(), path)
    if not sections or sections[0][0] != "meta":
        raise ParseError("checkpoint has no meta section", path)
    meta = json.loads(bytes(sections[0][1].numpy()).decode())
    tensors = dict(sections[1:])
    cfg = TrainConfig.from_dict(meta["config"])
    b = meta["bounds"]
    bounds = SceneBounds(
        np.array(b["aabb_min"]), np.array(b["aabb_max"]), np.array(b["centroid"]),
        b["spatial_sigma"], b["unit"], b["count"],
    )
    positions = tensors["positions"]
    model = ScaffoldModel(positions.double().numpy(), bounds, cfg.model_config(), seed=cfg.seed, dtype=cfg.torch_dtype)
    for lvl in meta["levels"]:
        model.activate_level(lvl)
    state = {k: v for k, v in tensors.items() if not k.startswith("grid.")}
    model.load_state_dict(state)
    for lv in model.cscm.levels:
        key = f"grid.{lv.index}.vertex_anchor"
        if key in tensors:
            lv.grid.vertex_anchor = tensors[key]
    return model, meta
