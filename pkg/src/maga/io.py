"""On-disk formats: MAGT tensor dumps, checkpoints, netpbm images.

MAGT layout (all little-endian)::

    b"MAGT" | u32 version=1 | u32 rank | u64 extents[rank] | f64 payload (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"MAGT"
VERSION = 1


class FormatError(ValueError):
    pass


def dumps_tensor(arr):
    arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def loads_tensor(buf):
    if buf[:4] != MAGIC:
        raise FormatError("not a MAGT tensor dump (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported MAGT version {version}")
    off = 12 + 8 * rank
    shape = struct.unpack_from(f"<{rank}Q", buf, 12)
    n = int(np.prod(shape)) if rank else 1
    if len(buf) != off + 8 * n:
        raise FormatError(f"payload size mismatch for shape {shape}")
    return np.frombuffer(buf, dtype="<f8", offset=off, count=n).reshape(shape).astype(np.float64)


def save_tensor(path, arr):
    Path(path).write_bytes(dumps_tensor(arr))


def load_tensor(path):
    return loads_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------- checkpoints

def _fmt_shape(shape):
    return "x".join(str(n) for n in shape) or "scalar"


def _parse_shape(text):
    return () if text == "scalar" else tuple(int(n) for n in text.split("x"))


def save_checkpoint(directory, params, config_lines):
    """Write ``<name>.magt`` per parameter, ``manifest.txt`` and ``config.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = []
    for name, arr in params.items():
        save_tensor(d / f"{name}.magt", arr)
        manifest.append(f"{name} {_fmt_shape(arr.shape)} {params.roles.get(name, 'weight')}")
    (d / "manifest.txt").write_text("\n".join(manifest) + "\n")
    (d / "config.txt").write_text("".join(f"{line}\n" for line in config_lines))


def load_checkpoint(directory):
    """Return ``(params, roles, config_text)``; shapes are checked against the manifest."""
    d = Path(directory)
    params, roles = {}, {}
    for line in (d / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, shape, role = line.split()
        arr = load_tensor(d / f"{name}.magt")
        if arr.shape != _parse_shape(shape):
            raise FormatError(f"{name}: manifest says {shape}, file holds {_fmt_shape(arr.shape)}")
        params[name], roles[name] = arr, role
    return params, roles, (d / "config.txt").read_text()


# ---------------------------------------------------------------- netpbm

def _to_u8(x):
    return np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, rgb):
    """``rgb`` is 3 x H x W in [0, 1]; written as binary P6, maxval 255."""
    Image.fromarray(np.transpose(_to_u8(rgb), (1, 2, 0))).save(path, format="PPM")


def write_pgm(path, gray):
    """``gray`` is H x W (or 1 x H x W) in [0, 1]; written as binary P5."""
    g = np.asarray(gray)
    if g.ndim == 3:
        g = g[0]
    Image.fromarray(_to_u8(g)).save(path, format="PPM")


def read_ppm(path):
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected an RGB PPM, got mode {im.mode}")
        return np.transpose(np.asarray(im, dtype=np.float64) / 255.0, (2, 0, 1))


def read_pgm(path):
    with Image.open(path) as im:
        if im.mode != "L":
            raise FormatError(f"{path}: expected an 8-bit PGM, got mode {im.mode}")
        return np.asarray(im, dtype=np.float64) / 255.0


def encode_trimap(trimap):
    t = np.asarray(trimap)
    out = np.full(t.shape, 128, dtype=np.uint8)
    out[t == 0.0] = 0
    out[t == 1.0] = 255
    return out


def write_trimap(path, trimap):
    t = np.asarray(trimap)
    if t.ndim == 3:
        t = t[0]
    Image.fromarray(encode_trimap(t)).save(path, format="PPM")


def read_trimap(path):
    """Decode a {0, 128, 255} PGM into {0, 0.5, 1}; any other level is an error."""
    with Image.open(path) as im:
        raw = np.asarray(im)
    bad = ~np.isin(raw, (0, 128, 255))
    if bad.any():
        levels = sorted(set(np.unique(raw[bad]).tolist()))[:5]
        raise FormatError(f"{path}: trimap levels must be 0/128/255, found {levels}")
    return np.select([raw == 0, raw == 255], [0.0, 1.0], 0.5)
