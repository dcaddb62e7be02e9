"""Binary checkpoint container for model, EMA, and optimizer tensors.

Layout (all little-endian):

    magic   8s   "SDCKPT\\0\\0"
    version u32  = 1
    config  6 x u32: in_channels, n_feat, n_cfeat, height, width,
                     time_embed_dim
    sched   u32 T, f64 beta1, f64 betaT
    count   u32 number of tensors
    tensor  u16 name length, utf-8 name bytes, u8 ndim, u32 x ndim dims,
            float32 payload in C order

Standard checkpoints carry the model parameters plus optimizer state under
``adam/m/...``, ``adam/v/...`` and scalars under ``meta/...``; EMA
checkpoints carry only the shadow parameters.  Loaders that just need a
model read the plain-named tensors and ignore the prefixed sections.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .contextunet import ModelConfig
from .errors import FileFormatError

MAGIC = b"SDCKPT\0\0"
VERSION = 1

_HEAD_FMT = "<8sI6IIddI"
_HEAD_SIZE = struct.calcsize(_HEAD_FMT)


def save_checkpoint(
    path,
    cfg: ModelConfig,
    schedule_params: tuple[int, float, float],
    tensors: dict[str, np.ndarray],
) -> None:
    T, beta1, betaT = schedule_params
    parts = [
        struct.pack(
            _HEAD_FMT,
            MAGIC,
            VERSION,
            cfg.in_channels,
            cfg.n_feat,
            cfg.n_cfeat,
            cfg.height,
            cfg.width,
            cfg.time_embed_dim,
            T,
            beta1,
            betaT,
            len(tensors),
        )
    ]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Returns (ModelConfig, (T, beta1, betaT), {name: float32 array})."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEAD_SIZE:
        raise FileFormatError(
            f"{path}: truncated header, expected {_HEAD_SIZE} bytes, got {len(raw)}"
        )
    (magic, version, cin, nf, nc, h, w, ted, T, b1, bT, count) = struct.unpack(
        _HEAD_FMT, raw[:_HEAD_SIZE]
    )
    if magic != MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    cfg = ModelConfig(
        in_channels=cin, n_feat=nf, n_cfeat=nc, height=h, width=w,
        time_embed_dim=ted,
    )
    tensors: dict[str, np.ndarray] = {}
    off = _HEAD_SIZE
    for _ in range(count):
        if off + 2 > len(raw):
            raise FileFormatError(f"{path}: truncated at tensor name length")
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        if off + 1 > len(raw):
            raise FileFormatError(f"{path}: truncated at {name!r} ndim")
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        nbytes = int(np.prod(dims, dtype=np.int64)) * 4 if ndim else 4
        if off + nbytes > len(raw):
            raise FileFormatError(
                f"{path}: tensor {name!r} payload needs {nbytes} bytes, "
                f"only {len(raw) - off} remain"
            )
        tensors[name] = (
            np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off)
            .reshape(dims)
            .copy()
        )
        off += nbytes
    if off != len(raw):
        raise FileFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return cfg, (T, b1, bT), tensors
