"""Checkpoint files: model config plus float32 tensors, identified by a digest.

Layout (little-endian)::

    b"MGCF" | version u8 | depth, dim, kernel, mixtures, mlp_ratio u32 |
    channels u8 | out_proj u8 | tensors in declaration order (f32) |
    sha256(all preceding bytes)[:8]
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError, FormatError
from .model import ModelConfig, param_shapes

MAGIC = b"MGCF"
VERSION = 1
_CONFIG = struct.Struct("<IIIIIBB")
DIGEST_BYTES = 8


def _digest(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()[:DIGEST_BYTES]


def checkpoint_bytes(params: dict, cfg: ModelConfig) -> bytes:
    head = MAGIC + bytes([VERSION]) + _CONFIG.pack(
        cfg.depth, cfg.dim, cfg.kernel, cfg.mixtures, cfg.mlp_ratio, cfg.channels,
        int(cfg.out_proj))
    body = b"".join(np.ascontiguousarray(params[name], dtype="<f4").tobytes()
                    for name in param_shapes(cfg))
    payload = head + body
    return payload + _digest(payload)


def parse_checkpoint(data: bytes):
    """``(params, cfg, digest)`` from checkpoint bytes; verifies the digest."""
    fixed = len(MAGIC) + 1 + _CONFIG.size
    if len(data) < fixed + DIGEST_BYTES or data[:4] != MAGIC:
        raise FormatError("not a model checkpoint")
    if data[4] != VERSION:
        raise FormatError(f"unsupported checkpoint version {data[4]}")
    payload, digest = data[:-DIGEST_BYTES], data[-DIGEST_BYTES:]
    if _digest(payload) != digest:
        raise CorruptCheckpointError("checkpoint digest mismatch")
    depth, dim, kernel, mixtures, ratio, channels, out_proj = _CONFIG.unpack_from(data, 5)
    cfg = ModelConfig(depth=depth, dim=dim, kernel=kernel, mixtures=mixtures,
                      mlp_ratio=ratio, channels=channels, out_proj=bool(out_proj))
    params, pos = {}, fixed
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        if pos + 4 * n > len(payload):
            raise CorruptCheckpointError("checkpoint tensors are truncated")
        params[name] = np.frombuffer(payload, "<f4", n, pos).astype(np.float32).reshape(shape)
        pos += 4 * n
    if pos != len(payload):
        raise CorruptCheckpointError("trailing bytes after checkpoint tensors")
    return params, cfg, digest


def checkpoint_digest(params: dict, cfg: ModelConfig) -> bytes:
    return checkpoint_bytes(params, cfg)[-DIGEST_BYTES:]


def save_checkpoint(path, params: dict, cfg: ModelConfig) -> bytes:
    data = checkpoint_bytes(params, cfg)
    Path(path).write_bytes(data)
    return data[-DIGEST_BYTES:]


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
