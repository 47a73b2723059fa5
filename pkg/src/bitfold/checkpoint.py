"""Binary checkpoint format.

Little-endian layout: magic `BFCK`, version u32, config echo (u32 length +
UTF-8 text), training step u64, rng-state echo (u32 length + UTF-8 JSON),
parameter count u32, then per-parameter records {u32 name length, name,
u32 rank, u32 dims..., float64 payload}. Loading verifies the config echo
against the caller's config so an architecture mismatch fails loudly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import InvalidConfig, ParseError

MAGIC = b"BFCK"
VERSION = 1


def _pack_str(text):
    data = text.encode("utf-8")
    return struct.pack("<I", len(data)) + data


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ParseError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def string(self):
        return self.take(self.u32()).decode("utf-8")


def save_checkpoint(path, params, config_text, step=0, rng_state=None):
    """Write named f64 tensors plus config/step/rng-state echoes.

    `params` maps name -> Tensor (or ndarray)."""
    chunks = [MAGIC, struct.pack("<I", VERSION), _pack_str(config_text),
              struct.pack("<Q", step), _pack_str(json.dumps(rng_state or {}, default=int)),
              struct.pack("<I", len(params))]
    for name in sorted(params):
        value = params[name]
        arr = np.ascontiguousarray(getattr(value, "data", value), dtype="<f8")
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path, expected_config=None):
    """Returns (tensors dict, config_text, step, rng_state).

    If `expected_config` is given, the stored config echo must match it
    exactly or InvalidConfig is raised."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != MAGIC:
        raise ParseError("not a BFCK checkpoint")
    version = reader.u32()
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    config_text = reader.string()
    if expected_config is not None and config_text != expected_config:
        raise InvalidConfig("checkpoint config does not match the loaded config")
    step = reader.u64()
    rng_state = json.loads(reader.string())
    tensors = {}
    for _ in range(reader.u32()):
        name = reader.string()
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = reader.take(8 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return tensors, config_text, step, rng_state


def restore_parameters(module, tensors, prefix=""):
    """Copy stored arrays into a Module's parameters in place; names must
    match exactly."""
    params = module.parameters(prefix=prefix)
    missing = set(params) - set(tensors)
    extra = set(tensors) - set(params)
    if missing or extra:
        raise InvalidConfig(
            f"parameter names mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}"
        )
    for name, tensor in params.items():
        stored = tensors[name]
        if stored.shape != tensor.data.shape:
            raise InvalidConfig(f"{name}: shape {stored.shape} vs {tensor.data.shape}")
        tensor.data[...] = stored
