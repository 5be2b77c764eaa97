"""``F3CK`` checkpoint container: JSON config plus named float32 tensors.

Layout (little-endian)::

    "F3CK" | u16 version | u32 config_len | config JSON (UTF-8)
    u32 n_sections
    per section: u16 name_len | name | u8 dtype tag | u8 ndim | u32 dims... | f32 data
    u32 CRC32 of everything before it
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

MAGIC = b"F3CK"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4")}


class CheckpointError(Exception):
    code = "F3CK_ERROR"


class CRCMismatchError(CheckpointError):
    code = "F3CK_CRC"


class UnknownSectionError(CheckpointError):
    code = "F3CK_UNKNOWN_SECTION"


class ShapeMismatchError(CheckpointError):
    code = "F3CK_SHAPE"


class CheckpointVersionError(CheckpointError):
    code = "F3CK_VERSION"


@dataclass
class Checkpoint:
    config: dict
    sections: dict[str, np.ndarray] = field(default_factory=dict)


def _canonical_json(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blob = _canonical_json(ckpt.config)
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob,
             struct.pack("<I", len(ckpt.sections))]
    for name, arr in ckpt.sections.items():
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", 0, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(raw: bytes, sections: set[str] | None = None) -> Checkpoint:
    """Parse a checkpoint; ``sections`` restricts which tensors are materialized."""
    if raw[:4] != MAGIC:
        raise CheckpointError("not an F3CK checkpoint")
    if len(raw) < 14:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CRCMismatchError("checkpoint CRC32 mismatch")
    version, clen = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    off = 10
    config = json.loads(body[off:off + clen].decode("utf-8"))
    off += clen
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nl].decode("utf-8")
        off += nl
        tag, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        dt = DTYPE_TAGS.get(tag)
        if dt is None:
            raise CheckpointError(f"section {name!r}: unknown dtype tag {tag}")
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if sections is None or name in sections:
            out[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape).copy()
        off += size
    if off != len(body):
        raise CheckpointError("trailing bytes after last section")
    if sections is not None:
        missing = sorted(set(sections) - set(out))
        if missing:
            raise UnknownSectionError(f"sections not in checkpoint: {missing}")
    return Checkpoint(config, out)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path, sections: set[str] | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), sections)


def module_sections(module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().astype("<f4") for k, v in module.state_dict().items()}


def load_into_module(module, sections: dict[str, np.ndarray], prefix: str = "",
                     strict: bool = True) -> None:
    """Copy ``prefix``-named sections into ``module``; errors name the offending section."""
    state = module.state_dict()
    wanted = {k[len(prefix):]: v for k, v in sections.items() if k.startswith(prefix)}
    for key, arr in wanted.items():
        if key not in state:
            raise UnknownSectionError(f"section {prefix + key!r} has no matching parameter")
        if tuple(state[key].shape) != tuple(arr.shape):
            raise ShapeMismatchError(
                f"section {prefix + key!r}: checkpoint shape {tuple(arr.shape)} "
                f"!= model shape {tuple(state[key].shape)}"
            )
    if strict:
        missing = sorted(set(state) - set(wanted))
        if missing:
            raise UnknownSectionError(f"checkpoint lacks sections {[prefix + m for m in missing]}")
    with torch.no_grad():
        for key, arr in wanted.items():
            state[key].copy_(torch.from_numpy(arr))
