"""Versioned binary parameter container.

Layout::

    b"ADCK" | u32 version | u32 header bytes | JSON header (UTF-8) | float64 payload

All integers and values are little-endian. The header lists sections in payload
order; each section holds named tensors with explicit shapes. A section is one
named stack or module (``enhance``, ``head_vod``, ``decoder`` ...).
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .data import FormatError

MAGIC = b"ADCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def section_of(param_name: str) -> str:
    """``stacks.enhance.layers.0.a_re`` -> ``enhance``; ``head_vod.w1`` -> ``head_vod``."""
    parts = param_name.split(".")
    return parts[1] if parts[0] == "stacks" else parts[0]


def git_blob_sha1(data: bytes) -> str:
    """Content hash in the style of ``git hash-object``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def encode(tensors: "OrderedDict[str, np.ndarray]", meta: dict | None = None) -> bytes:
    sections: "OrderedDict[str, list]" = OrderedDict()
    chunks = []
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        sections.setdefault(section_of(name), []).append({"name": name, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps({"meta": meta or {}, "sections": [{"section": k, "tensors": v} for k, v in sections.items()]},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    if len(blob) < _PREFIX.size:
        raise FormatError("checkpoint too short for its header")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + header_len
    if len(blob) < start:
        raise FormatError("checkpoint header truncated")
    header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = start
    for section in header["sections"]:
        for entry in section["tensors"]:
            shape = tuple(entry["shape"])
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if offset + nbytes > len(blob):
                raise FormatError(f"payload truncated inside {entry['name']}")
            out[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy()
            offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after payload")
    return out, header["meta"]


def module_tensors(module: torch.nn.Module, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((prefix + name, p.detach().cpu().numpy()) for name, p in module.named_parameters())


def save(path, module: torch.nn.Module, meta: dict | None = None) -> str:
    """Write every parameter of ``module``; returns the content hash of the file."""
    blob = encode(module_tensors(module), meta)
    Path(path).write_bytes(blob)
    return git_blob_sha1(blob)


def load_into(module: torch.nn.Module, tensors: dict) -> None:
    params = dict(module.named_parameters())
    missing = sorted(set(params) - set(tensors))
    unexpected = sorted(set(tensors) - set(params))
    if missing or unexpected:
        raise FormatError(f"checkpoint does not match model: missing {missing[:3]}, unexpected {unexpected[:3]}")
    with torch.no_grad():
        for name, p in params.items():
            value = torch.as_tensor(tensors[name], dtype=p.dtype)
            if value.shape != p.shape:
                raise FormatError(f"{name}: shape {tuple(value.shape)} != {tuple(p.shape)}")
            p.copy_(value)


def read(path) -> tuple["OrderedDict[str, np.ndarray]", dict, str]:
    blob = Path(path).read_bytes()
    tensors, meta = decode(blob)
    return tensors, meta, git_blob_sha1(blob)


def section_hash(module: torch.nn.Module, section: str) -> str:
    """Hash of one section's tensors alone, e.g. to show the decoder stayed frozen."""
    tensors = OrderedDict((k, v) for k, v in module_tensors(module).items() if section_of(k) == section)
    return git_blob_sha1(encode(tensors))
