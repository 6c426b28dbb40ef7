"""EMAC checkpoint files.

Layout: ``b"EMAC"``, u32 LE version, u32 LE header length, a UTF-8 JSON header
(``params``: ordered names and shapes, ``hyper``: free-form record), then the
parameters as float32 LE in header order.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .density import FormatError

MAGIC = b"EMAC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, np.ndarray], hyper: dict) -> None:
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()]
    header = json.dumps({"params": entries, "hyper": hyper}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(path, 0, f"bad checkpoint magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError(path, len(raw), "truncated checkpoint header")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(path, 4, f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(path, 12, f"unreadable JSON header: {exc}") from None
    offset = 12 + hlen
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        if offset + 4 * n > len(raw):
            raise FormatError(path, offset, f"data for {entry['name']} runs past end of file")
        params[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += 4 * n
    if offset != len(raw):
        raise FormatError(path, offset, f"{len(raw) - offset} trailing bytes")
    return params, header.get("hyper", {})


def assign(named: Mapping, stored: Mapping[str, np.ndarray]) -> None:
    """Copy stored arrays into live parameters, checking names and shapes."""
    missing = [k for k in named if k not in stored]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter {missing[0]!r}")
    extra = [k for k in stored if k not in named]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameter {extra[0]!r}")
    for k, t in named.items():
        if tuple(stored[k].shape) != tuple(t.shape):
            raise CheckpointError(f"parameter {k!r}: checkpoint shape {stored[k].shape} vs model {t.shape}")
    for k, t in named.items():
        t.data = np.array(stored[k], dtype=np.float64)
