"""Chunked binary model files.

Layout (all integers little-endian)::

    magic    8 bytes  b"DYBNNMDL"
    version  u32      FORMAT_VERSION
    chunk*            u16 name length, name (utf-8), u64 payload length, payload
    "end"             empty payload, always last

Chunks, in order: ``config`` (canonical JSON of the model config), ``state``
(JSON: weight mode), then one ``param:<name>`` or ``buffer:<name>`` chunk per
array.  An array payload is ``u8 ndim``, ``ndim x u32`` dims, then float32 data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import config_from_dict
from .errors import FormatError, VersionError
from .network import Model, build_model

MAGIC = b"DYBNNMDL"
FORMAT_VERSION = 1
END = "end"


def _chunk(name: str, payload: bytes) -> bytes:
    raw = name.encode()
    return struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload


def _array_payload(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    header = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes()


def _parse_array(name, payload: bytes) -> np.ndarray:
    if len(payload) < 1:
        raise FormatError(name, "empty array payload")
    ndim = payload[0]
    end = 1 + 4 * ndim
    if len(payload) < end:
        raise FormatError(name, "truncated shape header")
    shape = struct.unpack(f"<{ndim}I", payload[1:end])
    count = int(np.prod(shape)) if ndim else 1
    if len(payload) - end != 4 * count:
        raise FormatError(name, f"expected {4 * count} data bytes, found {len(payload) - end}")
    return np.frombuffer(payload, dtype="<f4", offset=end, count=count).reshape(shape).astype(np.float32)


def model_bytes(model: Model) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(_chunk("config", model.cfg.canonical_text().encode()))
    state = {"weight_mode": model.weight_mode}
    parts.append(_chunk("state", json.dumps(state, sort_keys=True).encode()))
    for name, p in model.named_parameters().items():
        parts.append(_chunk(f"param:{name}", _array_payload(p.data)))
    for name, b in model.named_buffers().items():
        parts.append(_chunk(f"buffer:{name}", _array_payload(b)))
    parts.append(_chunk(END, b""))
    return b"".join(parts)


def save_model(model: Model, path) -> None:
    """Write ``model`` to ``path``.  Arrays are stored as float32."""
    Path(path).write_bytes(model_bytes(model))


def read_chunks(data: bytes):
    """Parse a model file into an ordered ``{name: payload}`` mapping."""
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise FormatError("header", "not a dybnn model file (bad magic)")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported model file version {version} (expected {FORMAT_VERSION})")
    pos = len(MAGIC) + 4
    chunks = {}
    last = "header"
    while True:
        if pos + 2 > len(data):
            raise FormatError(f"<after {last}>", "file truncated before the next chunk header")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + nlen > len(data):
            raise FormatError(f"<after {last}>", "file truncated inside a chunk name")
        name = data[pos : pos + nlen].decode("utf-8", errors="replace")
        pos += nlen
        if pos + 8 > len(data):
            raise FormatError(name, "file truncated inside the chunk length")
        (plen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if pos + plen > len(data):
            raise FormatError(name, f"incomplete chunk: expected {plen} bytes, found {len(data) - pos}")
        if name in chunks:
            raise FormatError(name, "duplicate chunk")
        chunks[name] = data[pos : pos + plen]
        pos += plen
        last = name
        if name == END:
            break
    if pos != len(data):
        raise FormatError(END, "trailing bytes after the end chunk")
    return chunks


def load_model(path, weight_mode=None, dtype=np.float32, kernel="dense") -> Model:
    """Load a model file.  ``weight_mode`` overrides the stored mode.

    Loading a real-weights checkpoint with ``weight_mode="binary"`` is how the
    second training phase inherits the first phase's parameters.
    """
    chunks = read_chunks(Path(path).read_bytes())
    for required in ("config", "state"):
        if required not in chunks:
            raise FormatError(required, "missing chunk")
    try:
        cfg = config_from_dict(json.loads(chunks["config"]))
        state = json.loads(chunks["state"])
    except (ValueError, TypeError) as exc:
        raise FormatError("config", f"unreadable: {exc}") from None
    model = build_model(cfg, weight_mode=weight_mode or state["weight_mode"], dtype=dtype, kernel=kernel)
    arrays = {}
    for name in model.named_parameters():
        key = f"param:{name}"
        if key not in chunks:
            raise FormatError(key, "missing chunk")
        arrays[name] = _parse_array(key, chunks[key])
    for name in model.named_buffers():
        key = f"buffer:{name}"
        if key not in chunks:
            raise FormatError(key, "missing chunk")
        arrays[name] = _parse_array(key, chunks[key])
    try:
        model.load_state_arrays(arrays)
    except ValueError as exc:
        raise FormatError("params", str(exc)) from None
    return model
