"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"MMDCKPT\\x00"
    version      uint32    FORMAT_VERSION
    header_len   uint64
    header       header_len bytes of UTF-8 JSON (sorted keys, compact)
    payload      concatenated raw tensor bytes, little-endian

The header holds ``config`` (model config echo), ``meta`` (free-form),
``payload_sha256``, and ``tensors``: a list of ``{key, dtype, shape, offset,
nbytes}`` with keys of the form ``"group/name"``. Writing is deterministic,
so load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from mmdistill.model import ModelConfig, MultimodalModel, build_llm, build_projector, build_visual_encoder

MAGIC = b"MMDCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def encode(state: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for key in sorted(state):
        arr = np.asarray(state[key])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"key": key, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"config": config, "meta": meta or {}, "tensors": entries,
              "payload_sha256": hashlib.sha256(payload).hexdigest()}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + payload


def decode(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict, dict]:
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{source}: truncated checkpoint ({len(blob)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{source}: unsupported format version: expected {FORMAT_VERSION}, found {version}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise CheckpointError(f"{source}: truncated checkpoint header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt header: {e}") from None
    payload = blob[start:]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(
            f"{source}: truncated payload: expected {expected} bytes, found {len(payload)}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{source}: payload checksum mismatch")
    state = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
        state[e["key"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return state, header["config"], header["meta"]


def save_checkpoint(model: MultimodalModel, path: str | os.PathLike, meta: dict | None = None) -> None:
    """Write atomically: a crash never leaves a partial file at ``path``."""
    blob = encode(model.state_dict(), model.config.to_dict(), meta)
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint: {e.strerror}") from None
    return decode(blob, str(path))


def load_checkpoint(path: str | os.PathLike) -> tuple[MultimodalModel, dict]:
    state, config, meta = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(config)
    except TypeError as e:
        raise CheckpointError(f"{path}: config echo does not match this version: {e}") from None
    rng = np.random.default_rng(0)
    model = MultimodalModel(cfg, build_visual_encoder(cfg), build_projector(cfg, rng), build_llm(cfg, rng))
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from None
    return model, meta
