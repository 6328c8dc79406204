"""On-disk formats: RTF1 tensors and checkpoint bundles.

RTF1 layout::

    b"RTF1" | u32 rank | rank x u32 extents | float32 payload (all little-endian)

Checkpoint layout::

    b"DNLCKPT\\0" | u32 version | u32 manifest_len | manifest JSON (utf-8) | payload

The manifest lists ``{"name", "shape", "offset", "length"}`` per tensor, with
offsets relative to the start of the payload, where each tensor is stored as
a complete RTF1 blob.  Arbitrary JSON metadata rides along under ``"meta"``.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ExtentMismatchError, MalformedHeaderError, MissingFileError
from .tensor import Tensor

RTF_MAGIC = b"RTF1"
CKPT_MAGIC = b"DNLCKPT\0"
CKPT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def encode_rtf(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    header = RTF_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()


def decode_rtf(buf: bytes, source=None) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != RTF_MAGIC:
        raise MalformedHeaderError(f"not an RTF1 stream: {source or '<bytes>'}", source)
    (rank,) = struct.unpack_from("<I", buf, 4)
    header_len = 8 + 4 * rank
    if len(buf) < header_len:
        raise MalformedHeaderError(
            f"RTF1 header truncated (rank {rank} needs {header_len} bytes, have {len(buf)}): {source or '<bytes>'}",
            source,
        )
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(shape, dtype=np.int64))
    payload = len(buf) - header_len
    if payload != 4 * count:
        raise ExtentMismatchError(
            f"RTF1 extents {shape} need {4 * count} payload bytes, found {payload}: {source or '<bytes>'}",
            source,
        )
    data = np.frombuffer(buf, dtype=_LE_F32, count=count, offset=header_len)
    return data.astype(np.float32).reshape(shape)


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"file not found: {path}", path)
    return path.read_bytes()


def save_slice(path, array) -> None:
    """Write an array (any rank) as RTF1.  Values are stored as float32."""
    Path(path).write_bytes(encode_rtf(array.data if isinstance(array, Tensor) else array))


def load_slice(path) -> np.ndarray:
    return decode_rtf(_read_bytes(path), source=path)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus JSON metadata.  Output bytes depend only on the inputs."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        blob = encode_rtf(arr)
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"version": CKPT_VERSION, "meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode()
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = _read_bytes(path)
    head = len(CKPT_MAGIC) + 8
    if len(buf) < head or buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise MalformedHeaderError(f"not a checkpoint file: {path}", path)
    version, mlen = struct.unpack_from("<II", buf, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise MalformedHeaderError(f"unsupported checkpoint version {version}: {path}", path)
    if len(buf) < head + mlen:
        raise MalformedHeaderError(f"checkpoint manifest truncated: {path}", path)
    try:
        manifest = json.loads(buf[head : head + mlen])
    except ValueError as exc:
        raise MalformedHeaderError(f"checkpoint manifest is not valid JSON: {path}", path) from exc
    payload = buf[head + mlen :]
    tensors = {}
    for e in manifest["tensors"]:
        blob = payload[e["offset"] : e["offset"] + e["length"]]
        arr = decode_rtf(blob, source=f"{path}:{e['name']}")
        if list(arr.shape) != list(e["shape"]):
            raise ExtentMismatchError(f"tensor {e['name']} shape {arr.shape} != manifest {e['shape']}", path)
        tensors[e["name"]] = arr
    return tensors, manifest.get("meta", {})
