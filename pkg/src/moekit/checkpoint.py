"""Single-file checkpoint format: header + index + raw little-endian payload.

Layout:

    bytes 0..3   magic  b"MKCP"
    bytes 4..5   format version (uint16 LE)
    bytes 6..9   JSON header length (uint32 LE)
    ...          JSON header: config digest + ordered parameter index
    ...          concatenated parameter payloads, little-endian

The config digest ties a checkpoint to the architecture that produced it;
loads against a different architecture are refused. Round-trips are
bit-exact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, DigestError, FormatError
from .tensor import Tensor

MAGIC = b"MKCP"
VERSION = 1

_DTYPES = {"f4": "<f4", "f8": "<f8"}


def config_digest(cfg) -> str:
    """sha256 over the canonical JSON form of a config dataclass."""
    doc = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    """A named parameter tree plus the digest of the config it belongs to."""

    digest: str
    params: dict[str, np.ndarray]

    @classmethod
    def from_params(cls, params: dict[str, Tensor], cfg) -> "Checkpoint":
        return cls(config_digest(cfg),
                   {name: np.array(t.data) for name, t in params.items()})

    def to_tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {name: Tensor(arr.copy(), requires_grad=requires_grad)
                for name, arr in self.params.items()}


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise FormatError(f"unsupported checkpoint dtype {arr.dtype}")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = []
    payloads = []
    for name, arr in ckpt.params.items():
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code,
                        "shape": list(arr.shape), "nbytes": len(raw)})
        payloads.append(raw)
    header = json.dumps({"config_digest": ckpt.digest, "params": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path, expect_digest: str | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 10:
        raise CorruptionError("checkpoint file too short")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", blob[6:10])
    if len(blob) < 10 + hlen:
        raise CorruptionError("checkpoint header truncated")
    try:
        header = json.loads(blob[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable checkpoint header: {exc}") from exc
    digest = header.get("config_digest")
    entries = header.get("params")
    if not isinstance(digest, str) or not isinstance(entries, list):
        raise CorruptionError("checkpoint header missing fields")
    if expect_digest is not None and digest != expect_digest:
        raise DigestError(
            f"checkpoint config digest {digest[:12]}... does not match "
            f"expected {expect_digest[:12]}...")
    params: dict[str, np.ndarray] = {}
    offset = 10 + hlen
    for entry in entries:
        name, code, shape, nbytes = (entry["name"], entry["dtype"],
                                     tuple(entry["shape"]), entry["nbytes"])
        if name in params:
            raise CorruptionError(f"duplicate parameter name {name!r}")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code!r}")
        if offset + nbytes > len(blob):
            raise CorruptionError(f"payload truncated at parameter {name!r}")
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype=_DTYPES[code])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise CorruptionError(f"payload length mismatch for {name!r}")
        params[name] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CorruptionError("trailing bytes after final payload")
    return Checkpoint(digest, params)
