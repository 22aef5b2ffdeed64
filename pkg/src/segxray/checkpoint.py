"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"SEGX"                       magic
    uint32 format_version
    uint32 header length in bytes
    header                        canonical JSON: arch, parameter names/shapes, training_meta
    float32 blobs                 one per parameter, declaration order, C order
    32 bytes                      SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .zoo import ArchSpec, Network, build_model

MAGIC = b"SEGX"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arch: ArchSpec
    parameters: dict[str, np.ndarray]
    training_meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_network(cls, network: Network, training_meta=None) -> "Checkpoint":
        params = {k: np.asarray(v, dtype=np.float32) for k, v in network.parameters().items()}
        return cls(network.arch, params, dict(training_meta or {}))

    def to_network(self, dtype=np.float32) -> Network:
        net = build_model(self.arch, 0, dtype=dtype)
        expected = {k: v.shape for k, v in net.parameters().items()}
        got = {k: v.shape for k, v in self.parameters.items()}
        if expected != got:
            raise CheckpointError("checkpoint parameters do not match its architecture")
        net.load_parameters(self.parameters)
        return net


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "arch": ckpt.arch.to_dict(),
        "parameters": [[name, list(v.shape)] for name, v in ckpt.parameters.items()],
        "training_meta": ckpt.training_meta,
    }
    head = _canonical(header)
    parts = [MAGIC, struct.pack("<II", ckpt.format_version, len(head)), head]
    for v in ckpt.parameters.values():
        parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 44 or data[:4] != MAGIC:
        raise CheckpointError("not a SEGX checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format_version {version}, expected {FORMAT_VERSION}")
    header = json.loads(body[12:12 + hlen])
    offset = 12 + hlen
    params = {}
    for name, shape in header["parameters"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset).reshape(shape)
        params[name] = arr.astype(np.float32)
        offset += 4 * n
    if offset != len(body):
        raise CheckpointError("trailing bytes after parameter blobs")
    return Checkpoint(ArchSpec(**header["arch"]), params, header["training_meta"], version)


def save(ckpt: Checkpoint, path) -> str:
    data = to_bytes(ckpt)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def sha256_of(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    return from_bytes(p.read_bytes())


def as_network(model, dtype=None) -> Network:
    """Accept a Network, Checkpoint, or checkpoint path.

    Networks keep their dtype unless ``dtype`` is given; loaded checkpoints
    default to float32.
    """
    if isinstance(model, Network):
        return model if dtype is None or np.dtype(dtype) == model.graph.dtype else model.astype(dtype)
    if isinstance(model, (str, Path)):
        model = load(model)
    if isinstance(model, Checkpoint):
        return model.to_network(np.float32 if dtype is None else dtype)
    raise TypeError(f"cannot interpret {type(model).__name__} as a network")
