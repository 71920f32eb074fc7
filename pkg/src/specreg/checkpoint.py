"""Binary checkpoint container.

Layout::

    b"SPECREG1"
    uint64 LE   manifest length N
    N bytes     UTF-8 JSON manifest: version, metadata, [{name, shape, offset}]
    payload     float64 little-endian tensors, offsets relative to payload start
    8 bytes     blake2b-64 digest of everything above

Floats in the manifest (metrics, config) go through ``json``, which writes the
shortest repr, so they round-trip exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .analyze import MetricsRecord
from .linalg import PowerIterState
from .nn import Network, format_layers, parse_layers
from .optim import OptState, TrainState

MAGIC = b"SPECREG1"
VERSION = 1
_LEN = struct.Struct("<Q")
_DIGEST = 8


class CheckpointError(RuntimeError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    input_shape: tuple[int, ...]
    layers: str
    params: dict[str, np.ndarray]
    spectral: dict[str, PowerIterState]
    velocity: dict[str, np.ndarray]
    step_count: int
    epoch: int
    seed: int
    config: dict[str, Any] = field(default_factory=dict)
    metrics: list[MetricsRecord] = field(default_factory=list)
    version: int = VERSION

    @classmethod
    def from_state(cls, state: TrainState, seed: int, config: dict[str, Any] | None = None) -> "Checkpoint":
        net = state.net
        return cls(
            input_shape=tuple(net.input_shape),
            layers=format_layers(net.layers),
            params={k: v.copy() for k, v in net.params.items()},
            spectral={k: s.copy() for k, s in state.spectral.items()},
            velocity={k: v.copy() for k, v in state.opt.velocity.items()},
            step_count=state.opt.step_count,
            epoch=state.opt.epoch,
            seed=seed,
            config=dict(config or {}),
            metrics=list(state.metrics),
        )

    def network(self) -> Network:
        return Network(self.input_shape, parse_layers(self.layers), {k: v.copy() for k, v in self.params.items()})

    def train_state(self) -> TrainState:
        return TrainState(
            net=self.network(),
            opt=OptState({k: v.copy() for k, v in self.velocity.items()}, self.step_count, self.epoch),
            spectral={k: s.copy() for k, s in self.spectral.items()},
            metrics=list(self.metrics),
        )


def _tensors(ck: Checkpoint):
    for k, v in ck.params.items():
        yield f"param/{k}", v
    for k, v in ck.velocity.items():
        yield f"velocity/{k}", v
    for k, s in ck.spectral.items():
        yield f"spectral/{k}/u", s.u
        yield f"spectral/{k}/v", s.v
        yield f"spectral/{k}/sigma", np.asarray(s.sigma)


def dumps(ck: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in _tensors(ck):
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    manifest = {
        "version": ck.version,
        "input_shape": list(ck.input_shape),
        "layers": ck.layers,
        "step_count": ck.step_count,
        "epoch": ck.epoch,
        "rng": {"seed": ck.seed, "epoch": ck.epoch},
        "reseeded": {k: s.reseeded for k, s in ck.spectral.items()},
        "config": ck.config,
        "metrics": [[*m.as_tuple()[:-1], list(m.per_layer_sigma)] for m in ck.metrics],
        "tensors": entries,
        "payload_bytes": offset,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = MAGIC + _LEN.pack(len(head)) + head + b"".join(chunks)
    return body + hashlib.blake2b(body, digest_size=_DIGEST).digest()


def loads(raw: bytes) -> Checkpoint:
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    if len(raw) < pos + _LEN.size + _DIGEST:
        raise TruncatedError(f"checkpoint truncated: {len(raw)} bytes")
    (n,) = _LEN.unpack_from(raw, pos)
    pos += _LEN.size
    if len(raw) < pos + n + _DIGEST:
        raise TruncatedError(f"checkpoint truncated inside manifest ({len(raw)} bytes, manifest needs {n})")
    try:
        manifest = json.loads(raw[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        # the checksum decides whether this is corruption or a foreign file
        if hashlib.blake2b(raw[:-_DIGEST], digest_size=_DIGEST).digest() != raw[-_DIGEST:]:
            raise ChecksumError("checkpoint checksum mismatch (corrupt manifest)") from exc
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    payload_start = pos + n
    expected = payload_start + int(manifest.get("payload_bytes", -1)) + _DIGEST
    if len(raw) < expected:
        raise TruncatedError(f"checkpoint size {len(raw)} bytes, manifest implies {expected}")
    if len(raw) != expected or hashlib.blake2b(raw[:-_DIGEST], digest_size=_DIGEST).digest() != raw[-_DIGEST:]:
        raise ChecksumError("checkpoint checksum mismatch")
    version = manifest.get("version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads version {VERSION}")

    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=payload_start + e["offset"])
        tensors[e["name"]] = arr.astype(np.float64).reshape(e["shape"])

    params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    velocity = {k[len("velocity/") :]: v for k, v in tensors.items() if k.startswith("velocity/")}
    spectral = {}
    for name, flag in manifest["reseeded"].items():
        spectral[name] = PowerIterState(
            v=tensors[f"spectral/{name}/v"],
            u=tensors[f"spectral/{name}/u"],
            sigma=float(tensors[f"spectral/{name}/sigma"]),
            reseeded=bool(flag),
        )
    metrics = [MetricsRecord(*row[:-1], per_layer_sigma=tuple(row[-1])) for row in manifest["metrics"]]
    return Checkpoint(
        input_shape=tuple(manifest["input_shape"]),
        layers=manifest["layers"],
        params=params,
        spectral=spectral,
        velocity=velocity,
        step_count=manifest["step_count"],
        epoch=manifest["epoch"],
        seed=manifest["rng"]["seed"],
        config=manifest["config"],
        metrics=metrics,
        version=version,
    )


def save(path, ck: Checkpoint) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(dumps(ck))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
