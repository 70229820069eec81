"""Binary checkpoint container for decoder parameters and Adam state.

Layout (little-endian)::

    "SXF1" | u16 version | 32-byte sha256 of the canonical config JSON
    u32 entry count
    per entry: u16 name length | name (utf-8) | u8 rank | rank x u32 extents | float32 values
    "META" | u32 length | config JSON (utf-8)

Adam moments live under ``__adam__/m/<param>`` and ``__adam__/v/<param>``;
the step count and hyper-parameters under ``__adam__/step`` and friends.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import FormatError, atomic_write
from .tensor import AdamState

MAGIC = b"SXF1"
VERSION = 1
META_MAGIC = b"META"
ADAM_PREFIX = "__adam__/"


class CheckpointError(FormatError):
    pass


def canonical_json(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode()


def config_digest(config: dict) -> bytes:
    return hashlib.sha256(canonical_json(config)).digest()


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def digest(self) -> bytes:
        return config_digest(self.config)

    @property
    def kind(self) -> str:
        return self.config.get("kind", "")

    def tables(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update(self.extra)
        if self.adam is not None:
            a = self.adam
            out[ADAM_PREFIX + "step"] = np.array(a.step_count, dtype=np.float32)
            out[ADAM_PREFIX + "lr"] = np.array(a.learning_rate, dtype=np.float32)
            for k in sorted(a.first_moment):
                out[f"{ADAM_PREFIX}m/{k}"] = a.first_moment[k]
                out[f"{ADAM_PREFIX}v/{k}"] = a.second_moment[k]
        return out


def _pack_entry(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    arr = np.asarray(arr, dtype="<f4")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr).tobytes())


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(ckpt.digest)
    tables = ckpt.tables()
    buf.write(struct.pack("<I", len(tables)))
    for name in tables:
        _pack_entry(buf, name, tables[name])
    meta = canonical_json(ckpt.config)
    buf.write(META_MAGIC + struct.pack("<I", len(meta)) + meta)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))


def decode(data: bytes, adam_defaults: AdamState | None = None) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    (count,) = r.unpack("I")
    tables = {}
    for _ in range(count):
        (n,) = r.unpack("H")
        name = r.take(n).decode()
        (rank,) = r.unpack("B")
        shape = r.unpack(f"{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        tables[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    config = {}
    if r.pos < len(data):
        if r.take(4) != META_MAGIC:
            raise CheckpointError("unexpected trailing bytes")
        (n,) = r.unpack("I")
        config = json.loads(r.take(n).decode())
        if config_digest(config) != digest:
            raise CheckpointError("config digest does not match the stored configuration")

    params, extra = {}, {}
    adam = None
    if ADAM_PREFIX + "step" in tables:
        base = adam_defaults or AdamState()
        adam = AdamState(learning_rate=float(tables[ADAM_PREFIX + "lr"]), beta1=base.beta1,
                         beta2=base.beta2, epsilon=base.epsilon,
                         step_count=int(tables[ADAM_PREFIX + "step"]))
    for name, arr in tables.items():
        if name.startswith(ADAM_PREFIX + "m/"):
            adam.first_moment[name[len(ADAM_PREFIX) + 2:]] = arr.copy()
        elif name.startswith(ADAM_PREFIX + "v/"):
            adam.second_moment[name[len(ADAM_PREFIX) + 2:]] = arr.copy()
        elif name.startswith(ADAM_PREFIX):
            continue
        elif name.startswith("__"):
            extra[name] = arr
        else:
            params[name] = arr
    return Checkpoint(config, params, adam, extra)


def save(path, ckpt: Checkpoint) -> None:
    with atomic_write(path) as fh:
        fh.write(encode(ckpt))


def load(path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return decode(p.read_bytes())
