"""Checkpoint container (``.xmdc``) and parameter averaging.

Binary layout, all integers little-endian::

    b"XMDC" | version u32 | config digest (32 bytes) | count u32
    count x ( name_len u16 | name utf-8 | rank u8 | dims u64 x rank | float64 payload )

Non-parameter state rides in the same record list under reserved names:
``__step__`` (rank-0) and, when optimizer state is saved, ``__opt__.t``,
``__opt__.m.<param>`` and ``__opt__.v.<param>``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_bytes
from .errors import ContractError, IncompatibleCheckpointError, ParseError

MAGIC = b"XMDC"
VERSION = 1
STEP_KEY = "__step__"
OPT_PREFIX = "__opt__."


@dataclass
class OptimState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimState":
        return cls({n: np.zeros_like(a) for n, a in params.items()},
                   {n: np.zeros_like(a) for n, a in params.items()}, 0)

    def copy(self) -> "OptimState":
        return OptimState({n: a.copy() for n, a in self.m.items()},
                          {n: a.copy() for n, a in self.v.items()}, self.t)


@dataclass
class Checkpoint:
    step: int
    params: dict
    config_digest: bytes = b"\0" * 32
    opt: OptimState | None = field(default=None)

    def content_digest(self) -> bytes:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.digest()


def _records(ckpt: Checkpoint):
    yield STEP_KEY, np.array(float(ckpt.step))
    yield from ckpt.params.items()
    if ckpt.opt is not None:
        yield OPT_PREFIX + "t", np.array(float(ckpt.opt.t))
        for name in ckpt.params:
            yield f"{OPT_PREFIX}m.{name}", ckpt.opt.m[name]
            yield f"{OPT_PREFIX}v.{name}", ckpt.opt.v[name]


def dump_checkpoint(ckpt: Checkpoint) -> bytes:
    if len(ckpt.config_digest) != 32:
        raise ContractError("config digest must be 32 bytes")
    records = list(_records(ckpt))
    out = bytearray(MAGIC + struct.pack("<I", VERSION) + ckpt.config_digest + struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)


def parse_checkpoint(blob: bytes) -> Checkpoint:
    def need(pos, n, what):
        if pos + n > len(blob):
            raise ParseError(f"checkpoint truncated at byte offset {len(blob)} while reading {what}")

    need(0, 44, "header")
    if blob[:4] != MAGIC:
        raise ParseError("not an XMDC checkpoint: bad magic at byte offset 0")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ParseError(f"unsupported XMDC version {version}")
    digest = blob[8:40]
    (count,) = struct.unpack_from("<I", blob, 40)
    pos = 44
    records = {}
    for i in range(count):
        need(pos, 2, f"record {i} name length")
        (n_name,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(pos, n_name + 1, f"record {i} name")
        name = blob[pos:pos + n_name].decode("utf-8")
        pos += n_name
        rank = blob[pos]
        pos += 1
        need(pos, 8 * rank, f"record {name!r} dims")
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(pos, 8 * size, f"record {name!r} payload")
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * size
        if name in records:
            raise ParseError(f"duplicate record {name!r}")
        records[name] = arr
    if pos != len(blob):
        raise ParseError(f"{len(blob) - pos} trailing bytes after record {count - 1} at byte offset {pos}")
    if STEP_KEY not in records:
        raise ParseError("checkpoint lacks a step record")
    step = int(records.pop(STEP_KEY))
    opt_t = records.pop(OPT_PREFIX + "t", None)
    params = {n: a for n, a in records.items() if not n.startswith(OPT_PREFIX)}
    opt = None
    if opt_t is not None:
        opt = OptimState({n: records[f"{OPT_PREFIX}m.{n}"] for n in params},
                         {n: records[f"{OPT_PREFIX}v.{n}"] for n in params}, int(opt_t))
    return Checkpoint(step=step, params=params, config_digest=bytes(digest), opt=opt)


def save_checkpoint(path, ckpt: Checkpoint):
    atomic_write_bytes(path, dump_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def average_checkpoints(checkpoints) -> Checkpoint:
    """Elementwise parameter mean; optimizer state is dropped.

    Inputs are put in a canonical order first, so the result does not depend
    on the order of the list, and K copies of one checkpoint average to it
    bitwise.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise IncompatibleCheckpointError("nothing to average")
    first = checkpoints[0]
    for c in checkpoints[1:]:
        if set(c.params) != set(first.params):
            raise IncompatibleCheckpointError("checkpoints have different parameter names")
        for name, arr in first.params.items():
            if c.params[name].shape != arr.shape:
                raise IncompatibleCheckpointError(f"parameter {name}: shape {c.params[name].shape} != {arr.shape}")
        if c.config_digest != first.config_digest:
            raise IncompatibleCheckpointError("checkpoints come from different configs")
    ordered = sorted(checkpoints, key=lambda c: (c.step, c.content_digest()))
    ref = ordered[0]
    k = len(ordered)
    params = {}
    for name in first.params:
        base = np.asarray(ref.params[name], dtype=np.float64)
        delta = np.zeros_like(base)
        for c in ordered[1:]:
            delta += c.params[name] - base
        # zero delta means the mean is exactly base; np.where keeps a signed zero intact
        params[name] = np.where(delta == 0.0, base, base + delta / k)
    return Checkpoint(step=max(c.step for c in ordered), params=params, config_digest=first.config_digest)
