"""Versioned binary checkpoints with bit-exact round trips.

Layout (all integers little-endian)::

    magic   8 bytes  b"NOLABCK\\0"
    version u32
    sections, each: tag (4 ascii bytes), length u64, payload
        HEAD  JSON header (sorted keys)
        PRMS  float64 parameter arrays, in header order
        BANK  float64 noise templates (empty when there is no bank)
        OPTM  float64 momentum buffers, in header order
        RNGS  master seed u64, epoch u64
    crc32   u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import Model, build_model
from .noise import NoiseBank
from .tensor import Tensor
from .train import TrainState

MAGIC = b"NOLABCK\0"
VERSION = 1
SECTIONS = (b"HEAD", b"PRMS", b"BANK", b"OPTM", b"RNGS")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    state: TrainState
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def arch(self) -> str:
        return self.state.model.arch


def _f64(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def encode(state: TrainState, seed: int, extra: dict | None = None) -> bytes:
    model, bank = state.model, state.bank
    header = {
        "arch": model.arch,
        "classes": model.classes,
        "input_shape": list(model.input_shape),
        "options": {k: list(v) if isinstance(v, tuple) else v for k, v in model.options.items()},
        "params": [[k, list(p.shape)] for k, p in model.params.items()],
        "bank": None if bank is None else {"shape": list(bank.templates.shape), "mode": bank.mode, "grad_filter": bank.grad_filter},
        "velocity": [[k, list(v.shape)] for k, v in sorted(state.velocity.items())],
        "epoch": state.epoch,
        "extra": extra or {},
    }
    payloads = {
        b"HEAD": json.dumps(header, sort_keys=True, separators=(",", ":")).encode(),
        b"PRMS": _f64(p.data for p in model.params.values()),
        b"BANK": b"" if bank is None else _f64([bank.templates]),
        b"OPTM": _f64(v for _, v in sorted(state.velocity.items())),
        b"RNGS": struct.pack("<QQ", seed, state.epoch),
    }
    body = MAGIC + struct.pack("<I", VERSION)
    for tag in SECTIONS:
        body += tag + struct.pack("<Q", len(payloads[tag])) + payloads[tag]
    return body + struct.pack("<I", zlib.crc32(body))


def _take(buf: memoryview, offset: int, shapes) -> tuple[list[np.ndarray], int]:
    out = []
    for shape in shapes:
        n = int(np.prod(shape)) * 8
        out.append(np.frombuffer(buf[offset : offset + n], dtype="<f8").reshape(shape).astype(np.float64))
        offset += n
    return out, offset


def decode(raw: bytes, expect_arch: str | None = None) -> Checkpoint:
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a nolab checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint payload is corrupt (CRC mismatch)")
    pos = len(MAGIC) + 4
    sections = {}
    for tag in SECTIONS:
        if raw[pos : pos + 4] != tag:
            raise CheckpointError(f"expected section {tag.decode()} at byte {pos}")
        (n,) = struct.unpack_from("<Q", raw, pos + 4)
        pos += 12
        sections[tag] = memoryview(body)[pos : pos + n]
        pos += n
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last section")
    head = json.loads(bytes(sections[b"HEAD"]))
    if expect_arch is not None and head["arch"] != expect_arch:
        raise CheckpointError(f"checkpoint holds architecture {head['arch']!r}, expected {expect_arch!r}")

    model = build_model(head["arch"], head["classes"], tuple(head["input_shape"]), 0, **head["options"])
    shapes = [tuple(s) for _, s in head["params"]]
    arrays, used = _take(sections[b"PRMS"], 0, shapes)
    if used != len(sections[b"PRMS"]) or [k for k, _ in head["params"]] != list(model.params):
        raise CheckpointError("parameter section does not match the architecture")
    for (name, _), a in zip(head["params"], arrays):
        model.params[name] = Tensor(a, requires_grad=True, name=name)

    bank = None
    if head["bank"] is not None:
        (tpl,), _ = _take(sections[b"BANK"], 0, [tuple(head["bank"]["shape"])])
        bank = NoiseBank(tpl, head["bank"]["mode"], head["bank"]["grad_filter"])
    vel, _ = _take(sections[b"OPTM"], 0, [tuple(s) for _, s in head["velocity"]])
    seed, epoch = struct.unpack("<QQ", bytes(sections[b"RNGS"]))
    if epoch != head["epoch"]:
        raise CheckpointError("epoch counter disagrees between header and RNG section")
    state = TrainState(model, bank, {k: v for (k, _), v in zip(head["velocity"], vel)}, epoch)
    return Checkpoint(state, seed, head["extra"])


def save_checkpoint(state: TrainState, path, seed: int, extra: dict | None = None) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(state, seed, extra))
    tmp.replace(path)
    return path


def load_checkpoint(path, expect_arch: str | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expect_arch)


def source_model(path, expect_arch: str | None = None) -> tuple[Model, NoiseBank | None]:
    ck = load_checkpoint(path, expect_arch)
    return ck.state.model, ck.state.bank
