"""Versioned binary checkpoint container.

Layout: magic bytes, format version, a JSON config blob, the RNG position,
then named parameter tensors as little-endian float64 with explicit
shapes. Loading verifies structure section by section and reports which
section a corrupt file fails in.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError

MAGIC = b"DSPERTC\x01"
VERSION = 1


@dataclass
class Checkpoint:
    version: int
    config: dict  # run-config snapshot (model/train/data sections)
    params: dict[str, np.ndarray]
    rng_seed: int
    rng_position: int


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, section: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise IntegrityError(f"checkpoint truncated while reading {section}")
        out = self.blob[self.offset : self.offset + n]
        self.offset += n
        return out

    def u8(self, section: str) -> int:
        return self.take(1, section)[0]

    def u16(self, section: str) -> int:
        return struct.unpack("<H", self.take(2, section))[0]

    def u32(self, section: str) -> int:
        return struct.unpack("<I", self.take(4, section))[0]

    def u64(self, section: str) -> int:
        return struct.unpack("<Q", self.take(8, section))[0]


def save_checkpoint(
    path,
    config: dict,
    params: dict[str, np.ndarray],
    rng_seed: int = 0,
    rng_position: int = 0,
) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(blob)))
    parts.append(blob)
    parts.append(struct.pack("<QQ", rng_seed, rng_position))
    parts.append(struct.pack("<Q", len(params)))
    for name in sorted(params):
        array = np.asarray(params[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        reader = _Reader(f.read())
    if reader.take(len(MAGIC), "magic bytes") != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic bytes)")
    version = reader.u32("version")
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    config_len = reader.u64("config length")
    try:
        config = json.loads(reader.take(config_len, "config blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"corrupt config blob: {exc}") from None
    rng_seed = reader.u64("rng seed")
    rng_position = reader.u64("rng position")
    n_tensors = reader.u64("tensor count")
    params: dict[str, np.ndarray] = {}
    for index in range(n_tensors):
        section = f"tensor {index}"
        name_len = reader.u16(f"{section} name length")
        name = reader.take(name_len, f"{section} name").decode("utf-8")
        ndim = reader.u8(f"{section} rank")
        shape = tuple(
            struct.unpack(
                f"<{ndim}Q", reader.take(8 * ndim, f"{section} ({name}) shape")
            )
        )
        count = 1
        for extent in shape:
            count *= extent
        raw = reader.take(8 * count, f"{section} ({name}) data")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if reader.offset != len(reader.blob):
        raise IntegrityError(
            f"{len(reader.blob) - reader.offset} trailing bytes after last tensor"
        )
    return Checkpoint(
        version=version,
        config=config,
        params=params,
        rng_seed=rng_seed,
        rng_position=rng_position,
    )
