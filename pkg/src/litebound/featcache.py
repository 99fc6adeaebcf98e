"""Binary on-disk cache of projected distillation targets.

Layout (little-endian)::

    magic       4s   b"LBFT"
    version     u16
    height      u32
    width       u32
    depth       u32  distillation width D
    proj_seed   u64
    fingerprint 32s  sha256 of the teacher bank
    semantic    float32[height * width * depth]  row-major
    boundary    float32[height * width * depth]
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .teachers import DistillTarget

MAGIC = b"LBFT"
VERSION = 1
HEADER = struct.Struct("<4sHIIIQ32s")
SUFFIX = ".lbft"


class CacheFormatError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


def entry_path(directory: str | Path, sample_id: str) -> Path:
    return Path(directory) / f"{sample_id}{SUFFIX}"


def cache_write(directory: str | Path, sample_id: str, target: DistillTarget, fingerprint: bytes) -> Path:
    if len(fingerprint) != 32:
        raise ValueError("teacher fingerprint must be 32 bytes")
    sem = np.ascontiguousarray(target.semantic, dtype="<f4")
    bnd = np.ascontiguousarray(target.boundary, dtype="<f4")
    if sem.shape != bnd.shape or sem.ndim != 3:
        raise ValueError(f"bad target shapes {sem.shape}, {bnd.shape}")
    h, w, d = sem.shape
    header = HEADER.pack(MAGIC, VERSION, h, w, d, target.projection_seed, fingerprint)
    path = entry_path(directory, sample_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(SUFFIX + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(sem.tobytes())
        fh.write(bnd.tobytes())
    os.replace(tmp, path)
    return path


def read_header(path: str | Path) -> tuple[int, int, int, int, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER.size)
    if len(raw) != HEADER.size:
        raise CacheFormatError(f"{path}: truncated header")
    magic, version, h, w, d, seed, fp = HEADER.unpack(raw)
    if magic != MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CacheFormatError(f"{path}: unsupported version {version}")
    return h, w, d, seed, fp


def cache_read(directory: str | Path, sample_id: str, fingerprint: bytes | None = None) -> DistillTarget:
    path = entry_path(directory, sample_id)
    h, w, d, seed, fp = read_header(path)
    if fingerprint is not None and fp != fingerprint:
        raise StaleCacheError(f"{path}: written by a different teacher bank")
    payload = path.read_bytes()[HEADER.size :]
    n = h * w * d
    if len(payload) != 2 * 4 * n:
        raise CacheFormatError(
            f"{path}: header declares {h}x{w}x{d} but payload holds {len(payload)} bytes"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    sem = flat[:n].reshape(h, w, d).astype(np.float32)
    bnd = flat[n:].reshape(h, w, d).astype(np.float32)
    return DistillTarget(sem, bnd, seed)


def is_valid_entry(
    directory: str | Path, sample_id: str, fingerprint: bytes, depth: int, seed: int
) -> bool:
    path = entry_path(directory, sample_id)
    if not path.exists():
        return False
    try:
        h, w, d, s, fp = read_header(path)
    except CacheFormatError:
        return False
    return (
        fp == fingerprint
        and d == depth
        and s == seed
        and path.stat().st_size == HEADER.size + 8 * h * w * d
    )
