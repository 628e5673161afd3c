"""Binary dataset and checkpoint containers.

Dataset (little-endian)::

    "MOCD" | version u16 | count u32 | height u16 | width u16 | channels u16
    count x (class-id u16 | domain-id u8 | pixels u8[h*w*c], row-major, channel-last)

Checkpoint (little-endian)::

    "MOCE" | version u16 | config-length u32 | config JSON (UTF-8)
    repeated: name-length u16 | name | rank u8 | extents u32[rank] | f32 payload
    CRC-32 (u32) of every preceding byte
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

DATASET_MAGIC = b"MOCD"
CHECKPOINT_MAGIC = b"MOCE"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1

_DS_HEADER = struct.Struct("<4sHIHHH")
_CK_HEADER = struct.Struct("<4sHI")


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionSkewError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    images: np.ndarray  # (n, h, w, c) uint8
    labels: np.ndarray  # (n,) class ids
    domains: np.ndarray  # (n,) domain ids

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        n = len(self.images)
        if self.images.ndim != 4 or self.labels.shape != (n,) or self.domains.shape != (n,):
            raise FormatError("images must be (n, h, w, c) with one label and domain per image")

    def __len__(self) -> int:
        return len(self.images)

    def float_images(self) -> np.ndarray:
        return self.images.astype(np.float64) / 255.0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.domains[idx])

    def where_domain(self, domain: int) -> "Dataset":
        return self.subset(np.nonzero(self.domains == domain)[0])


def _record_dtype(h: int, w: int, c: int) -> np.dtype:
    return np.dtype([("label", "<u2"), ("domain", "u1"), ("pixels", "u1", (h, w, c))])


def dataset_bytes(ds: Dataset) -> bytes:
    n, h, w, c = ds.images.shape
    rec = np.zeros(n, dtype=_record_dtype(h, w, c))
    rec["label"] = ds.labels
    rec["domain"] = ds.domains
    rec["pixels"] = ds.images
    return _DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, h, w, c) + rec.tobytes()


def write_dataset(path, ds: Dataset) -> None:
    atomic_write(path, dataset_bytes(ds))


def parse_dataset(raw: bytes) -> Dataset:
    if len(raw) < _DS_HEADER.size:
        raise TruncatedFileError("dataset header is incomplete")
    magic, version, n, h, w, c = _DS_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise BadMagicError(f"not a dataset file (magic {magic!r})")
    if version != DATASET_VERSION:
        raise VersionSkewError(f"dataset format version {version} is not supported "
                               f"(expected {DATASET_VERSION})")
    dt = _record_dtype(h, w, c)
    expected = _DS_HEADER.size + n * dt.itemsize
    if len(raw) < expected:
        raise TruncatedFileError(f"dataset file has {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise FormatError(f"dataset file has {len(raw) - expected} trailing bytes")
    rec = np.frombuffer(raw, dtype=dt, count=n, offset=_DS_HEADER.size)
    return Dataset(rec["pixels"].copy(), rec["label"].astype(np.int64),
                   rec["domain"].astype(np.int64))


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.config == other.config and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blob = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    parts = [_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)), blob]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, checkpoint_bytes(ckpt))


def _parse_tensors(raw: bytes, offset: int, end: int) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}

    def take(size):
        nonlocal offset
        if offset + size > end:
            raise TruncatedFileError(f"checkpoint ends inside a tensor record at byte {offset}")
        chunk = raw[offset:offset + size]
        offset += size
        return chunk

    while offset < end:
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
    return tensors


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < _CK_HEADER.size + 4:
        raise TruncatedFileError("checkpoint header is incomplete")
    magic, version, cfg_len = _CK_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise VersionSkewError(f"checkpoint format version {version} is not supported "
                               f"(expected {CHECKPOINT_VERSION})")
    end = len(raw) - 4
    start = _CK_HEADER.size + cfg_len
    crc_ok = zlib.crc32(raw[:end]) & 0xFFFFFFFF == struct.unpack_from("<I", raw, end)[0]
    if start > end:
        if crc_ok:
            raise FormatError("config blob length exceeds the file")
        raise TruncatedFileError("checkpoint ends inside the config blob")
    if not crc_ok:
        # tell truncation apart from corruption by walking the structure
        _parse_tensors(raw, start, end)
        raise ChecksumError("checkpoint CRC-32 mismatch")
    config = json.loads(raw[_CK_HEADER.size:start].decode("utf-8"))
    return Checkpoint(config, _parse_tensors(raw, start, end))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
