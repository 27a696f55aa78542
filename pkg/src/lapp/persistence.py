"""On-disk formats: binary checkpoints, metrics logs, JSONL datasets and a run-directory lock."""

from __future__ import annotations

import csv
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotation import pair_hash
from .preference_model import PreferenceTriple, TrajectorySegment

MAGIC = b"LAPPCKPT"
CHECKPOINT_VERSION = 1
ENDIAN_MARKER = 0x01020304


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _crc(data):
    return zlib.crc32(data) & 0xFFFFFFFF


def encode_checkpoint(ckpt):
    """Serialize to bytes.

    Layout (little-endian): magic, u32 version, u32 endian marker, u64 meta
    length, meta JSON, u32 meta crc, u32 array count, then per array: u16 name
    length, name, u8 ndim, u64 dims, u64 payload length, float64 payload, u32
    payload crc.  A trailing u32 crc covers every preceding byte.
    """
    parts = [MAGIC, struct.pack("<II", ckpt.version, ENDIAN_MARKER)]
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<Q", len(meta)), meta, struct.pack("<I", _crc(meta))]
    parts.append(struct.pack("<I", len(ckpt.arrays)))
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name], dtype="<f8", order="C")
        key = name.encode("utf-8")
        payload = arr.tobytes()
        parts += [
            struct.pack("<H", len(key)),
            key,
            struct.pack("<B", arr.ndim),
            struct.pack(f"<{arr.ndim}Q", *arr.shape),
            struct.pack("<Q", len(payload)),
            payload,
            struct.pack("<I", _crc(payload)),
        ]
    body = b"".join(parts)
    return body + struct.pack("<I", _crc(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data):
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (total,) = data[:-4], struct.unpack("<I", data[-4:])
    if _crc(body) != total:
        raise CheckpointError("checkpoint checksum mismatch (file is corrupt or truncated)")
    r = _Reader(body)
    r.take(len(MAGIC))
    version, marker = r.unpack("<II")
    if marker != ENDIAN_MARKER:
        raise CheckpointError("checkpoint endianness marker is invalid")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    (meta_len,) = r.unpack("<Q")
    meta_bytes = r.take(meta_len)
    if r.unpack("<I")[0] != _crc(meta_bytes):
        raise CheckpointError("checkpoint metadata checksum mismatch")
    meta = json.loads(meta_bytes.decode("utf-8"))
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        (plen,) = r.unpack("<Q")
        payload = r.take(plen)
        if r.unpack("<I")[0] != _crc(payload):
            raise CheckpointError(f"checksum mismatch in array {name!r}")
        expected = 8 * int(np.prod(shape, dtype=np.int64))
        if plen != expected:
            raise CheckpointError(f"array {name!r} holds {plen} bytes, shape {shape} needs {expected}")
        arrays[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(body):
        raise CheckpointError("unexpected trailing bytes in checkpoint")
    return Checkpoint(meta, arrays, version)


def save_checkpoint(ckpt, path):
    """Write atomically: a crash mid-write never leaves a half file at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


# metrics


class MetricsLogger:
    """Append-only metrics in JSONL and CSV; epochs must increase strictly.

    Passing ``resume_epoch`` drops rows at or after that epoch, which were
    written after the checkpoint being resumed.
    """

    def __init__(self, out_dir, label="lapp", resume_epoch=None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.jsonl_path = self.out_dir / f"metrics_{label}.jsonl"
        self.csv_path = self.out_dir / f"metrics_{label}.csv"
        self.columns = None
        self.last_epoch = -1
        rows = []
        if resume_epoch is not None and self.jsonl_path.exists():
            rows = [r for r in read_metrics(self.jsonl_path) if r["epoch"] < resume_epoch]
        self.jsonl_path.write_text("")
        self.csv_path.write_text("")
        for row in rows:
            self.log(row)

    def log(self, row):
        epoch = int(row["epoch"])
        if epoch <= self.last_epoch:
            raise ValueError(f"metrics epoch {epoch} does not follow {self.last_epoch}")
        if self.columns is None:
            self.columns = ["epoch"] + sorted(k for k in row if k != "epoch")
            with open(self.csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow(self.columns)
        extra = set(row) - set(self.columns)
        if extra:
            raise ValueError(f"unexpected metric columns {sorted(extra)}")
        clean = {"epoch": epoch}
        clean.update({k: float(row.get(k, math.nan)) for k in self.columns[1:]})
        with open(self.jsonl_path, "a") as fh:
            fh.write(json.dumps(clean) + "\n")
        with open(self.csv_path, "a", newline="") as fh:
            csv.writer(fh).writerow([repr(clean[k]) if k != "epoch" else epoch for k in self.columns])
        self.last_epoch = epoch


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# JSONL datasets


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return out


def save_triples(path, triples):
    write_jsonl(path, [t.to_dict() for t in triples])


def load_triples(path):
    return [PreferenceTriple.from_dict(r) for r in read_jsonl(path)]


def save_pairs(path, pairs):
    write_jsonl(path, [{"pair_hash": pair_hash(a, b), "segment_a": a.to_dict(), "segment_b": b.to_dict()} for a, b in pairs])


def load_pairs(path):
    return [
        (TrajectorySegment.from_dict(r["segment_a"]), TrajectorySegment.from_dict(r["segment_b"])) for r in read_jsonl(path)
    ]


def save_labels(path, pairs, labels):
    write_jsonl(path, [{"pair_hash": pair_hash(a, b), "label": int(y)} for (a, b), y in zip(pairs, labels)])


# run directory lock


class RunLockError(RuntimeError):
    pass


class RunLock:
    """Exclusive lock file for an output directory."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / ".lock"
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockError(f"{self.path.parent} is in use by another run (remove {self.path} if stale)") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        self.path.unlink(missing_ok=True)
        return False
