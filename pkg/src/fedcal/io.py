"""Persistence for sample sets (binary ``FCSS`` container and JSON) and results."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .sampling import PosteriorSampleSet

MAGIC = b"FCSS"
VERSION = 1
_HEAD = struct.Struct("<4sI")
_IDS = struct.Struct("<qqII")


class FormatError(ValueError):
    pass


class MissingFileError(FileNotFoundError):
    """A required input file is absent; ``filename`` holds its path."""

    def __init__(self, message: str, path):
        super().__init__(message)
        self.filename = str(path)

    def __str__(self):
        return self.args[0]


def encode_sample_set(s: PosteriorSampleSet) -> bytes:
    """Layout (little-endian): magic, u32 version, u32 fingerprint length,
    fingerprint utf-8, i64 client id, i64 seed, u32 sample count, u32
    parameter count, then count*dim float64 values sample-major."""
    fp = s.fingerprint.encode()
    arr = s.as_array()
    return b"".join([
        _HEAD.pack(MAGIC, VERSION),
        struct.pack("<I", len(fp)),
        fp,
        _IDS.pack(s.client_id, s.seed, arr.shape[0], arr.shape[1]),
        arr.astype("<f8").tobytes(),
    ])


def decode_sample_set(blob: bytes) -> PosteriorSampleSet:
    if len(blob) < _HEAD.size + 4 or blob[:4] != MAGIC:
        raise FormatError("not an FCSS sample-set container")
    _, version = _HEAD.unpack_from(blob, 0)
    if version != VERSION:
        raise FormatError(f"unsupported FCSS version {version}")
    off = _HEAD.size
    (fp_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    fp = blob[off:off + fp_len].decode()
    off += fp_len
    client_id, seed, count, dim = _IDS.unpack_from(blob, off)
    off += _IDS.size
    expected = off + 8 * count * dim
    if len(blob) != expected:
        raise FormatError(f"FCSS payload has {len(blob)} bytes, expected {expected}")
    arr = np.frombuffer(blob, dtype="<f8", offset=off).reshape(count, dim).astype(np.float64)
    return PosteriorSampleSet(list(arr), client_id, fp, seed)


def sample_set_to_json(s: PosteriorSampleSet) -> str:
    return json.dumps({
        "format": "FCSS",
        "version": VERSION,
        "fingerprint": s.fingerprint,
        "client_id": s.client_id,
        "seed": s.seed,
        "samples": [x.tolist() for x in s.samples],
    })


def sample_set_from_json(text: str) -> PosteriorSampleSet:
    d = json.loads(text)
    if d.get("format") != "FCSS" or d.get("version") != VERSION:
        raise FormatError("not a version-1 FCSS JSON document")
    return PosteriorSampleSet(
        [np.array(x, dtype=np.float64) for x in d["samples"]],
        int(d["client_id"]), d["fingerprint"], int(d["seed"]),
    )


def write_sample_set(path, s: PosteriorSampleSet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        path.write_text(sample_set_to_json(s))
    else:
        path.write_bytes(encode_sample_set(s))
    return path


def read_sample_set(path) -> PosteriorSampleSet:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing sample-set file: {path}", path)
    if path.suffix == ".json":
        return sample_set_from_json(path.read_text())
    return decode_sample_set(path.read_bytes())


def dump_json(obj) -> str:
    """Canonical JSON: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(obj))
    return path


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing artifact: {path}", path)
    return json.loads(path.read_text())
