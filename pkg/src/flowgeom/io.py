"""File formats: RFT1 tensors, CSV/JSONL emission and checkpoint archives."""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

TENSOR_MAGIC = b"RFT1"
CHECKPOINT_VERSION = "flowgeom-ckpt/1"


class TensorFormatError(ValueError):
    pass


class CheckpointVersionError(RuntimeError):
    pass


def write_tensor(path, dims: Sequence[int], values) -> None:
    """Write a float32 little-endian tensor with an ``RFT1`` header."""
    dims = [int(d) for d in dims]
    if not dims:
        raise ValueError("dims must be nonempty")
    if any(d < 0 for d in dims):
        raise ValueError("dims must be non-negative")
    arr = np.asarray(values, dtype="<f4").reshape(-1)
    if arr.size != math.prod(dims):
        raise ValueError(f"dims {dims} need {math.prod(dims)} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("values must be finite")
    header = TENSOR_MAGIC + struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}Q", *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> tuple[list[int], np.ndarray]:
    """Read an ``RFT1`` file; returns ``(dims, values)`` with values shaped by dims."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != TENSOR_MAGIC:
        raise TensorFormatError("malformed header: bad magic")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank == 0:
        raise TensorFormatError("malformed header: rank 0")
    off = 8 + 8 * rank
    if len(raw) < off:
        raise TensorFormatError("malformed header: truncated dims")
    dims = list(struct.unpack_from(f"<{rank}Q", raw, 8))
    count = math.prod(dims)
    payload = len(raw) - off
    if payload < 4 * count:
        raise TensorFormatError(f"payload short: expected {4 * count} bytes, got {payload}")
    if payload > 4 * count:
        raise TensorFormatError(f"payload long: expected {4 * count} bytes, got {payload}")
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims).copy()
    if not np.all(np.isfinite(values)):
        raise TensorFormatError("non-finite payload")
    return dims, values


def _fmt(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


def emit_csv(rows: Sequence[Mapping[str, Any]], path, columns: Sequence[str] | None = None) -> None:
    """Write rows as CSV with LF endings; floats get 6 significant digits.

    Column order follows ``columns`` or, if omitted, the key order of the
    first row.  Every row must carry exactly the same key set.
    """
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    columns = list(columns)
    keyset = set(columns)
    for i, row in enumerate(rows):
        if set(row.keys()) != keyset:
            raise ValueError(f"row {i} has columns {sorted(row)} but expected {sorted(keyset)}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return obj


def emit_jsonl(records: Iterable[Mapping[str, Any]], path, append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for rec in records:
            fh.write(json.dumps(to_jsonable(rec)) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    """Store named arrays plus a JSON metadata blob in one ``.npz`` archive.

    Arrays keep their dtype, so a load returns bit-identical buffers.
    """
    payload = {f"a/{k}": np.asarray(v) for k, v in arrays.items()}
    blob = json.dumps({"version": CHECKPOINT_VERSION, **to_jsonable(dict(meta))})
    payload["meta"] = np.frombuffer(blob.encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as npz:
        if "meta" not in npz.files:
            raise CheckpointVersionError("not a checkpoint: missing metadata")
        meta = json.loads(npz["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint version {meta.get('version')!r} != {CHECKPOINT_VERSION!r}"
            )
        arrays = {k[2:]: npz[k] for k in npz.files if k.startswith("a/")}
    return arrays, meta
