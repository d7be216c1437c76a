"""Checkpoint container I/O and task vectors.

File layout (little-endian throughout)::

    u64 N | N bytes JSON header | raw tensor data

The header maps each tensor name to ``{"dtype", "shape", "data_offsets"}``
with offsets relative to the start of the data section. An optional
``__metadata__`` entry holds a flat string-to-string map. This is the
safetensors layout restricted to ``F32`` and ``F64``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "Checkpoint",
    "TaskVector",
    "ContainerFormatError",
    "ArchitectureMismatchError",
    "load_checkpoint",
    "save_checkpoint",
    "compute_task_vector",
    "apply_task_vector",
    "check_compatible",
    "FILE_SUFFIX",
]

FILE_SUFFIX = ".ckpt.st"
METADATA_KEY = "__metadata__"

_DTYPE_TO_NP = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
_NP_TO_DTYPE = {np.dtype("float32"): "F32", np.dtype("float64"): "F64"}


class ContainerFormatError(ValueError):
    """Malformed container; ``position`` is the byte offset where parsing failed."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at byte {position})")
        self.reason = message
        self.position = position


class ArchitectureMismatchError(ValueError):
    def __init__(self, message: str, names: Iterable[str]):
        self.names = sorted(names)
        super().__init__(f"{message}: {', '.join(self.names)}")


@dataclass
class Checkpoint:
    """Named, ordered map of tensors for one model."""

    name: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for key, value in self.tensors.items():
            arr = np.asarray(value)
            if arr.dtype not in _NP_TO_DTYPE:
                raise TypeError(f"tensor {key!r} has unsupported dtype {arr.dtype}")
            self.tensors[key] = arr

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def __contains__(self, key: str) -> bool:
        return key in self.tensors

    def keys(self):
        return self.tensors.keys()

    def items(self):
        return self.tensors.items()

    def __len__(self) -> int:
        return len(self.tensors)

    def bit_equal(self, other: "Checkpoint") -> bool:
        """Same names, shapes, dtypes and identical bytes."""
        if set(self.tensors) != set(other.tensors):
            return False
        for key, a in self.tensors.items():
            b = other.tensors[key]
            if a.dtype != b.dtype or a.shape != b.shape:
                return False
            if np.ascontiguousarray(a).tobytes() != np.ascontiguousarray(b).tobytes():
                return False
        return True


@dataclass
class TaskVector:
    task_id: str
    deltas: dict[str, np.ndarray]

    def __getitem__(self, key: str) -> np.ndarray:
        return self.deltas[key]


def _header_bytes(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str]):
    header: dict[str, object] = {}
    offset = 0
    # data is laid out in sorted-name order so the file is a pure function of content
    for name in sorted(tensors):
        arr = tensors[name]
        nbytes = arr.size * arr.dtype.itemsize
        header[name] = {
            "dtype": _NP_TO_DTYPE[arr.dtype],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + nbytes],
        }
        offset += nbytes
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    encoded = raw.encode("utf-8")
    # pad to 8-byte alignment with spaces, as safetensors writers do
    encoded += b" " * (-len(encoded) % 8)
    return encoded


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    for name, arr in ckpt.tensors.items():
        if arr.dtype not in _NP_TO_DTYPE:
            raise TypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    header = _header_bytes(ckpt.tensors, ckpt.metadata)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in sorted(ckpt.tensors):
            arr = ckpt.tensors[name]
            little = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            fh.write(little.tobytes())


def _default_name(path: Path) -> str:
    name = path.name
    if name.endswith(FILE_SUFFIX):
        return name[: -len(FILE_SUFFIX)]
    return path.stem


def load_checkpoint(path: str | os.PathLike, name: str | None = None) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8:
        raise ContainerFormatError("truncated header length field", len(blob))
    (header_len,) = struct.unpack("<Q", blob[:8])
    data_start = 8 + header_len
    if data_start > len(blob):
        raise ContainerFormatError("truncated header", len(blob))
    try:
        header = json.loads(blob[8:data_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = 8 + getattr(exc, "pos", getattr(exc, "start", 0))
        raise ContainerFormatError(f"malformed header: {exc}", pos) from None
    if not isinstance(header, dict):
        raise ContainerFormatError("malformed header: not a JSON object", 8)

    metadata = header.pop(METADATA_KEY, {}) or {}
    if not isinstance(metadata, dict):
        raise ContainerFormatError("malformed header: __metadata__ is not an object", 8)

    data_len = len(blob) - data_start
    spans = []
    tensors: dict[str, np.ndarray] = {}
    for tname, info in header.items():
        if not isinstance(info, dict) or not {"dtype", "shape", "data_offsets"} <= info.keys():
            raise ContainerFormatError(f"malformed header entry for {tname!r}", 8)
        dtype = _DTYPE_TO_NP.get(info["dtype"])
        if dtype is None:
            raise ContainerFormatError(f"unknown dtype {info['dtype']!r} for {tname!r}", 8)
        shape = info["shape"]
        offsets = info["data_offsets"]
        if (
            not isinstance(shape, list)
            or not all(isinstance(s, int) and s >= 0 for s in shape)
            or not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and o >= 0 for o in offsets)
        ):
            raise ContainerFormatError(f"malformed shape or offsets for {tname!r}", 8)
        begin, end = offsets
        count = int(np.prod(shape, dtype=np.int64))
        if end < begin or end - begin != count * dtype.itemsize:
            raise ContainerFormatError(
                f"data_offsets of {tname!r} do not match shape {shape}", data_start + begin
            )
        if end > data_len:
            raise ContainerFormatError(f"truncated data for {tname!r}", len(blob))
        spans.append((begin, end, tname))
        if count:
            buf = np.frombuffer(blob, dtype=dtype, count=count, offset=data_start + begin)
            tensors[tname] = buf.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
        else:
            tensors[tname] = np.zeros(shape, dtype=dtype.newbyteorder("="))

    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise ContainerFormatError(f"overlapping offsets for {n0!r} and {n1!r}", data_start + b1)

    ordered = {k: tensors[k] for k in sorted(tensors)}
    return Checkpoint(name=name or _default_name(path), tensors=ordered, metadata=dict(metadata))


def check_compatible(a: Checkpoint, b: Checkpoint) -> None:
    """Raise ArchitectureMismatchError unless names, shapes and dtypes agree."""
    bad = set(a.tensors) ^ set(b.tensors)
    for key in set(a.tensors) & set(b.tensors):
        x, y = a.tensors[key], b.tensors[key]
        if x.shape != y.shape or x.dtype != y.dtype:
            bad.add(key)
    if bad:
        raise ArchitectureMismatchError(
            f"checkpoints {a.name!r} and {b.name!r} are not architecture-compatible", bad
        )


def compute_task_vector(pretrained: Checkpoint, fine_tuned: Checkpoint, task_id: str) -> TaskVector:
    """Per-tensor differences ``fine_tuned - pretrained``, held in float64.

    For float32 inputs the float64 difference is exact, so adding it back to
    the pretrained tensor and rounding to float32 recovers the fine-tuned
    tensor bit for bit.
    """
    check_compatible(pretrained, fine_tuned)
    deltas = {
        k: fine_tuned[k].astype(np.float64) - pretrained[k].astype(np.float64)
        for k in pretrained.keys()
    }
    return TaskVector(task_id=task_id, deltas=deltas)


def apply_task_vector(pretrained: Checkpoint, tv: TaskVector, scale: float = 1.0,
                      name: str | None = None) -> Checkpoint:
    missing = set(pretrained.keys()) ^ set(tv.deltas)
    if missing:
        raise ArchitectureMismatchError("task vector does not match checkpoint", missing)
    out = {}
    for k, w0 in pretrained.items():
        if tv.deltas[k].shape != w0.shape:
            raise ArchitectureMismatchError("task vector shape mismatch", [k])
        out[k] = (w0.astype(np.float64) + scale * tv.deltas[k]).astype(w0.dtype)
    return Checkpoint(name=name or f"{pretrained.name}+{tv.task_id}", tensors=out)
