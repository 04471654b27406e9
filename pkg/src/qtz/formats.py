"""On-disk artifacts: a JSON manifest next to a raw little-endian blob.

``model.qtzm`` (manifest) and ``model.qtzm.blob`` (tensor data). Every tensor
section in the blob starts on a 64-byte boundary. The manifest carries the
format version, an artifact ``kind``, an optional graph and free-form metadata,
and a tensor table::

    {"format": "qtz-v1", "kind": "integer", "graph": {...}, "meta": {...},
     "tensors": [{"name": ..., "dtype": "i8", "shape": [...], "offset": 0,
                  "length": 144, "quant": {...} | null}, ...]}
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = "qtz-v1"
ALIGN = 64
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "i8": np.dtype("i1"), "i32": np.dtype("<i4")}
KINDS = ("float", "checkpoint", "weight_only", "integer")


class FormatError(ValueError):
    pass


@dataclass
class TensorEntry:
    array: np.ndarray
    quant: dict | None = None


@dataclass
class Artifact:
    kind: str
    tensors: dict[str, TensorEntry] = field(default_factory=dict)
    graph: dict | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def array(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name].array
        except KeyError:
            raise FormatError(f"artifact has no tensor {name!r}") from None

    def payload_bytes(self, names=None) -> int:
        names = self.tensors if names is None else names
        return sum(self.tensors[n].array.nbytes for n in names)


def dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in DTYPES.items():
        if arr.dtype.newbyteorder("<") == dt.newbyteorder("<") or arr.dtype == dt:
            return tag
    raise FormatError(f"unsupported tensor dtype {arr.dtype}; expected one of {sorted(DTYPES)}")


def blob_path(path) -> Path:
    return Path(os.fspath(path) + ".blob")


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def save(path, art: Artifact) -> None:
    if art.kind not in KINDS:
        raise FormatError(f"unknown artifact kind {art.kind!r}")
    table = []
    chunks: list[bytes] = []
    offset = 0
    for name, entry in art.tensors.items():
        tag = dtype_tag(entry.array)
        data = np.ascontiguousarray(entry.array, dtype=DTYPES[tag]).tobytes()
        pad = (-offset) % ALIGN
        if pad:
            chunks.append(b"\0" * pad)
            offset += pad
        table.append({"name": name, "dtype": tag, "shape": list(entry.array.shape), "offset": offset,
                      "length": len(data), "quant": entry.quant})
        chunks.append(data)
        offset += len(data)
    manifest = {"format": FORMAT_VERSION, "kind": art.kind, "graph": art.graph, "meta": art.meta,
                "tensors": table}
    text = _dumps(manifest)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    blob_path(path).write_bytes(b"".join(chunks))
    Path(path).write_text(text)


def load(path) -> Artifact:
    try:
        manifest = json.loads(Path(path).read_text())
        blob = blob_path(path).read_bytes()
    except FileNotFoundError as e:
        raise FormatError(f"missing artifact file: {e.filename}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: manifest is not valid JSON ({e})") from None
    if manifest.get("format") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format {manifest.get('format')!r}")
    tensors = {}
    for t in manifest["tensors"]:
        dt = DTYPES.get(t["dtype"])
        if dt is None:
            raise FormatError(f"{t['name']}: unknown dtype {t['dtype']!r}")
        off, length = t["offset"], t["length"]
        n = int(np.prod(t["shape"], dtype=np.int64))
        if off % ALIGN or off < 0 or off + length > len(blob) or length != n * dt.itemsize:
            raise FormatError(f"{t['name']}: section [{off}, {off + length}) invalid for blob of {len(blob)} bytes")
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(t["shape"]).copy()
        tensors[t["name"]] = TensorEntry(arr, t.get("quant"))
    art = Artifact(manifest["kind"], tensors, manifest.get("graph"), manifest.get("meta") or {})
    if art.graph is not None:
        _check_refs(art)
    return art


def _check_refs(art: Artifact) -> None:
    for node in art.graph.get("nodes", []):
        for ref in node.get("inputs", []):
            if ref in art.tensors:
                continue
            if not any(n["name"] == ref for n in art.graph["nodes"]):
                raise FormatError(f"node {node['name']!r} references unknown tensor {ref!r}")


def file_size(path) -> int:
    """Bytes on disk for manifest plus blob."""
    return Path(path).stat().st_size + blob_path(path).stat().st_size
