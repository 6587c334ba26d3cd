"""Self-describing weight snapshot container.

Layout::

    b"SEMFLWTS"            8-byte magic
    uint32 LE              header length in bytes
    header                 UTF-8 JSON: model_tag, version, dtype, entries
    payload                raw little-endian tensor data, entries back to back

Each header entry carries ``name``, ``shape``, ``offset`` and ``nbytes`` into
the payload. The dtype is the model's parameter dtype (``<f8`` for the
default float64 models, ``<f4`` for float32 ones); snapshots round-trip bit
exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelWeights

MAGIC = b"SEMFLWTS"
_NP_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}
_TORCH_DTYPES = {v: k for k, v in _NP_DTYPES.items()}


class SnapshotError(ValueError):
    pass


def dumps(weights: ModelWeights) -> bytes:
    dtypes = {t.dtype for t in weights.entries.values()}
    if len(dtypes) != 1 or next(iter(dtypes)) not in _NP_DTYPES:
        raise SnapshotError(f"unsupported or mixed parameter dtypes: {dtypes}")
    np_dtype = _NP_DTYPES[dtypes.pop()]
    entries, chunks, offset = [], [], 0
    for name, tensor in weights.entries.items():
        raw = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=np_dtype).tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"model_tag": weights.model_tag, "version": weights.version, "dtype": np_dtype, "entries": entries},
        sort_keys=True,
    ).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> ModelWeights:
    if blob[: len(MAGIC)] != MAGIC:
        raise SnapshotError("not a weight snapshot (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(blob[start : start + hlen])
    payload = memoryview(blob)[start + hlen :]
    np_dtype = header["dtype"]
    if np_dtype not in _TORCH_DTYPES:
        raise SnapshotError(f"unsupported dtype {np_dtype}")
    entries = {}
    for e in header["entries"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise SnapshotError(f"truncated payload for {e['name']}")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=np_dtype).reshape(e["shape"])
        entries[e["name"]] = torch.from_numpy(arr.astype(np_dtype[1:], copy=True))
    return ModelWeights(entries, header["model_tag"], int(header["version"]))


def save_weights(weights: ModelWeights, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(weights))
    return path


def load_weights(path: str | Path) -> ModelWeights:
    return loads(Path(path).read_bytes())


def weights_digest(weights: ModelWeights) -> str:
    return hashlib.sha256(dumps(weights)).hexdigest()
