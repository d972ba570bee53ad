"""``.wsck`` checkpoints: one JSON manifest line, then a raw little-endian blob.

The manifest lists every array's name, shape, precision and byte offset
(relative to the start of the blob) in the order the arrays are stored.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ValidationError

FORMAT = "wsck"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        precision = arr.dtype.name
        if precision not in _DTYPES:
            raise ValidationError(f"{name}: unsupported dtype {precision}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[precision]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "precision": precision, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "meta": meta or {},
                "params": entries, "nbytes": offset}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header = fh.readline()
        blob = fh.read()
    try:
        manifest = json.loads(header)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: unreadable manifest") from exc
    if manifest.get("format") != FORMAT:
        raise ValidationError(f"{path}: not a {FORMAT} checkpoint")
    if len(blob) != manifest["nbytes"]:
        raise ValidationError(f"{path}: blob has {len(blob)} bytes, manifest says {manifest['nbytes']}")
    arrays = {}
    for e in manifest["params"]:
        dt = np.dtype(_DTYPES[e["precision"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(e["precision"])
    return arrays, manifest["meta"]
