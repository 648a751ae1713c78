"""Writer for the FMTC tensor container and manifest JSON.

This mirrors the byte layout documented by the consumer package (magic
"FMTC", version 1, dtype u8 1=f32/2=f16, ndim u8, reserved u8, u64-LE dims,
row-major little-endian payload) without importing it: the on-disk format is
the only contract between the two sides.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"FMTC"
VERSION = 1
_DTYPES = {"f32": (1, np.dtype("<f4")), "f16": (2, np.dtype("<f2"))}


def write_tensor(path, array, dtype="f32"):
    """Atomic write (temp + rename) of one tensor."""
    code, np_dtype = _DTYPES[dtype]
    arr = np.asarray(array)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values bound for {path}")
    payload = np.ascontiguousarray(arr, dtype=np_dtype)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = (
        struct.pack("<4sBBBB", MAGIC, VERSION, code, arr.ndim, 0)
        + np.asarray(arr.shape, dtype="<u8").tobytes()
        + payload.tobytes()
    )
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(path, dataset_id, grid, classes, records, text_embeddings, vl_dim):
    doc = {
        "dataset_id": dataset_id,
        "grid": grid,
        "classes": {str(k): v for k, v in sorted(classes.items())},
        "records": records,
        "text_embeddings": {str(k): v for k, v in sorted(text_embeddings.items())},
        "vl_dim": vl_dim,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
