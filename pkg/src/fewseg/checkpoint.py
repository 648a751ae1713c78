"""Checkpoint directory format: one FMTC tensor per named parameter plus a
JSON manifest binding names to files and carrying the decoder config.
Round trips are bit-exact (parameters are float32)."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .decoder import DecoderConfig, DecoderParams
from .errors import DataError, FormatError
from .store import read_tensor, write_tensor

CHECKPOINT_FORMAT = "fewseg-checkpoint-v1"


def save_checkpoint(dirpath, params: DecoderParams, config: DecoderConfig):
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in params.arrays().items():
        if arr.dtype != np.float32:
            raise DataError(f"checkpoints store float32 parameters; {name} is {arr.dtype}")
        fname = f"{name}.fmtc"
        write_tensor(dirpath / fname, arr, dtype="f32")
        files[name] = fname
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": dataclasses.asdict(config),
        "params": files,
    }
    (dirpath / "checkpoint.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return dirpath


def load_checkpoint(dirpath):
    dirpath = Path(dirpath)
    manifest = dirpath / "checkpoint.json"
    if not manifest.exists():
        raise FormatError(f"no checkpoint manifest at {manifest}")
    doc = json.loads(manifest.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"unknown checkpoint format {doc.get('format')!r}")
    config = DecoderConfig(**doc["config"]).validate()
    arrays = {}
    for name, fname in doc["params"].items():
        arr = read_tensor(dirpath / fname)
        if arr.dtype != np.float32:
            raise FormatError(f"checkpoint tensor {name} is {arr.dtype}, expected float32")
        arrays[name] = arr
    return DecoderParams.from_arrays(arrays), config
