"""Bit-exact tensor container (FMTC), dataset manifest, and synthetic features.

FMTC byte layout (little-endian throughout):

    offset 0   magic   4 bytes  b"FMTC"
    offset 4   version u8       1
    offset 5   dtype   u8       1 = float32, 2 = float16
    offset 6   ndim    u8
    offset 7   reserved u8      0
    offset 8   dims    ndim x u64
    then       payload row-major scalars

The manifest is a JSON document (schema in README) binding feature / mask /
vision-language tensors and per-class text embeddings into a dataset. Mask
tensors are class-id maps: pixel value 0 is background, value k is class
id k-1, so "binarized to class c" means (mask == c + 1).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

MAGIC = b"FMTC"
VERSION = 1
_DTYPE_CODES = {"f32": 1, "f16": 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f2")}


def write_tensor(path, array, dtype="f32"):
    """Write one tensor; f32 round-trips bit-exactly."""
    if dtype not in _DTYPE_CODES:
        raise ConfigError(f"unsupported container dtype {dtype!r}")
    arr = np.asarray(array)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"refusing to write non-finite values to {path}")
    np_dtype = _CODE_DTYPES[_DTYPE_CODES[dtype]]
    payload = np.ascontiguousarray(arr, dtype=np_dtype)
    header = struct.pack("<4sBBBB", MAGIC, VERSION, _DTYPE_CODES[dtype], arr.ndim, 0)
    dims = np.asarray(arr.shape, dtype="<u8").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(payload.tobytes())


def _parse_header(blob, path):
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header", offset=len(blob))
    magic, version, dtype_code, ndim, reserved = struct.unpack_from("<4sBBBB", blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if dtype_code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {dtype_code}", offset=5)
    if reserved != 0:
        raise FormatError(f"{path}: reserved byte must be 0", offset=7)
    dims_end = 8 + 8 * ndim
    if len(blob) < dims_end:
        raise FormatError(f"{path}: truncated dims", offset=len(blob))
    dims = np.frombuffer(blob, dtype="<u8", count=ndim, offset=8)
    if ndim and dims.min() < 1:
        raise FormatError(f"{path}: non-positive extent in dims {tuple(dims)}", offset=8)
    return _CODE_DTYPES[dtype_code], tuple(int(d) for d in dims), dims_end


def read_tensor_header(path):
    """Cheap (dtype, dims) peek used by manifest validation."""
    with open(path, "rb") as fh:
        blob = fh.read(8 + 8 * 255)
    np_dtype, dims, _ = _parse_header(blob, path)
    return ("f32" if np_dtype == _CODE_DTYPES[1] else "f16"), dims


def read_tensor(path):
    """Read one tensor back in its stored dtype (float32 or float16)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    np_dtype, dims, payload_off = _parse_header(blob, path)
    expected = int(np.prod(dims, dtype=np.int64)) * np_dtype.itemsize
    if len(blob) - payload_off != expected:
        raise FormatError(
            f"{path}: payload is {len(blob) - payload_off} bytes, expected {expected}",
            offset=payload_off,
        )
    return np.frombuffer(blob, dtype=np_dtype, offset=payload_off).reshape(dims).copy()


def load_f32(path):
    return np.ascontiguousarray(read_tensor(path), dtype=np.float32)


def write_pgm(path, array2d):
    """8-bit binary PGM (P5) after min-max normalization, for visual checks."""
    arr = np.asarray(array2d, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"PGM export needs a 2-d array, got {arr.shape}")
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    data = np.round(scaled * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ManifestRecord:
    image_id: str
    class_ids: list
    feature_path: str
    mask_path: str
    vl_feature_path: str | None = None


@dataclasses.dataclass
class Manifest:
    dataset_id: str
    grid: dict  # {"h", "w", "c", "layers"}
    classes: dict  # class_id -> name
    records: list  # of ManifestRecord
    text_embeddings: dict  # class_id -> path
    vl_dim: int | None = None

    def to_json(self):
        doc = {
            "dataset_id": self.dataset_id,
            "grid": self.grid,
            "classes": {str(k): v for k, v in sorted(self.classes.items())},
            "records": [dataclasses.asdict(r) for r in self.records],
            "text_embeddings": {str(k): v for k, v in sorted(self.text_embeddings.items())},
            "vl_dim": self.vl_dim,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise FormatError(f"manifest not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
        try:
            return cls(
                dataset_id=doc["dataset_id"],
                grid=doc["grid"],
                classes={int(k): v for k, v in doc["classes"].items()},
                records=[ManifestRecord(**r) for r in doc["records"]],
                text_embeddings={int(k): v for k, v in doc.get("text_embeddings", {}).items()},
                vl_dim=doc.get("vl_dim"),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"manifest {path} is missing required fields: {exc}") from exc

    def validate(self, root):
        """Check that every referenced tensor exists and matches the grid."""
        root = Path(root)
        g = self.grid
        want_feat = (g["layers"], g["h"], g["w"], g["c"])
        for rec in self.records:
            fpath = root / rec.feature_path
            if not fpath.exists():
                raise FormatError(f"record {rec.image_id}: missing feature file {fpath}")
            _, dims = read_tensor_header(fpath)
            if dims != want_feat:
                raise DataError(
                    f"record {rec.image_id}: feature dims {dims} do not match grid {want_feat}"
                )
            mpath = root / rec.mask_path
            if not mpath.exists():
                raise FormatError(f"record {rec.image_id}: missing mask file {mpath}")
            _, mdims = read_tensor_header(mpath)
            if len(mdims) != 2:
                raise DataError(f"record {rec.image_id}: mask must be 2-d, got {mdims}")
            if rec.vl_feature_path is not None:
                vpath = root / rec.vl_feature_path
                if not vpath.exists():
                    raise FormatError(f"record {rec.image_id}: missing VL feature file {vpath}")
                _, vdims = read_tensor_header(vpath)
                if len(vdims) != 3 or vdims[:2] != (g["h"], g["w"]):
                    raise DataError(f"record {rec.image_id}: VL dims {vdims} do not match grid")
                if self.vl_dim is not None and vdims[2] != self.vl_dim:
                    raise DataError(f"record {rec.image_id}: VL channel {vdims[2]} != {self.vl_dim}")
            for cid in rec.class_ids:
                if cid not in self.classes:
                    raise DataError(f"record {rec.image_id}: unknown class id {cid}")
        for cid, tpath in self.text_embeddings.items():
            full = root / tpath
            if not full.exists():
                raise FormatError(f"missing text embedding for class {cid}: {full}")
            _, tdims = read_tensor_header(full)
            if len(tdims) != 1:
                raise DataError(f"text embedding for class {cid} must be 1-d, got {tdims}")


class FeatureStore:
    """Read-side view of a manifest: lazy tensor loading, per-class record index."""

    def __init__(self, manifest: Manifest, root):
        self.manifest = manifest
        self.root = Path(root)
        self.by_class = {}
        for idx, rec in enumerate(manifest.records):
            for cid in rec.class_ids:
                self.by_class.setdefault(cid, []).append(idx)

    @classmethod
    def open(cls, manifest_path):
        manifest_path = Path(manifest_path)
        manifest = Manifest.load(manifest_path)
        return cls(manifest, manifest_path.parent)

    def record(self, idx):
        return self.manifest.records[idx]

    def load_stack(self, rec: ManifestRecord):
        return load_f32(self.root / rec.feature_path)

    def load_mask(self, rec: ManifestRecord):
        return load_f32(self.root / rec.mask_path)

    def load_vl(self, rec: ManifestRecord):
        if rec.vl_feature_path is None:
            return None
        return load_f32(self.root / rec.vl_feature_path)

    def load_text(self, class_id):
        path = self.manifest.text_embeddings.get(class_id)
        if path is None:
            return None
        return load_f32(self.root / path)

    def class_ids(self):
        return sorted(self.manifest.classes)


# ---------------------------------------------------------------------------
# synthetic feature generator
# ---------------------------------------------------------------------------

SYNTH_GRID = {"h": 30, "w": 30, "c": 64, "layers": 12}
SYNTH_VL_DIM = 32
SYNTH_MASK_SIDE = 120
_NOISE = 0.05
_MAX_ABS_COS = 0.3


def _separated_unit_vectors(rng, n, dim, max_abs_cos):
    """Random unit vectors whose pairwise |cosine| stays below the bound;
    offending draws are regenerated deterministically."""
    vecs = np.empty((n, dim), dtype=np.float64)
    for i in range(n):
        for _ in range(1000):
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if i == 0 or np.abs(vecs[:i] @ v).max() < max_abs_cos:
                vecs[i] = v
                break
        else:  # pragma: no cover - unreachable at these dims
            raise DataError(f"could not draw {n} separated prototypes in R^{dim}")
    return vecs


def _random_mask(rng, side):
    """Random filled ellipse or rectangle covering 10-40% of the image."""
    yy, xx = np.mgrid[0:side, 0:side]
    while True:
        frac = rng.uniform(0.12, 0.38)
        cy, cx = rng.uniform(0.32, 0.68, size=2) * side
        aspect = rng.uniform(0.6, 1.7)
        area = frac * side * side
        if rng.random() < 0.5:
            a = np.sqrt(area * aspect / np.pi)
            b = area / (np.pi * a)
            mask = ((yy - cy) / b) ** 2 + ((xx - cx) / a) ** 2 <= 1.0
        else:
            hw = np.sqrt(area * aspect) / 2.0
            hh = area / (4.0 * hw)
            mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        cov = mask.mean()
        if 0.10 <= cov <= 0.40:
            return mask.astype(np.float64)


def generate_synthetic(manifest_path, n_classes, images_per_class, seed):
    """Write a fully self-contained synthetic feature store.

    Per class: a unit feature prototype and a unit text embedding. Per image:
    a random shape mask at 120x120; layer-i features are a soft blend of the
    class prototype (gain rising linearly over layers, mimicking deeper layers
    localizing better) and a background-prototype mixture, plus Gaussian
    noise. Deterministic given the seed.
    """
    if n_classes % 4 != 0:
        raise ConfigError(f"n_classes must be divisible by 4, got {n_classes}")
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    h, w, c_feat, layers = SYNTH_GRID["h"], SYNTH_GRID["w"], SYNTH_GRID["c"], SYNTH_GRID["layers"]
    side = SYNTH_MASK_SIDE
    block = side // h

    protos = _separated_unit_vectors(rng, n_classes + 4, c_feat, _MAX_ABS_COS)
    class_protos, bg_protos = protos[:n_classes], protos[n_classes:]
    tvecs = _separated_unit_vectors(rng, n_classes + 4, SYNTH_VL_DIM, _MAX_ABS_COS)
    class_text, bg_text = tvecs[:n_classes], tvecs[n_classes:]
    gains = np.linspace(0.25, 1.0, layers)

    records = []
    for cid in range(n_classes):
        for j in range(images_per_class):
            image_id = f"img-{cid:02d}-{j:02d}"
            mask = _random_mask(rng, side)
            soft = mask.reshape(h, block, w, block).mean(axis=(1, 3))
            bg_w = rng.random(4)
            bg_w /= bg_w.sum()
            bg_mix = bg_w @ bg_protos
            bg_vl_w = rng.random(4)
            bg_vl_w /= bg_vl_w.sum()
            bg_vl_mix = bg_vl_w @ bg_text

            feats = np.empty((layers, h, w, c_feat), dtype=np.float64)
            for i in range(layers):
                base = soft[..., None] * (gains[i] * class_protos[cid]) + (1.0 - soft)[..., None] * bg_mix
                feats[i] = base + rng.normal(0.0, _NOISE, size=(h, w, c_feat))
            vl = (
                soft[..., None] * class_text[cid]
                + (1.0 - soft)[..., None] * bg_vl_mix
                + rng.normal(0.0, _NOISE, size=(h, w, SYNTH_VL_DIM))
            )

            feature_path = f"features/{image_id}.fmtc"
            vl_path = f"vl/{image_id}.fmtc"
            mask_path = f"masks/{image_id}.fmtc"
            write_tensor(root / feature_path, feats.astype(np.float32))
            write_tensor(root / vl_path, vl.astype(np.float32))
            write_tensor(root / mask_path, (mask * (cid + 1)).astype(np.float32))
            records.append(
                ManifestRecord(
                    image_id=image_id,
                    class_ids=[cid],
                    feature_path=feature_path,
                    mask_path=mask_path,
                    vl_feature_path=vl_path,
                )
            )

    text_embeddings = {}
    for cid in range(n_classes):
        tpath = f"text/class-{cid:02d}.fmtc"
        write_tensor(root / tpath, class_text[cid].astype(np.float32))
        text_embeddings[cid] = tpath

    manifest = Manifest(
        dataset_id=f"synthetic-{n_classes}x{images_per_class}-seed{seed}",
        grid=dict(SYNTH_GRID),
        classes={cid: f"synthclass-{cid:02d}" for cid in range(n_classes)},
        records=records,
        text_embeddings=text_embeddings,
        vl_dim=SYNTH_VL_DIM,
    )
    manifest.save(manifest_path)
    return manifest
