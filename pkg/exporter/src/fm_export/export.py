"""Export job: images + per-class masks -> FMTC feature store + manifest.

Source directory layout:

    <src>/images/<image>.{png,jpg,jpeg}
    <src>/masks/<class name>/<image>.png     (binary; nonzero = foreground)

Class ids are assigned by sorted class-directory name. Mask tensors are
class-id maps at 120x120 (pixel value = class id + 1, 0 = background); where
per-class masks overlap, the higher class id wins.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .backbones import VL_BACKBONES, BackboneError, load_backbone
from .extract import (
    extract_block_grid,
    extract_dense_vl,
    extract_text_embedding,
    preprocess_image,
    transform_mask,
)
from .fmtc import write_manifest, write_tensor

log = logging.getLogger("fm_export")

MASK_SIDE = 120
NUM_BLOCKS = 12
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclasses.dataclass
class ExportJob:
    source_dir: str
    out_dir: str
    backbone_id: str
    vl_backbone_id: str | None = None
    input_side: int | None = None  # default: 30 * patch size
    weights: str = "pretrained"  # or "random" (offline, seeded)
    seed: int = 0


def _scan_source(source_dir):
    source_dir = Path(source_dir)
    image_dir = source_dir / "images"
    mask_root = source_dir / "masks"
    if not image_dir.is_dir() or not mask_root.is_dir():
        raise BackboneError(f"{source_dir} must contain images/ and masks/ directories")
    class_names = sorted(p.name for p in mask_root.iterdir() if p.is_dir())
    if not class_names:
        raise BackboneError(f"no class mask directories under {mask_root}")
    images = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise BackboneError(f"no images under {image_dir}")
    return images, class_names, mask_root


def export(job: ExportJob):
    """Run the job; returns the manifest path."""
    spec, model = load_backbone(job.backbone_id, weights=job.weights, seed=job.seed)
    vl_spec = vl_model = None
    if job.vl_backbone_id is not None:
        if job.vl_backbone_id not in VL_BACKBONES:
            raise BackboneError(
                f"{job.vl_backbone_id!r} is not vision-language capable; pick from {sorted(VL_BACKBONES)}"
            )
        vl_spec, vl_model = load_backbone(job.vl_backbone_id, weights=job.weights, seed=job.seed + 1)

    side = job.input_side or 30 * spec.patch_size
    if side % spec.patch_size != 0:
        raise BackboneError(f"input side {side} not divisible by patch size {spec.patch_size}")
    grid = side // spec.patch_size
    vl_grid = grid  # VL features share the vision grid so fusion lines up

    images, class_names, mask_root = _scan_source(job.source_dir)
    class_ids = {name: i for i, name in enumerate(class_names)}
    out = Path(job.out_dir)

    records = []
    feat_dim = vl_dim = None
    for img_path in images:
        image_id = img_path.stem
        pixels, geometry, padded = preprocess_image(img_path, side, spec.mean, spec.std)
        if padded:
            log.info("image %s resized with aspect-preserving pad", image_id)
        feats = extract_block_grid(spec, model, pixels, grid)
        feat_dim = feats.shape[-1]

        class_map = np.zeros((MASK_SIDE, MASK_SIDE), dtype=np.float32)
        present = []
        for name in class_names:
            mpath = mask_root / name / f"{image_id}.png"
            if not mpath.exists():
                continue
            mask = transform_mask(Image.open(mpath).convert("L"), side, geometry, MASK_SIDE)
            if mask.any():
                class_map[mask > 0] = class_ids[name] + 1
                present.append(class_ids[name])
        if not present:
            log.warning("image %s has no non-empty class mask; skipped", image_id)
            continue

        feature_path = f"features/{image_id}.fmtc"
        mask_path = f"masks/{image_id}.fmtc"
        write_tensor(out / feature_path, feats, dtype="f16")
        write_tensor(out / mask_path, class_map, dtype="f32")
        record = {
            "image_id": image_id,
            "class_ids": present,
            "feature_path": feature_path,
            "mask_path": mask_path,
            "vl_feature_path": None,
        }
        if vl_spec is not None:
            vl_pixels, _, _ = preprocess_image(img_path, vl_grid * vl_spec.patch_size,
                                               vl_spec.mean, vl_spec.std)
            vl_feats = extract_dense_vl(vl_spec, vl_model, vl_pixels, vl_grid)
            vl_dim = vl_feats.shape[-1]
            vl_path = f"vl/{image_id}.fmtc"
            write_tensor(out / vl_path, vl_feats, dtype="f16")
            record["vl_feature_path"] = vl_path
        records.append(record)

    if not records:
        raise BackboneError("no exportable images found")

    text_embeddings = {}
    if vl_spec is not None:
        for name, cid in class_ids.items():
            vec = extract_text_embedding(vl_spec, vl_model, name, job.weights)
            if not np.linalg.norm(vec) > 0:
                raise BackboneError(f"text embedding for class {name!r} has zero norm")
            tpath = f"text/class-{cid:02d}.fmtc"
            write_tensor(out / tpath, vec, dtype="f32")
            text_embeddings[cid] = tpath

    manifest_path = out / "manifest.json"
    write_manifest(
        manifest_path,
        dataset_id=f"export-{job.backbone_id}" + (f"+{job.vl_backbone_id}" if job.vl_backbone_id else ""),
        grid={"h": grid, "w": grid, "c": int(feat_dim), "layers": NUM_BLOCKS},
        classes={cid: name for name, cid in class_ids.items()},
        records=records,
        text_embeddings=text_embeddings,
        vl_dim=int(vl_dim) if vl_dim is not None else None,
    )
    return manifest_path
