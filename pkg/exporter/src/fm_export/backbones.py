"""ViT-B backbone registry: model construction, preprocessing stats, text side.

Every entry is the Base variant of its family. `weights="pretrained"` pulls
hub weights (network required); `weights="random"` builds the same
architecture with seeded random initialization, which keeps the full
extraction path testable offline and byte-deterministic.
"""

from __future__ import annotations

import dataclasses

import torch

IMAGENET_STATS = ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))
INCEPTION_STATS = ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
CLIP_STATS = ((0.48145466, 0.4578275, 0.40821073), (0.26862954, 0.26130258, 0.27577711))


@dataclasses.dataclass(frozen=True)
class BackboneSpec:
    backbone_id: str
    family: str  # vit | vitmae | dinov2 | clip | siglip
    hub_id: str
    patch_size: int
    mean: tuple
    std: tuple
    has_class_token: bool
    vl_capable: bool


REGISTRY = {
    "dinov2-b": BackboneSpec("dinov2-b", "dinov2", "facebook/dinov2-base", 14,
                             *IMAGENET_STATS, True, False),
    "dino-b": BackboneSpec("dino-b", "vit", "facebook/dino-vitb16", 16,
                           *IMAGENET_STATS, True, False),
    "mae-b": BackboneSpec("mae-b", "vitmae", "facebook/vit-mae-base", 16,
                          *IMAGENET_STATS, True, False),
    "vit-b": BackboneSpec("vit-b", "vit", "google/vit-base-patch16-224", 16,
                          *INCEPTION_STATS, True, False),
    "clip-b": BackboneSpec("clip-b", "clip", "openai/clip-vit-base-patch16", 16,
                           *CLIP_STATS, True, True),
    "openclip-b": BackboneSpec("openclip-b", "clip", "laion/CLIP-ViT-B-16-laion2B-s34B-b88K", 16,
                               *CLIP_STATS, True, True),
    "siglip-b": BackboneSpec("siglip-b", "siglip", "google/siglip-base-patch16-224", 16,
                             *INCEPTION_STATS, False, True),
    "dfn-b": BackboneSpec("dfn-b", "clip", "apple/DFN2B-CLIP-ViT-B-16", 16,
                          *CLIP_STATS, True, True),
}

VL_BACKBONES = {bid for bid, spec in REGISTRY.items() if spec.vl_capable}


class BackboneError(ValueError):
    pass


def get_spec(backbone_id) -> BackboneSpec:
    spec = REGISTRY.get(backbone_id)
    if spec is None:
        raise BackboneError(f"unknown backbone id {backbone_id!r}; known: {sorted(REGISTRY)}")
    return spec


def _random_config(spec: BackboneSpec):
    from transformers import CLIPConfig, CLIPVisionConfig, CLIPTextConfig, Dinov2Config, SiglipConfig, ViTConfig, ViTMAEConfig

    if spec.family == "vit":
        return ViTConfig(patch_size=spec.patch_size)
    if spec.family == "vitmae":
        return ViTMAEConfig(patch_size=spec.patch_size, mask_ratio=0.0)
    if spec.family == "dinov2":
        return Dinov2Config(patch_size=spec.patch_size)
    if spec.family == "clip":
        return CLIPConfig(
            vision_config=CLIPVisionConfig(patch_size=spec.patch_size).to_dict(),
            text_config=CLIPTextConfig().to_dict(),
        )
    if spec.family == "siglip":
        return SiglipConfig()
    raise BackboneError(f"unhandled family {spec.family}")


def _model_class(spec: BackboneSpec):
    from transformers import CLIPModel, Dinov2Model, SiglipModel, ViTMAEModel, ViTModel

    return {
        "vit": ViTModel,
        "vitmae": ViTMAEModel,
        "dinov2": Dinov2Model,
        "clip": CLIPModel,
        "siglip": SiglipModel,
    }[spec.family]


def load_backbone(backbone_id, weights="pretrained", seed=0):
    """Build the model in eval mode; random mode is seeded and offline."""
    spec = get_spec(backbone_id)
    cls = _model_class(spec)
    if weights == "pretrained":
        model = cls.from_pretrained(spec.hub_id)
    elif weights == "random":
        torch.manual_seed(seed)
        config = _random_config(spec)
        if spec.family == "vitmae":
            config.mask_ratio = 0.0
        model = cls(config)
    else:
        raise BackboneError(f"weights must be 'pretrained' or 'random', got {weights!r}")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return spec, model
