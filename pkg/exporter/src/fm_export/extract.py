"""Feature extraction: 12 per-block grids, dense VL features, text embeddings."""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image

from .backbones import BackboneError, BackboneSpec


def preprocess_image(path, side, mean, std):
    """Aspect-preserving resize (long side = `side`), zero pad to square,
    normalize. Returns (tensor 1x3xSxS, scale info, padded flag)."""
    img = Image.open(path).convert("RGB")
    w0, h0 = img.size
    scale = side / max(w0, h0)
    new_w, new_h = max(1, round(w0 * scale)), max(1, round(h0 * scale))
    img = img.resize((new_w, new_h), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    canvas = np.zeros((side, side, 3), dtype=np.float32)
    canvas[:new_h, :new_w] = arr
    canvas = (canvas - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    padded = (new_w != side) or (new_h != side)
    return torch.from_numpy(canvas.transpose(2, 0, 1))[None], (new_h, new_w), padded


def transform_mask(mask_img, side, geometry, out_side):
    """Apply the image's resize+pad geometry to a binary mask (nearest), then
    downsample to out_side x out_side by nearest neighbor."""
    new_h, new_w = geometry
    mask = mask_img.resize((new_w, new_h), Image.NEAREST)
    canvas = np.zeros((side, side), dtype=np.uint8)
    canvas[:new_h, :new_w] = (np.asarray(mask) > 0).astype(np.uint8)
    idx = (np.arange(out_side) * side) // out_side
    return canvas[idx][:, idx]


def _vision_tower(spec: BackboneSpec, model):
    if spec.family in ("clip", "siglip"):
        return model.vision_model
    return model


def extract_block_grid(spec: BackboneSpec, model, pixels, grid):
    """(12, grid, grid, c) float32: patch tokens after each transformer block."""
    tower = _vision_tower(spec, model)
    kwargs = {"output_hidden_states": True}
    if spec.family != "dinov2":  # dinov2 interpolates its pos embeddings natively
        kwargs["interpolate_pos_encoding"] = True
    with torch.no_grad():
        out = tower(pixels, **kwargs)
    hidden = out.hidden_states
    if len(hidden) < 13:
        raise BackboneError(f"{spec.backbone_id}: expected 12 blocks, got {len(hidden) - 1}")
    n = grid * grid
    layers = []
    for h in hidden[1:13]:
        tokens = h[0, -n:]  # drop class/extra leading tokens
        if tokens.shape[0] != n:
            raise BackboneError(
                f"{spec.backbone_id}: got {h.shape[1]} tokens, cannot form a {grid}x{grid} grid"
            )
        layers.append(tokens.reshape(grid, grid, -1))
    return torch.stack(layers).float().numpy()


def extract_dense_vl(spec: BackboneSpec, model, pixels, grid):
    """Per-patch vision-language embeddings via the value-projection route:
    the last block's value projection + output projection, then the tower's
    final layernorm (and visual projection where the model has one), skipping
    the last attention mixing so each patch keeps its own embedding."""
    if not spec.vl_capable:
        raise BackboneError(f"{spec.backbone_id} has no language-aligned visual space")
    tower = model.vision_model
    captured = {}

    def grab(module, args, kwargs):
        captured["h"] = args[0] if args else kwargs["hidden_states"]

    hook = tower.encoder.layers[-1].register_forward_pre_hook(grab, with_kwargs=True)
    try:
        kwargs = {"interpolate_pos_encoding": True}
        with torch.no_grad():
            tower(pixels, **kwargs)
    finally:
        hook.remove()
    last = tower.encoder.layers[-1]
    with torch.no_grad():
        h = last.layer_norm1(captured["h"])
        v = last.self_attn.v_proj(h)
        o = last.self_attn.out_proj(v)
        o = tower.post_layernorm(o)
        if spec.family == "clip":
            o = model.visual_projection(o)
    n = grid * grid
    tokens = o[0, -n:]
    return tokens.reshape(grid, grid, -1).float().numpy()


def _fallback_tokenize(prompt, vocab_size, max_len=24):
    """Offline byte-level stand-in tokenizer for random-weights mode."""
    ids = [1 + (b % (vocab_size - 2)) for b in prompt.encode("utf-8")][: max_len - 1]
    ids.append(vocab_size - 1)
    return torch.tensor([ids], dtype=torch.long)


def extract_text_embedding(spec: BackboneSpec, model, class_name, weights):
    """One embedding for the template "a photo of a {class name}"."""
    if not spec.vl_capable:
        raise BackboneError(f"{spec.backbone_id} has no text encoder")
    prompt = f"a photo of a {class_name}"
    if weights == "pretrained":
        from transformers import AutoTokenizer

        tok = AutoTokenizer.from_pretrained(spec.hub_id)
        enc = tok([prompt], padding=True, return_tensors="pt")
        ids, attn = enc["input_ids"], enc.get("attention_mask")
    else:
        vocab = model.config.text_config.vocab_size
        ids = _fallback_tokenize(prompt, vocab)
        attn = torch.ones_like(ids)
    with torch.no_grad():
        vec = model.get_text_features(input_ids=ids, attention_mask=attn)
    return vec[0].float().numpy()
