"""Correlation-volume construction from frozen backbone features.

Everything here is a pure transform over plain numpy arrays: the features are
frozen, so no gradients flow through these maps and they stay off the autodiff
tape. The decoder receives the fused volume as a constant input.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import DataError, ShapeError
from .tensor import kernels

NUM_LAYERS = 12


@dataclasses.dataclass
class FeatureStack:
    """Per-image features from all 12 backbone blocks on an h x w grid."""

    stack: np.ndarray  # (12, h, w, c)
    backbone_id: str = "unknown"

    def __post_init__(self):
        if self.stack.ndim != 4 or self.stack.shape[0] != NUM_LAYERS:
            raise ShapeError(f"FeatureStack needs (12, h, w, c), got {self.stack.shape}")

    @property
    def grid(self):
        return self.stack.shape[1], self.stack.shape[2]

    @property
    def channels(self):
        return self.stack.shape[3]

    def layer(self, i):
        """1-based block index, matching the paper-facing layer numbering."""
        return self.stack[i - 1]


@dataclasses.dataclass
class SupportSample:
    features: FeatureStack
    mask: np.ndarray  # (h0, w0) binary, native resolution
    class_id: int
    vl_features: np.ndarray | None = None

    def __post_init__(self):
        _check_binary(self.mask, "support mask")
        if not self.mask.any():
            raise DataError("support mask is empty (no foreground pixel)")


@dataclasses.dataclass
class QuerySample:
    features: FeatureStack
    gt_mask: np.ndarray  # (h0, w0) binary
    vl_features: np.ndarray | None = None

    def __post_init__(self):
        _check_binary(self.gt_mask, "query ground-truth mask")


@dataclasses.dataclass
class TextEmbedding:
    vector: np.ndarray  # (c_vl,)
    class_id: int
    class_name: str

    def __post_init__(self):
        if self.vector.ndim != 1:
            raise ShapeError(f"text embedding must be 1-d, got {self.vector.shape}")
        if not np.linalg.norm(self.vector) > 0:
            raise DataError(f"text embedding for class {self.class_id} has zero norm")


@dataclasses.dataclass
class FusedVolume:
    tensor: np.ndarray  # (l, h, w, hs, ws)
    layer_range_m: int
    has_text_channel: bool

    def __post_init__(self):
        t = self.tensor
        if t.ndim != 5:
            raise ShapeError(f"fused volume must be 5-d, got {t.shape}")
        expect = (NUM_LAYERS - self.layer_range_m + 1) + (1 if self.has_text_channel else 0)
        if t.shape[0] != expect:
            raise ShapeError(f"fused volume has {t.shape[0]} channels, expected {expect}")
        n_vision = NUM_LAYERS - self.layer_range_m + 1
        vision = t[:n_vision]
        if vision.size and (vision.min() < 0.0 or vision.max() > 1.0):
            raise DataError("vision correlation channels must lie in [0, 1]")

    @property
    def channels(self):
        return self.tensor.shape[0]


def _check_binary(mask, what):
    if mask.ndim != 2:
        raise ShapeError(f"{what} must be 2-d, got {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise DataError(f"{what} must be binary")


def cosine_map_array(query2d, support2d):
    """ReLU-clamped pairwise cosine on (hw, c) arrays; zero-norm rows give 0."""
    nq = np.sqrt(np.einsum("ic,ic->i", query2d, query2d))
    ns = np.sqrt(np.einsum("jc,jc->j", support2d, support2d))
    denom = nq[:, None] * ns[None, :]
    cos = np.divide(query2d @ support2d.T, denom, out=np.zeros_like(denom), where=denom > 0)
    return np.clip(cos, 0.0, 1.0)


def mask_support_features(stack: FeatureStack, mask) -> FeatureStack:
    """Multiply every layer by the bilinearly-resized (soft) support mask."""
    _check_binary(np.asarray(mask), "support mask")
    if not np.asarray(mask).any():
        raise DataError("support mask is empty")
    h, w = stack.grid
    soft = kernels.bilinear_resize_forward(np.asarray(mask, dtype=stack.stack.dtype), h, w)
    masked = stack.stack * soft[None, :, :, None]
    return FeatureStack(stack=masked, backbone_id=stack.backbone_id)


def build_vision_correlations(query: FeatureStack, masked_support: FeatureStack, m: int = 1):
    """One 4D ReLU-cosine map per layer i in [m, 12]; list of (h, w, h, w)."""
    if not 1 <= m <= NUM_LAYERS:
        raise ShapeError(f"layer range m must be in [1, 12], got {m}")
    if query.grid != masked_support.grid or query.channels != masked_support.channels:
        raise ShapeError(
            f"query {query.stack.shape} and support {masked_support.stack.shape} stacks disagree"
        )
    h, w = query.grid
    c = query.channels
    maps = []
    for i in range(m, NUM_LAYERS + 1):
        q2 = query.layer(i).reshape(h * w, c)
        s2 = masked_support.layer(i).reshape(h * w, c)
        maps.append(cosine_map_array(q2, s2).reshape(h, w, h, w))
    return maps


def build_text_activation(query_vl, text: TextEmbedding):
    """Per-position ReLU cosine between query VL features and the class text."""
    query_vl = np.asarray(query_vl)
    if query_vl.ndim != 3 or query_vl.shape[2] != text.vector.shape[0]:
        raise ShapeError(
            f"VL features {query_vl.shape} do not match text embedding {text.vector.shape}"
        )
    h, w, c = query_vl.shape
    sim = cosine_map_array(query_vl.reshape(h * w, c), text.vector.reshape(1, c))
    return sim.reshape(h, w)


def fuse_early(vision_maps, text_map=None, m: int = 1) -> FusedVolume:
    """Stack vision maps on a channel axis; broadcast the text map over the
    support dims (constant per query position) and append it last."""
    shape = vision_maps[0].shape
    for v in vision_maps[1:]:
        if v.shape != shape:
            raise ShapeError(f"vision maps disagree: {v.shape} vs {shape}")
    chans = list(vision_maps)
    if text_map is not None:
        if text_map.shape != shape[:2]:
            raise ShapeError(f"text map {text_map.shape} does not match grid {shape[:2]}")
        chans.append(np.broadcast_to(text_map[:, :, None, None], shape))
    dtype = np.float64 if vision_maps[0].dtype == np.float64 else np.float32
    vol = np.ascontiguousarray(np.stack(chans, axis=0), dtype=dtype)
    return FusedVolume(tensor=vol, layer_range_m=m, has_text_channel=text_map is not None)


def averaged_activation_map(corr):
    """Mean over the support dims of a 4D correlation: the 2D activation map."""
    corr = np.asarray(corr)
    if corr.ndim != 4:
        raise ShapeError(f"expected a 4-d correlation, got {corr.shape}")
    return corr.mean(axis=(2, 3))
