"""The learnable segmentation head over fused correlation volumes.

Pipeline (early fusion): center-pivot 4D encoder -> residual depthwise-
separable 4D blocks -> support-dim pooling -> 2D refinement head -> 2-class
logits. Late fusion decodes the vision volume and the text map separately and
merges them with 2D convolutions before the shared head.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .knowledge import NUM_LAYERS, FusedVolume, fuse_early
from .tensor import (
    Parameter,
    Tensor,
    add,
    avg_over_support_dims,
    bilinear_resize,
    concat_channels,
    conv2d,
    cp4d_conv,
    dw4d_conv,
    group_norm,
    pw4d_conv,
    relu,
)


@dataclasses.dataclass(frozen=True)
class DecoderConfig:
    d: int = 96
    gn_groups: int = 4
    num_dscm: int = 2
    dscm_repeats: int = 3
    support_stride: int = 2
    fusion: str = "early"
    m: int = 1
    use_text: bool = False

    def validate(self):
        if self.d < 2 or self.d % self.gn_groups != 0:
            raise ConfigError(f"d={self.d} must be >= 2 and divisible by gn_groups={self.gn_groups}")
        if self.num_dscm < 1 or self.dscm_repeats < 1:
            raise ConfigError("num_dscm and dscm_repeats must be >= 1")
        if self.support_stride not in (1, 2):
            raise ConfigError(f"support_stride must be 1 or 2, got {self.support_stride}")
        if self.fusion not in ("early", "late"):
            raise ConfigError(f"fusion must be 'early' or 'late', got {self.fusion!r}")
        if not 1 <= self.m <= NUM_LAYERS:
            raise ConfigError(f"m must be in [1, 12], got {self.m}")
        if self.fusion == "late" and self.use_text:
            half = self.d // 2
            if self.d % 2 != 0 or half % self.gn_groups != 0:
                raise ConfigError("late fusion needs d/2 divisible by gn_groups")
        return self

    @property
    def vision_channels(self):
        return NUM_LAYERS - self.m + 1

    @property
    def volume_channels(self):
        extra = 1 if (self.use_text and self.fusion == "early") else 0
        return self.vision_channels + extra


class DecoderParams:
    """Ordered name -> Parameter tree; the only learnable state."""

    def __init__(self, params):
        self._params = dict(params)

    def __getitem__(self, name) -> Parameter:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def parameters(self):
        return list(self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def arrays(self):
        return {name: p.data for name, p in self._params.items()}

    @classmethod
    def from_arrays(cls, arrays):
        return cls({name: Parameter(name, arr) for name, arr in arrays.items()})


def count_params(params) -> int:
    """Exact scalar count of all learnable entries in a parameter tree."""
    if isinstance(params, DecoderParams):
        return sum(p.size for p in params.parameters())
    if isinstance(params, dict):
        return sum(int(np.asarray(v).size) for v in params.values())
    return sum(int(np.asarray(v).size) for v in params)


def _param_shapes(config: DecoderConfig):
    """Name -> (shape, fan_in or None); fan_in None means a constant init."""
    d = config.d
    shapes = {}

    def conv_entry(prefix, co, ci, k):
        shapes[f"{prefix}.w"] = ((co, ci, k, k), ci * k * k)
        shapes[f"{prefix}.b"] = ((co,), None)

    def gn_entry(prefix, c):
        shapes[f"{prefix}.gamma"] = ((c,), None)
        shapes[f"{prefix}.beta"] = ((c,), None)

    l_in = config.volume_channels if config.fusion == "early" else config.vision_channels
    shapes["encoder.wq"] = ((d, l_in, 3, 3), l_in * 9)
    shapes["encoder.ws"] = ((d, l_in, 3, 3), l_in * 9)
    shapes["encoder.bias"] = ((d,), None)
    gn_entry("encoder.gn", d)

    for b in range(config.num_dscm):
        for r in range(config.dscm_repeats):
            prefix = f"dscm{b}.rep{r}"
            shapes[f"{prefix}.dw.wq"] = ((d, 3, 3), 9)
            shapes[f"{prefix}.dw.ws"] = ((d, 3, 3), 9)
            shapes[f"{prefix}.pw.weight"] = ((d, d), d)
            shapes[f"{prefix}.pw.bias"] = ((d,), None)
            gn_entry(f"{prefix}.gn", d)

    if config.fusion == "late" and config.use_text:
        half = d // 2
        conv_entry("text.conv0", half, 1, 3)
        gn_entry("text.gn0", half)
        conv_entry("text.conv1", half, half, 3)
        gn_entry("text.gn1", half)
        conv_entry("fuse.conv0", d, d + half, 3)
        gn_entry("fuse.gn0", d)
        conv_entry("fuse.conv1", d, d, 3)
        gn_entry("fuse.gn1", d)

    for k in range(2):
        conv_entry(f"head.block{k}.conv0", d, d, 3)
        gn_entry(f"head.block{k}.gn0", d)
        conv_entry(f"head.block{k}.conv1", d, d, 3)
        gn_entry(f"head.block{k}.gn1", d)
    conv_entry("head.proj", 2, d, 3)
    return shapes


def init_params(config: DecoderConfig, seed: int, dtype=np.float32) -> DecoderParams:
    """Kaiming-style uniform(-sqrt(1/fan_in), +) weights; gamma 1, beta/bias 0."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params = {}
    for name, (shape, fan_in) in _param_shapes(config).items():
        if fan_in is not None:
            a = np.sqrt(1.0 / fan_in)
            data = rng.uniform(-a, a, size=shape).astype(dtype)
        elif name.endswith(".gamma"):
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Parameter(name, data)
    return DecoderParams(params)


def _gn(x, params, prefix, config, fuse_relu=False):
    return group_norm(x, config.gn_groups, params[f"{prefix}.gamma"], params[f"{prefix}.beta"],
                      fuse_relu=fuse_relu)


def encode(volume, params: DecoderParams, config: DecoderConfig) -> Tensor:
    """cp4d (support stride) -> GN -> ReLU; lifts l channels to d."""
    vol = volume.tensor if isinstance(volume, FusedVolume) else np.asarray(volume)
    l_in = params["encoder.wq"].dims[1]
    if vol.ndim != 5 or vol.shape[0] != l_in:
        raise ShapeError(f"volume has {vol.shape} but encoder expects {l_in} channels")
    x = Tensor(np.ascontiguousarray(vol))
    x = cp4d_conv(x, params["encoder.wq"], params["encoder.ws"], params["encoder.bias"],
                  support_stride=config.support_stride)
    return _gn(x, params, "encoder.gn", config, fuse_relu=True)


def dscm_block(x: Tensor, params: DecoderParams, config: DecoderConfig, block: int = 0) -> Tensor:
    """Residual depthwise-separable 4D block: three (dw -> pw -> GN -> ReLU)
    repeats with one skip connection around the triple."""
    y = x
    for r in range(config.dscm_repeats):
        prefix = f"dscm{block}.rep{r}"
        y = dw4d_conv(y, params[f"{prefix}.dw.wq"], params[f"{prefix}.dw.ws"])
        y = pw4d_conv(y, params[f"{prefix}.pw.weight"], params[f"{prefix}.pw.bias"])
        y = _gn(y, params, f"{prefix}.gn", config, fuse_relu=True)
    return add(y, x)


def _residual_2d(x: Tensor, params, prefix, config) -> Tensor:
    y = conv2d(x, params[f"{prefix}.conv0.w"], params[f"{prefix}.conv0.b"])
    y = _gn(y, params, f"{prefix}.gn0", config, fuse_relu=True)
    y = conv2d(y, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"])
    y = _gn(y, params, f"{prefix}.gn1", config)
    return relu(add(y, x))


def head_from_2d(x2: Tensor, params: DecoderParams, config: DecoderConfig, out_size) -> Tensor:
    """x2 bilinear-upsample -> two residual 2D blocks -> 2-channel projection
    -> bilinear resize to the requested label size. Returns raw logits."""
    h, w = x2.dims[1], x2.dims[2]
    out_h, out_w = out_size
    if out_h < h or out_w < w:
        raise ConfigError(f"out_size {out_size} smaller than feature grid {(h, w)}")
    x2 = bilinear_resize(x2, 2 * h, 2 * w)
    for k in range(2):
        x2 = _residual_2d(x2, params, f"head.block{k}", config)
    logits = conv2d(x2, params["head.proj.w"], params["head.proj.b"])
    return bilinear_resize(logits, out_h, out_w)


def decode_head(x: Tensor, params: DecoderParams, config: DecoderConfig, out_size) -> Tensor:
    """Support-dim pooling followed by the 2D refinement head."""
    return head_from_2d(avg_over_support_dims(x), params, config, out_size)


def forward(vision_maps, text_map, params: DecoderParams, config: DecoderConfig, out_size) -> Tensor:
    """Full decoder pass from per-layer correlation maps (and the optional
    text activation) to 2 x H x W logits."""
    if config.use_text and text_map is None:
        raise DataError("use_text=True but no vision-language inputs are available")
    if not config.use_text:
        text_map = None
    if config.fusion == "early":
        volume = fuse_early(vision_maps, text_map, m=config.m)
        x = encode(volume, params, config)
        for b in range(config.num_dscm):
            x = dscm_block(x, params, config, block=b)
        return decode_head(x, params, config, out_size)

    volume = fuse_early(vision_maps, None, m=config.m)
    x = encode(volume, params, config)
    for b in range(config.num_dscm):
        x = dscm_block(x, params, config, block=b)
    pooled = avg_over_support_dims(x)
    if config.use_text:
        t = Tensor(np.ascontiguousarray(text_map[None], dtype=pooled.dtype))
        t = conv2d(t, params["text.conv0.w"], params["text.conv0.b"])
        t = _gn(t, params, "text.gn0", config, fuse_relu=True)
        t = conv2d(t, params["text.conv1.w"], params["text.conv1.b"])
        t = _gn(t, params, "text.gn1", config, fuse_relu=True)
        fused = concat_channels([pooled, t])
        fused = conv2d(fused, params["fuse.conv0.w"], params["fuse.conv0.b"])
        fused = _gn(fused, params, "fuse.gn0", config, fuse_relu=True)
        fused = conv2d(fused, params["fuse.conv1.w"], params["fuse.conv1.b"])
        pooled = _gn(fused, params, "fuse.gn1", config, fuse_relu=True)
    return head_from_2d(pooled, params, config, out_size)
