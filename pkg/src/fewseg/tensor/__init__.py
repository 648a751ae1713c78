from .adam import AdamState, adam_step
from .core import Parameter, Tensor, as_array, backward
from .ops import (
    add,
    avg_over_support_dims,
    bilinear_resize,
    concat_channels,
    conv2d,
    cosine_similarity_map,
    cp4d_conv,
    dw4d_conv,
    group_norm,
    mean_all,
    pw4d_conv,
    relu,
    softmax_cross_entropy,
    sum_all,
)

__all__ = [
    "AdamState",
    "Parameter",
    "Tensor",
    "adam_step",
    "add",
    "as_array",
    "avg_over_support_dims",
    "backward",
    "bilinear_resize",
    "concat_channels",
    "conv2d",
    "cosine_similarity_map",
    "cp4d_conv",
    "dw4d_conv",
    "group_norm",
    "mean_all",
    "pw4d_conv",
    "relu",
    "softmax_cross_entropy",
    "sum_all",
]
