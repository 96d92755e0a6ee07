from segrobust.autodiff.functional import (
    DOWNSAMPLE_PADS,
    concat,
    conv3d,
    dropout3d,
    instance_norm,
    leaky_relu,
    resolve_padding,
    softmax_temperature,
    upsample_nearest,
)
from segrobust.autodiff.optim import Adam, AdamState, adam_step
from segrobust.autodiff.tensor import Tensor, as_tensor, is_grad_enabled, no_grad, topological_order

__all__ = [
    "DOWNSAMPLE_PADS",
    "Adam",
    "AdamState",
    "Tensor",
    "adam_step",
    "as_tensor",
    "concat",
    "conv3d",
    "dropout3d",
    "instance_norm",
    "is_grad_enabled",
    "leaky_relu",
    "no_grad",
    "resolve_padding",
    "softmax_temperature",
    "topological_order",
    "upsample_nearest",
]
