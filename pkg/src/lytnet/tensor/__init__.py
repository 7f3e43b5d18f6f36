"""Minimal NHWC tensor engine with reverse-mode differentiation."""
from . import ops
from .core import (
    Tensor,
    as_tensor,
    backward,
    build_tape,
    debug_mode,
    default_dtype,
    inject_fault,
    no_grad,
    precision,
)
from .gradcheck import GradCheckReport, finite_diff_check, finite_diff_report
from .ops import (
    concat_channels,
    conv2d,
    dense,
    depthwise_conv2d,
    elementwise,
    layer_norm,
    pool2d,
    softmax,
    upsample_bilinear,
)

__all__ = [
    "Tensor", "as_tensor", "backward", "build_tape", "debug_mode", "default_dtype",
    "inject_fault", "no_grad", "precision", "finite_diff_check", "finite_diff_report",
    "GradCheckReport", "ops",
    "conv2d", "depthwise_conv2d", "dense", "softmax", "layer_norm", "pool2d",
    "upsample_bilinear", "elementwise", "concat_channels",
]
