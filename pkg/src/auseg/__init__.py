"""Attention-guided dense-upsampling segmentation toolkit.

A small research stack built on a self-contained differentiable tensor core:
encoder/decoder segmentation networks with channel attention and sub-pixel
upsampling, combined Dice + cross-entropy training, evaluation metrics with
paired significance testing, a synthetic data generator, and a CLI.
"""

__version__ = "0.1.0"

from .substrate import (  # noqa: F401
    NonFiniteError,
    ParamTensor,
    ShapeError,
    Tensor4,
    grad_check,
)
