"""Network building blocks: encoder/decoder units, channel attention, and
the two decoder fusion blocks (plain bilinear fusion vs attention-guided
fusion with dense sub-pixel upsampling).

Blocks are plain functions over parameter dataclasses, so tests can build
them with hand-set weights. Factories at the bottom create freshly
initialized blocks (He-normal weights, zero biases) and register every
parameter under a dotted path name.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .substrate import (
    BNState,
    ParamTensor,
    ShapeError,
    Tensor4,
    add,
    batch_norm,
    bilinear_up2,
    channel_mean,
    channel_scale,
    concat_channels,
    conv2d,
    dtype_of,
    pixel_shuffle2,
    relu,
    sigmoid,
)


class UnitKind(str, enum.Enum):
    """Encoder/decoder unit families."""

    BASIC = "basic"
    DEEP = "deep"
    RES = "res"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown unit kind {value!r}; expected basic|deep|res")


class UpsamplerKind(str, enum.Enum):
    """Decoder fusion block families."""

    BU = "bu"
    AU = "au"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown upsampler {value!r}; expected bu|au")


_UNIT_CONV_COUNT = {UnitKind.BASIC: 2, UnitKind.DEEP: 3, UnitKind.RES: 3}


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class ConvLayer:
    weight: ParamTensor  # (cout, cin, k, k)
    bias: ParamTensor    # (1, cout, 1, 1)

    @property
    def kernel(self):
        return self.weight.shape[2]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias)


@dataclass
class BNLayer:
    gamma: ParamTensor
    beta: ParamTensor
    state: BNState

    def __call__(self, x, mode):
        return batch_norm(x, self.gamma, self.beta, self.state, mode)


@dataclass
class UnitParams:
    """One encoder/decoder unit: a fixed stack of 3x3 convolutions.

    basic: conv-relu, conv-relu
    deep:  conv-relu, conv-relu, conv-relu
    res:   relu(conv3(relu(conv2(relu(conv1(x))))) + conv1(x)), where the
           first convolution is shared between the main path and the skip
           (its pre-activation output feeds both)

    When bns is non-empty each convolution is followed by batch norm before
    its ReLU; the res skip then reuses the normalized pre-activation.
    """

    kind: UnitKind
    convs: list
    bns: list = field(default_factory=list)

    @property
    def in_channels(self):
        return self.convs[0].weight.shape[1]

    @property
    def out_channels(self):
        return self.convs[-1].out_channels


@dataclass
class AttentionParams:
    """Squeeze-excitation style channel gate over C channels.

    w1 maps the pooled channel descriptor C -> C // ratio, w2 maps back.
    C must be divisible by ratio.
    """

    w1: ParamTensor  # (C//ratio, C, 1, 1)
    b1: ParamTensor
    w2: ParamTensor  # (C, C//ratio, 1, 1)
    b2: ParamTensor
    ratio: int

    def __post_init__(self):
        hidden, c = self.w1.shape[0], self.w1.shape[1]
        if c % self.ratio != 0 or hidden != c // self.ratio:
            raise ShapeError(
                f"channel_attention: {c} channels not reducible by ratio {self.ratio} "
                f"to hidden size {hidden}")
        if self.w2.shape[0] != c or self.w2.shape[1] != hidden:
            raise ShapeError(
                f"channel_attention: w2 shape {self.w2.shape} inconsistent with w1 {self.w1.shape}")

    @property
    def channels(self):
        return self.w1.shape[1]


@dataclass
class BUBlockParams:
    """Plain fusion: upsample high-level features, convolve, concatenate."""

    conv: ConvLayer
    bn: BNLayer


@dataclass
class AUBlockParams:
    """Attention-guided fusion block parameters.

    duc_conv feeds the sub-pixel upsampling path (4n channels before the
    rearrangement), buc_conv the bilinear path, smooth_conv processes the
    sum of the dense path with the low-level features. Every convolution is
    followed by batch norm and ReLU. The trailing unit reduces the gated 2n
    channels back to n.
    """

    duc_conv: ConvLayer
    duc_bn: BNLayer
    buc_conv: ConvLayer
    buc_bn: BNLayer
    smooth_conv: ConvLayer
    smooth_bn: BNLayer
    attention: AttentionParams
    unit: UnitParams


# ---------------------------------------------------------------------------
# forward functions
# ---------------------------------------------------------------------------

def _conv_bn_relu(x, conv, bn, mode):
    y = conv(x)
    if bn is not None:
        y = bn(y, mode)
    return relu(y)


def unit_forward(x, unit: UnitParams, mode="train"):
    """Apply an encoder/decoder unit of any kind."""
    bns = unit.bns if unit.bns else [None] * len(unit.convs)
    if unit.kind in (UnitKind.BASIC, UnitKind.DEEP):
        h = x
        for conv, bn in zip(unit.convs, bns):
            h = _conv_bn_relu(h, conv, bn, mode)
        return h
    if unit.kind is UnitKind.RES:
        first = unit.convs[0](x)
        if bns[0] is not None:
            first = bns[0](first, mode)
        h = relu(first)
        h = _conv_bn_relu(h, unit.convs[1], bns[1], mode)
        h = unit.convs[2](h)
        if bns[2] is not None:
            h = bns[2](h, mode)
        return relu(add(h, first))
    raise ValueError(f"unknown unit kind {unit.kind!r}")


def basic_unit(x, unit, mode="train"):
    if unit.kind is not UnitKind.BASIC:
        raise ValueError(f"basic_unit called with {unit.kind}")
    return unit_forward(x, unit, mode)


def deep_unit(x, unit, mode="train"):
    if unit.kind is not UnitKind.DEEP:
        raise ValueError(f"deep_unit called with {unit.kind}")
    return unit_forward(x, unit, mode)


def res_unit(x, unit, mode="train"):
    if unit.kind is not UnitKind.RES:
        raise ValueError(f"res_unit called with {unit.kind}")
    return unit_forward(x, unit, mode)


def duc_up2(f_high, conv: ConvLayer, *, bn: Optional[BNLayer] = None, mode="train"):
    """Dense sub-pixel x2 upsampling.

    A convolution expands to 4n channels at the input resolution; the pixel
    rearrangement then folds each channel quadruple into a 2x2 spatial
    block, giving n channels at twice the resolution. With bn given, batch
    norm + ReLU sit between the convolution and the rearrangement.
    """
    c4 = conv.out_channels
    if c4 % 4 != 0:
        raise ShapeError(f"duc_up2: conv must produce 4n channels, got {c4}")
    y = conv(f_high)
    if bn is not None:
        y = relu(bn(y, mode))
    return pixel_shuffle2(y)


def channel_attention(f_concat, att: AttentionParams):
    """Gate channels of f_concat by a squeeze-excitation weighting.

    The spatial mean of each channel feeds a two-layer bottleneck
    (C -> C/ratio -> C) whose sigmoid output rescales the corresponding
    input channel.
    """
    c = f_concat.shape[1]
    if c != att.channels:
        raise ShapeError(
            f"channel_attention: input has {c} channels, parameters expect {att.channels}")
    z = channel_mean(f_concat)
    h = relu(conv2d(z, att.w1, att.b1, padding=0))
    s = sigmoid(conv2d(h, att.w2, att.b2, padding=0))
    return channel_scale(f_concat, s)


def bu_block(f_high, f_low, params: BUBlockParams, mode="train"):
    """Baseline fusion: bilinear-upsample f_high, convolve to n channels
    (batch norm + ReLU), concatenate with f_low.

    Channel order of the output is fixed: [conv(up(f_high)), f_low], for
    2n channels at f_low resolution.
    """
    n = f_low.shape[1]
    if params.conv.out_channels != n:
        raise ShapeError(
            f"bu_block: conv produces {params.conv.out_channels} channels, "
            f"low path has {n}")
    up = _conv_bn_relu(bilinear_up2(f_high), params.conv, params.bn, mode)
    if up.shape[2:] != f_low.shape[2:]:
        raise ShapeError(
            f"bu_block: upsampled high path {up.shape} does not match low path {f_low.shape}")
    return concat_channels([up, f_low])


def au_block(f_high, f_low, params: AUBlockParams, mode="train"):
    """Attention-guided fusion producing n channels at f_low resolution.

    dense path:    duc = shuffle(relu(bn(conv_4n(f_high))))
    bilinear path: buc = relu(bn(conv_n(up2(f_high))))
    merge:         smooth = relu(bn(conv_n(duc + f_low)))
    gate:          gated = channel_attention([smooth, buc])
    output:        trailing unit reduces 2n -> n
    """
    n = f_low.shape[1]
    duc = duc_up2(f_high, params.duc_conv, bn=params.duc_bn, mode=mode)
    if duc.shape != f_low.shape:
        raise ShapeError(
            f"au_block: dense path shape {duc.shape} does not match low path {f_low.shape}")
    buc = _conv_bn_relu(bilinear_up2(f_high), params.buc_conv, params.buc_bn, mode)
    f_sum = add(duc, f_low)
    smooth = _conv_bn_relu(f_sum, params.smooth_conv, params.smooth_bn, mode)
    f_concat = concat_channels([smooth, buc])
    gated = channel_attention(f_concat, params.attention)
    return unit_forward(gated, params.unit, mode)


# ---------------------------------------------------------------------------
# initialization factories
# ---------------------------------------------------------------------------

class ParamRegistry:
    """Collects parameters and batch-norm states under unique dotted names."""

    def __init__(self):
        self.params = {}
        self.bn_states = {}

    def add(self, param: ParamTensor):
        if param.name in self.params:
            raise ValueError(f"duplicate parameter name {param.name!r}")
        self.params[param.name] = param
        return param

    def add_bn_state(self, name, state: BNState):
        if name in self.bn_states:
            raise ValueError(f"duplicate batch-norm state name {name!r}")
        self.bn_states[name] = state
        return state


def he_normal(rng, shape, dtype):
    """He-normal init for conv/linear weights: std = sqrt(2 / fan_in)."""
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def make_conv(rng, reg: ParamRegistry, name, cin, cout, kernel=3, dtype="single"):
    dt = dtype_of(dtype) if isinstance(dtype, str) else dtype
    weight = reg.add(ParamTensor(he_normal(rng, (cout, cin, kernel, kernel), dt),
                                 f"{name}.weight"))
    bias = reg.add(ParamTensor(np.zeros((1, cout, 1, 1), dtype=dt), f"{name}.bias"))
    return ConvLayer(weight, bias)


def make_bn(rng, reg: ParamRegistry, name, channels, dtype="single"):
    dt = dtype_of(dtype) if isinstance(dtype, str) else dtype
    gamma = reg.add(ParamTensor(np.ones((1, channels, 1, 1), dtype=dt), f"{name}.gamma"))
    beta = reg.add(ParamTensor(np.zeros((1, channels, 1, 1), dtype=dt), f"{name}.beta"))
    state = reg.add_bn_state(name, BNState.create(channels, dt))
    return BNLayer(gamma, beta, state)


def make_unit(rng, reg, name, kind, cin, cout, *, batch_norm_units=False, dtype="single"):
    kind = UnitKind.parse(kind)
    n_convs = _UNIT_CONV_COUNT[kind]
    convs, bns = [], []
    c = cin
    for i in range(n_convs):
        convs.append(make_conv(rng, reg, f"{name}.conv{i + 1}", c, cout, 3, dtype))
        if batch_norm_units:
            bns.append(make_bn(rng, reg, f"{name}.bn{i + 1}", cout, dtype))
        c = cout
    return UnitParams(kind=kind, convs=convs, bns=bns)


def make_attention(rng, reg, name, channels, ratio, dtype="single"):
    if channels % ratio != 0:
        raise ShapeError(
            f"attention over {channels} channels: reduction ratio {ratio} must divide it")
    hidden = channels // ratio
    dt = dtype_of(dtype) if isinstance(dtype, str) else dtype
    w1 = reg.add(ParamTensor(he_normal(rng, (hidden, channels, 1, 1), dt), f"{name}.w1"))
    b1 = reg.add(ParamTensor(np.zeros((1, hidden, 1, 1), dtype=dt), f"{name}.b1"))
    w2 = reg.add(ParamTensor(he_normal(rng, (channels, hidden, 1, 1), dt), f"{name}.w2"))
    b2 = reg.add(ParamTensor(np.zeros((1, channels, 1, 1), dtype=dt), f"{name}.b2"))
    return AttentionParams(w1, b1, w2, b2, ratio)


def make_bu_block(rng, reg, name, c_high, n, dtype="single"):
    conv = make_conv(rng, reg, f"{name}.conv", c_high, n, 3, dtype)
    bn = make_bn(rng, reg, f"{name}.bn", n, dtype)
    return BUBlockParams(conv=conv, bn=bn)


def make_au_block(rng, reg, name, c_high, n, ratio, unit_kind, *,
                  batch_norm_units=False, dtype="single"):
    duc_conv = make_conv(rng, reg, f"{name}.duc", c_high, 4 * n, 3, dtype)
    duc_bn = make_bn(rng, reg, f"{name}.duc_bn", 4 * n, dtype)
    buc_conv = make_conv(rng, reg, f"{name}.buc", c_high, n, 3, dtype)
    buc_bn = make_bn(rng, reg, f"{name}.buc_bn", n, dtype)
    smooth_conv = make_conv(rng, reg, f"{name}.smooth", n, n, 3, dtype)
    smooth_bn = make_bn(rng, reg, f"{name}.smooth_bn", n, dtype)
    attention = make_attention(rng, reg, f"{name}.att", 2 * n, ratio, dtype)
    unit = make_unit(rng, reg, f"{name}.unit", unit_kind, 2 * n, n,
                     batch_norm_units=batch_norm_units, dtype=dtype)
    return AUBlockParams(duc_conv, duc_bn, buc_conv, buc_bn,
                         smooth_conv, smooth_bn, attention, unit)
