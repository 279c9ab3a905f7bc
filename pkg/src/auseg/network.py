"""Full segmentation network assembly: a five-level encoder over {basic,
deep, res} units, a four-stage decoder over {plain bilinear, attention-
guided} fusion blocks, and a 1x1 sigmoid head. Includes deterministic
initialization, parameter counting, and a versioned binary checkpoint
format.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import blocks as B
from .substrate import ParamTensor, ShapeError, Tensor4, conv2d, dtype_of, max_pool2, sigmoid

DEPTH = 5          # encoder levels
POOLINGS = 4       # number of 2x2 poolings => downsampling ratio 16
DOWNSAMPLE = 2 ** POOLINGS


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Level widths are base_width * 2**level for levels 0..4. The attention
    reduction ratio must divide the concatenated channel count (twice the
    level width) at every decoder stage, i.e. 2 * base_width.
    """

    encoder_unit: B.UnitKind = B.UnitKind.RES
    decoder_unit: B.UnitKind = B.UnitKind.BASIC
    upsampler: B.UpsamplerKind = B.UpsamplerKind.AU
    base_width: int = 8
    reduction_ratio: int = 16
    unit_batch_norm: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_unit", B.UnitKind.parse(self.encoder_unit))
        object.__setattr__(self, "decoder_unit", B.UnitKind.parse(self.decoder_unit))
        object.__setattr__(self, "upsampler", B.UpsamplerKind.parse(self.upsampler))
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.reduction_ratio < 1:
            raise ValueError(f"reduction_ratio must be >= 1, got {self.reduction_ratio}")
        if self.upsampler is B.UpsamplerKind.AU and (2 * self.base_width) % self.reduction_ratio:
            raise ValueError(
                f"reduction_ratio {self.reduction_ratio} must divide twice the base width "
                f"({2 * self.base_width}) so every attention gate is well-formed")

    def widths(self):
        return [self.base_width * (2 ** level) for level in range(DEPTH)]

    @property
    def name(self):
        base = (f"{self.encoder_unit.value.capitalize()}-"
                f"{self.decoder_unit.value.capitalize()}-UNet")
        if self.upsampler is B.UpsamplerKind.AU:
            return base + "+AU"
        return base

    def to_dict(self):
        return {
            "encoder_unit": self.encoder_unit.value,
            "decoder_unit": self.decoder_unit.value,
            "upsampler": self.upsampler.value,
            "base_width": self.base_width,
            "reduction_ratio": self.reduction_ratio,
            "unit_batch_norm": self.unit_batch_norm,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Model:
    """A built network: parameter registry plus the layer structure."""

    def __init__(self, config, registry, encoder, decoder, head, dtype):
        self.config = config
        self.params = registry.params            # name -> ParamTensor
        self.bn_states = registry.bn_states      # name -> BNState
        self.encoder = encoder                   # list[UnitParams]
        self.decoder = decoder                   # list of ("bu", block, unit) | ("au", block)
        self.head = head                         # ConvLayer
        self.dtype = dtype                       # "single" | "double"

    @property
    def name(self):
        return self.config.name

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        """All persistent arrays keyed by checkpoint name (params + BN stats)."""
        out = {f"param:{name}": p.data for name, p in self.params.items()}
        for name, st in self.bn_states.items():
            out[f"bnstat:{name}:mean"] = st.running_mean
            out[f"bnstat:{name}:var"] = st.running_var
        return out


def build(config: ModelConfig, dtype="single"):
    """Deterministically initialize a model from config.seed.

    Conv and attention weights are He-normal, biases zero, batch-norm scale
    one and shift zero. Identical config (and dtype) always yields bitwise
    identical parameters.
    """
    dtype_of(dtype)  # validate
    rng = np.random.default_rng(config.seed)
    reg = B.ParamRegistry()
    widths = config.widths()

    encoder = []
    cin = 3
    for level, width in enumerate(widths):
        encoder.append(B.make_unit(rng, reg, f"enc{level}", config.encoder_unit,
                                   cin, width, batch_norm_units=config.unit_batch_norm,
                                   dtype=dtype))
        cin = width

    decoder = []
    for level in range(POOLINGS - 1, -1, -1):  # 3, 2, 1, 0
        c_high = widths[level + 1]
        n = widths[level]
        if config.upsampler is B.UpsamplerKind.BU:
            block = B.make_bu_block(rng, reg, f"dec{level}.fuse", c_high, n, dtype=dtype)
            unit = B.make_unit(rng, reg, f"dec{level}.unit", config.decoder_unit,
                               2 * n, n, batch_norm_units=config.unit_batch_norm,
                               dtype=dtype)
            decoder.append(("bu", block, unit))
        else:
            block = B.make_au_block(rng, reg, f"dec{level}.fuse", c_high, n,
                                    config.reduction_ratio, config.decoder_unit,
                                    batch_norm_units=config.unit_batch_norm, dtype=dtype)
            decoder.append(("au", block))

    head = B.make_conv(rng, reg, "head", widths[0], 1, kernel=1, dtype=dtype)
    return Model(config, reg, encoder, decoder, head, dtype)


def forward(model: Model, batch, mode="eval"):
    """Run the network on a (N, 3, H, W) batch; H and W must be divisible
    by 16. Returns per-pixel probabilities (N, 1, H, W) in (0, 1)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = batch if isinstance(batch, Tensor4) else Tensor4(batch, dtype=model.dtype)
    n, c, h, w = x.shape
    if c != 3:
        raise ShapeError(f"forward: expected 3 input channels, got shape {x.shape}")
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ShapeError(
            f"forward: spatial dims must be divisible by {DOWNSAMPLE}, got {(h, w)}")

    skips = []
    feat = x
    for level, unit in enumerate(model.encoder):
        feat = B.unit_forward(feat, unit, mode)
        if level < POOLINGS:
            skips.append(feat)
            feat = max_pool2(feat)

    for entry, level in zip(model.decoder, range(POOLINGS - 1, -1, -1)):
        if entry[0] == "bu":
            _, block, unit = entry
            feat = B.bu_block(feat, skips[level], block, mode)
            feat = B.unit_forward(feat, unit, mode)
        else:
            feat = B.au_block(feat, skips[level], entry[1], mode)

    logits = conv2d(feat, model.head.weight, model.head.bias, padding=0)
    return sigmoid(logits)


def count_params(model: Model):
    """Total number of trainable scalars."""
    return int(sum(p.data.size for p in model.params.values()))


# ---------------------------------------------------------------------------
# checkpoint IO
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   bytes 0..7    magic b"AUSEGCKP"
#   bytes 8..11   format version (u32)
#   bytes 12..15  header length L (u32)
#   bytes 16..16+L  UTF-8 JSON header:
#       {"config": {...}, "dtype": "single"|"double",
#        "entries": [{"key", "dtype", "shape", "offset", "nbytes"}, ...]}
#   remaining     raw array bytes, C-order, at the stated offsets
#
# Entries are sorted by key, so identical states produce identical bytes.

CHECKPOINT_MAGIC = b"AUSEGCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint."""


def save_model(model: Model, path):
    arrays = model.state_arrays()
    entries = []
    blob = io.BytesIO()
    offset = 0
    for key in sorted(arrays):
        arr = np.ascontiguousarray(arrays[key])
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"key": key, "dtype": str(arr.dtype), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blob.write(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "dtype": model.dtype,
                         "entries": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(blob.getvalue())
    return path


def _read_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 16 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {e}") from e
    body = raw[16 + hlen:]
    arrays = {}
    for ent in header["entries"]:
        start, nbytes = ent["offset"], ent["nbytes"]
        chunk = body[start:start + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated checkpoint (entry {ent['key']!r})")
        arrays[ent["key"]] = np.frombuffer(chunk, dtype=np.dtype(ent["dtype"])) \
            .reshape(ent["shape"]).copy()
    return header, arrays


def load_model(path, expected_config: ModelConfig = None):
    """Rebuild a model from a checkpoint.

    With expected_config given, the stored architecture must match it
    exactly (seed aside, every field participates in the layer shapes).
    """
    header, arrays = _read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    if expected_config is not None:
        stored, wanted = config.to_dict(), expected_config.to_dict()
        stored.pop("seed"), wanted.pop("seed")  # init seed is irrelevant once trained
        if stored != wanted:
            raise CheckpointError(
                f"checkpoint model config mismatch: stored {stored}, requested {wanted}")
    model = build(config, dtype=header["dtype"])
    expected = model.state_arrays()
    if set(expected) != set(arrays):
        missing = sorted(set(expected) ^ set(arrays))[:5]
        raise CheckpointError(f"{path}: checkpoint entries do not match architecture "
                              f"(first differences: {missing})")
    for name, p in model.params.items():
        arr = arrays[f"param:{name}"]
        if tuple(arr.shape) != p.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: "
                                  f"{arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=False)
    for name, st in model.bn_states.items():
        st.running_mean = arrays[f"bnstat:{name}:mean"].astype(st.running_mean.dtype,
                                                               copy=False)
        st.running_var = arrays[f"bnstat:{name}:var"].astype(st.running_var.dtype,
                                                             copy=False)
    return model


def load_params_into(model: Model, path):
    """Fine-tuning entry: copy a checkpoint's arrays into an existing model."""
    loaded = load_model(path, expected_config=model.config)
    for name, p in model.params.items():
        p.data = loaded.params[name].data
    for name, st in model.bn_states.items():
        st.running_mean = loaded.bn_states[name].running_mean
        st.running_var = loaded.bn_states[name].running_var
    return model
