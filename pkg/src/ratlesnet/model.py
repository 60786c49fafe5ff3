"""Encoder-decoder segmentation network built from dense blocks.

A dense block holds two 3x3x3 convolutions.  The first reads the block
input; the second reads the concatenation of the input and the first ReLU
output; the block emits the concatenation of all three, so each block adds
twice the growth rate to its channel count.  The encoder alternates dense
blocks with 2x2x2 max pooling; the decoder mirrors it with 1x1x1 bottleneck
convolutions, unpooling through the matching pool indices, and dense blocks.
A final 1x1x1 convolution maps to per-class logits (no activation).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .nifti import Mask, Volume
from .ops import ConvParams, PoolContext, concat_channels, conv3d, maxpool3d, relu, unpool3d
from .tensor import Graph, Tensor, active_graph

_MAGIC = b"RLNET1"


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 1
    num_classes: int = 2
    growth_rate: int = 18
    levels: int = 2
    seed: int = 42

    def __post_init__(self) -> None:
        for field in ("input_channels", "num_classes", "growth_rate", "levels"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive, got {getattr(self, field)}")


def _layer_plan(config: ModelConfig) -> list[tuple[str, str, int, int]]:
    """Yield (kind, name, in_channels, out_channels) in forward order.

    Dense blocks are listed by their two convolutions; their out_channels
    entry is the post-concatenation width.
    """
    g = config.growth_rate
    plan: list[tuple[str, str, int, int]] = []

    def dense(name: str, c_in: int) -> int:
        plan.append(("conv3", f"{name}.conv0", c_in, g))
        plan.append(("conv3", f"{name}.conv1", c_in + g, g))
        return c_in + 2 * g

    # Encoder: channel width after the dense block at depth i.
    widths = []
    c = config.input_channels
    for i in range(config.levels):
        c = dense(f"enc_block_{i}", c)
        widths.append(c)
    c = dense("bridge", c)
    for i in reversed(range(config.levels)):
        plan.append(("conv1", f"bottleneck_{i}", c, widths[i]))
        c = dense(f"dec_block_{i}", widths[i])
    plan.append(("conv1", "classifier", c, config.num_classes))
    return plan


class Model:
    """Parameter container; the forward pass lives in :func:`forward`."""

    def __init__(self, config: ModelConfig, layers: dict[str, ConvParams]):
        self.config = config
        self.layers = layers

    def parameters(self) -> list[tuple[str, Tensor]]:
        """All learnable tensors as (name, tensor), in layer order."""
        out = []
        for name, conv in self.layers.items():
            out.append((f"{name}.weight", conv.weight))
            out.append((f"{name}.bias", conv.bias))
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.parameters():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()


def build_model(config: ModelConfig, dtype: np.dtype | type = np.float32) -> Model:
    """Initialize all convolutions from the config seed.

    Weights draw from N(0, sqrt(2 / fan_in)) with fan_in = k^3 * in_channels;
    biases start at zero.  The draw order follows the layer plan, so equal
    configs produce identical parameters.
    """
    rng = np.random.default_rng(config.seed)
    layers: dict[str, ConvParams] = {}
    for kind, name, c_in, c_out in _layer_plan(config):
        k = 3 if kind == "conv3" else 1
        std = float(np.sqrt(2.0 / (k ** 3 * c_in)))
        w = rng.normal(0.0, std, size=(c_out, c_in, k, k, k)).astype(dtype)
        b = np.zeros((1, c_out, 1, 1, 1), dtype=dtype)
        layers[name] = ConvParams(weight=Tensor(w), bias=Tensor(b))
    return Model(config, layers)


def param_count(model: Model) -> int:
    """Total number of learnable scalars."""
    return sum(t.data.size for _, t in model.parameters())


def _dense_block(model: Model, name: str, x: Tensor) -> Tensor:
    a = relu(conv3d(x, model.layers[f"{name}.conv0"]))
    b = relu(conv3d(concat_channels((x, a)), model.layers[f"{name}.conv1"]))
    return concat_channels((x, a, b))


def forward(model: Model, x: Tensor) -> Tensor:
    """Map (b, in_ch, x, y, z) to per-class logits of the same grid size."""
    cfg = model.config
    if x.shape[1] != cfg.input_channels:
        raise ShapeError(f"model expects {cfg.input_channels} input channels, got {x.shape[1]}")
    need = 2 ** cfg.levels
    if any(e < need for e in x.shape[2:]):
        raise ShapeError(f"spatial extents {x.shape[2:]} too small for {cfg.levels} pooling levels")

    contexts: list[PoolContext] = []
    h = x
    for i in range(cfg.levels):
        h = _dense_block(model, f"enc_block_{i}", h)
        h, ctx = maxpool3d(h)
        contexts.append(ctx)
    h = _dense_block(model, "bridge", h)
    for i in reversed(range(cfg.levels)):
        h = relu(conv3d(h, model.layers[f"bottleneck_{i}"]))
        h = unpool3d(h, contexts[i])
        h = _dense_block(model, f"dec_block_{i}", h)
    return conv3d(h, model.layers["classifier"])


def predict_mask(model: Model, volume: Volume) -> Mask:
    """Segment one volume: argmax over class logits, ties to class 0."""
    if active_graph() is not None:
        # Inference inside a live tape would bloat it; run detached.
        with Graph():
            return predict_mask(model, volume)
    values = volume.values.astype(model.layers["classifier"].weight.dtype, copy=False)
    logits = forward(model, Tensor(values[None, None]))
    labels = np.argmax(logits.data[0], axis=0)  # first max wins: ties go to 0
    return Mask(values=labels.astype(np.uint8), voxel_size=volume.voxel_size)


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def to_bytes(model: Model) -> bytes:
    """Serialize config and float32 parameters, little-endian."""
    cfg = model.config
    parts = [_MAGIC,
             struct.pack("<4Iq", cfg.input_channels, cfg.num_classes,
                         cfg.growth_rate, cfg.levels, cfg.seed)]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, t in params:
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(_pack_name(name))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> Model:
    """Rebuild a model written by :func:`to_bytes`."""
    if buf[:len(_MAGIC)] != _MAGIC:
        raise FormatError("not a model checkpoint: bad magic")
    offset = len(_MAGIC)
    try:
        in_ch, n_cls, growth, levels, seed = struct.unpack_from("<4Iq", buf, offset)
        offset += struct.calcsize("<4Iq")
        config = ModelConfig(input_channels=in_ch, num_classes=n_cls,
                             growth_rate=growth, levels=levels, seed=seed)
        model = build_model(config)
        expected = model.parameters()
        (n_params,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if n_params != len(expected):
            raise FormatError(f"checkpoint holds {n_params} parameters, config implies {len(expected)}")
        for name, t in expected:
            (name_len,) = struct.unpack_from("<H", buf, offset)
            offset += 2
            stored = buf[offset:offset + name_len].decode("utf-8")
            offset += name_len
            if stored != name:
                raise FormatError(f"checkpoint parameter {stored!r} does not match expected {name!r}")
            (ndim,) = struct.unpack_from("<B", buf, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, offset)
            offset += 4 * ndim
            if shape != t.data.shape:
                raise FormatError(f"checkpoint shape {shape} for {name} does not match {t.data.shape}")
            size = int(np.prod(shape)) * 4
            if offset + size > len(buf):
                raise FormatError("checkpoint truncated")
            t.data = np.frombuffer(buf, dtype="<f4", count=int(np.prod(shape)),
                                   offset=offset).reshape(shape).copy()
            offset += size
    except struct.error as exc:
        raise FormatError(f"checkpoint truncated: {exc}") from None
    if offset != len(buf):
        raise FormatError(f"checkpoint has {len(buf) - offset} trailing bytes")
    return model


def save_checkpoint(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load_checkpoint(path: str | Path) -> Model:
    return from_bytes(Path(path).read_bytes())
