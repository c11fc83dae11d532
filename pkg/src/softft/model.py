"""Shared-backbone network with named linear classifier heads."""

from __future__ import annotations

import copy
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    HeadExistsError,
    HeadNotFoundError,
    TruncatedFileError,
)
from .seeding import derive_seed, rng_for

CHECKPOINT_MAGIC = b"SFTCKPT1"
CHECKPOINT_VERSION = 1

_HEAD_ID = re.compile(r"^[A-Za-z0-9_]+$")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "linear"
    out: int
    kernel: int = 0
    stride: int = 1

    def __str__(self) -> str:
        if self.kind == "conv":
            return f"conv:{self.out}:{self.kernel}:{self.stride}"
        return f"linear:{self.out}"

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        parts = text.strip().split(":")
        try:
            if parts[0] == "conv" and len(parts) == 4:
                return cls("conv", int(parts[1]), int(parts[2]), int(parts[3]))
            if parts[0] == "linear" and len(parts) == 2:
                return cls("linear", int(parts[1]))
        except ValueError:
            pass
        raise ConfigError(f"bad layer spec {text!r}; expected conv:OUT:KERNEL:STRIDE or linear:OUT")


@dataclass(frozen=True)
class BackboneConfig:
    """Input shape plus a chain of conv+relu / linear+relu layers.

    ``input_shape`` is ``(d,)`` for vector input or ``(C, H, W)`` for images.
    """

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.layer_shapes()

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer (per sample); validates the chain."""
        if len(self.input_shape) not in (1, 3) or min(self.input_shape, default=0) < 1:
            raise ConfigError(f"input shape must be (d,) or (C, H, W), got {self.input_shape}")
        if not self.layers:
            raise ConfigError("backbone needs at least one layer")
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if layer.out < 1:
                raise ConfigError(f"layer {i} ({layer}): output size must be positive")
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ConfigError(f"layer {i} ({layer}): conv needs image input, got {shape}")
                if layer.kernel < 1 or layer.stride < 1:
                    raise ConfigError(f"layer {i} ({layer}): kernel and stride must be positive")
                _, h, w = shape
                if layer.kernel > h or layer.kernel > w:
                    raise ConfigError(f"layer {i} ({layer}): kernel larger than input {h}x{w}")
                shape = (
                    layer.out,
                    (h - layer.kernel) // layer.stride + 1,
                    (w - layer.kernel) // layer.stride + 1,
                )
            elif layer.kind == "linear":
                shape = (layer.out,)
            else:
                raise ConfigError(f"layer {i}: unknown kind {layer.kind!r}")
            shapes.append(shape)
        return shapes

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.layer_shapes()[-1]))

    def fan_ins(self) -> list[int]:
        fans = []
        shape = self.input_shape
        for layer, out_shape in zip(self.layers, self.layer_shapes()):
            if layer.kind == "conv":
                fans.append(shape[0] * layer.kernel * layer.kernel)
            else:
                fans.append(int(np.prod(shape)))
            shape = out_shape
        return fans


@dataclass
class Head:
    weight: Tensor  # D×K
    bias: Tensor  # K
    provenance: str = "fresh"  # "pretrained" or "fresh"

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]


@dataclass
class DualHeadModel:
    config: BackboneConfig
    backbone: list[tuple[Tensor, Tensor]]
    heads: dict[str, Head] = field(default_factory=dict)

    def parameters(self, include_heads=None) -> list[tuple[str, Tensor]]:
        """Named parameters in a fixed order: backbone layers, then heads by insertion."""
        named = []
        for i, (w, b) in enumerate(self.backbone):
            named.append((f"backbone.{i}.weight", w))
            named.append((f"backbone.{i}.bias", b))
        for hid, head in self.heads.items():
            if include_heads is not None and hid not in include_heads:
                continue
            named.append((f"head.{hid}.weight", head.weight))
            named.append((f"head.{hid}.bias", head.bias))
        return named

    def num_parameters(self, heads: bool = True) -> int:
        params = self.parameters() if heads else self.parameters(include_heads=())
        return sum(p.size for _, p in params)

    def copy(self) -> "DualHeadModel":
        return copy.deepcopy(self)

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()


def _init_weight(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _new_head(dim: int, num_classes: int, seed: int) -> Head:
    if num_classes < 1:
        raise ConfigError(f"head needs at least one class, got {num_classes}")
    rng = rng_for(seed, "head")
    w = Tensor(_init_weight(rng, (dim, num_classes), dim), track_grad=True)
    b = Tensor(np.zeros(num_classes), track_grad=True)
    return Head(w, b, "fresh")


def build_model(config: BackboneConfig, head_specs, seed: int) -> DualHeadModel:
    """Gaussian He-initialised backbone and heads, fully determined by ``seed``."""
    backbone = []
    shape = config.input_shape
    for i, (layer, fan_in) in enumerate(zip(config.layers, config.fan_ins())):
        rng = rng_for(seed, "backbone", i)
        if layer.kind == "conv":
            wshape = (layer.out, shape[0], layer.kernel, layer.kernel)
        else:
            wshape = (int(np.prod(shape)), layer.out)
        w = Tensor(_init_weight(rng, wshape, fan_in), track_grad=True)
        b = Tensor(np.zeros(layer.out), track_grad=True)
        backbone.append((w, b))
        shape = config.layer_shapes()[i]
    model = DualHeadModel(config, backbone, {})
    for head_id, k in head_specs:
        _check_head_id(head_id)
        if head_id in model.heads:
            raise HeadExistsError(f"duplicate head id {head_id!r}")
        model.heads[head_id] = _new_head(config.feature_dim, k, derive_seed(seed, "head", head_id))
    return model


def _check_head_id(head_id: str) -> None:
    if not _HEAD_ID.match(head_id):
        raise ConfigError(f"head id {head_id!r} must match [A-Za-z0-9_]+")


def forward_features(model: DualHeadModel, batch) -> Tensor:
    """Backbone output (B×D) for a batch of inputs."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = model.config.input_shape
    if x.values.ndim != len(expected) + 1 or tuple(x.shape[1:]) != expected:
        raise DimensionError(f"batch shape {x.shape} does not match input B×{'×'.join(map(str, expected))}")
    n = x.shape[0]
    for layer, (w, b) in zip(model.config.layers, model.backbone):
        if layer.kind == "conv":
            x = ad.conv2d(x, w, layer.stride)
            x = ad.add(x, ad.reshape(b, (layer.out, 1, 1)))
        else:
            if x.values.ndim != 2:
                x = ad.reshape(x, (n, -1))
            x = ad.add(ad.matmul(x, w), b)
        x = ad.relu(x)
    if x.values.ndim != 2:
        x = ad.reshape(x, (n, -1))
    return x


def forward_head(model: DualHeadModel, head_id: str, features: Tensor) -> Tensor:
    if head_id not in model.heads:
        raise HeadNotFoundError(head_id)
    head = model.heads[head_id]
    if features.values.ndim != 2 or features.shape[1] != head.weight.shape[0]:
        raise DimensionError(f"features {features.shape} do not match head {head_id!r} {head.weight.shape}")
    return ad.add(ad.matmul(features, head.weight), head.bias)


def add_head(model: DualHeadModel, head_id: str, num_classes: int, seed: int) -> DualHeadModel:
    """Copy of ``model`` with one new randomly initialised head; nothing else changes."""
    _check_head_id(head_id)
    if head_id in model.heads:
        raise HeadExistsError(f"head {head_id!r} already exists")
    out = model.copy()
    out.heads[head_id] = _new_head(model.config.feature_dim, num_classes, seed)
    return out


def replace_head(model: DualHeadModel, head_id: str, num_classes: int, seed: int) -> DualHeadModel:
    """Copy of ``model`` with ``head_id`` freshly re-initialised (the ordinary fine-tuning move)."""
    if head_id not in model.heads:
        raise HeadNotFoundError(head_id)
    out = model.copy()
    out.heads[head_id] = _new_head(model.config.feature_dim, num_classes, seed)
    return out


def remove_head(model: DualHeadModel, head_id: str) -> DualHeadModel:
    if head_id not in model.heads:
        raise HeadNotFoundError(head_id)
    out = model.copy()
    del out.heads[head_id]
    return out


def mark_pretrained(model: DualHeadModel) -> None:
    for head in model.heads.values():
        head.provenance = "pretrained"


# --- checkpoint format -------------------------------------------------------
#
# magic "SFTCKPT1" | u32 version | u32 block count | blocks
# block: u32 name length | utf-8 name | u32 rank | rank x u64 dims | f64 values (LE)
#
# Block names carry the architecture so a checkpoint is self-describing:
#   "input"                                  values = input dims
#   "backbone/<i>/conv/<stride>/weight|bias"
#   "backbone/<i>/linear/weight|bias"
#   "head/<id>/<provenance>/weight|bias"


def _blocks(model: DualHeadModel) -> list[tuple[str, np.ndarray]]:
    blocks = [("input", np.array(model.config.input_shape, dtype=np.float64))]
    for i, (layer, (w, b)) in enumerate(zip(model.config.layers, model.backbone)):
        prefix = f"backbone/{i}/conv/{layer.stride}" if layer.kind == "conv" else f"backbone/{i}/linear"
        blocks.append((f"{prefix}/weight", w.values))
        blocks.append((f"{prefix}/bias", b.values))
    for hid, head in model.heads.items():
        blocks.append((f"head/{hid}/{head.provenance}/weight", head.weight.values))
        blocks.append((f"head/{hid}/{head.provenance}/bias", head.bias.values))
    return blocks


def checkpoint_size(model: DualHeadModel) -> int:
    """Byte size of the checkpoint file ``save_checkpoint`` writes for ``model``."""
    size = 8 + 4 + 4
    for name, values in _blocks(model):
        size += 4 + len(name.encode("utf-8")) + 4 + 8 * values.ndim + 8 * values.size
    return size


def save_checkpoint(model: DualHeadModel, path) -> None:
    blocks = _blocks(model)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blocks))]
    for name, values in blocks:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        parts.append(np.ascontiguousarray(values, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def load_checkpoint(path) -> DualHeadModel:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if len(data) < 8 or r.take(8) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, count = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    blocks = []
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        blocks.append((name, r.array(tuple(int(d) for d in shape))))
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    return _from_blocks(blocks, path)


def _from_blocks(blocks, path) -> DualHeadModel:
    if not blocks or blocks[0][0] != "input":
        raise FormatError(f"{path}: missing input block")
    input_shape = tuple(int(v) for v in blocks[0][1])
    layers, backbone, heads = [], [], {}
    rest = blocks[1:]
    if len(rest) % 2:
        raise FormatError(f"{path}: unpaired parameter block")
    for (wname, w), (bname, b) in zip(rest[0::2], rest[1::2]):
        wparts, bparts = wname.split("/"), bname.split("/")
        if wparts[-1] != "weight" or bparts[-1] != "bias" or wparts[:-1] != bparts[:-1]:
            raise FormatError(f"{path}: unexpected blocks {wname!r}, {bname!r}")
        if wparts[0] == "backbone":
            if wparts[2] == "conv" and len(wparts) == 5:
                layers.append(LayerSpec("conv", w.shape[0], w.shape[2], int(wparts[3])))
            elif wparts[2] == "linear" and len(wparts) == 4:
                layers.append(LayerSpec("linear", w.shape[1]))
            else:
                raise FormatError(f"{path}: bad backbone block {wname!r}")
            backbone.append((Tensor(w, track_grad=True), Tensor(b, track_grad=True)))
        elif wparts[0] == "head" and len(wparts) == 4:
            heads[wparts[1]] = Head(Tensor(w, track_grad=True), Tensor(b, track_grad=True), wparts[2])
        else:
            raise FormatError(f"{path}: unknown block {wname!r}")
    try:
        config = BackboneConfig(input_shape, tuple(layers))
    except ConfigError as exc:
        raise FormatError(f"{path}: inconsistent architecture: {exc}") from exc
    return DualHeadModel(config, backbone, heads)
