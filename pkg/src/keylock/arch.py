"""Classifier architectures with named shuffle insertion points.

Two presets: `resnet_tiny` (stem conv plus four residual stages, desk-scale
channel widths) and `cnn_micro` (conv-pool stack). Both expose the five
placements initial_conv and layer1..layer4, each resolving to the feature
map that leaves the named stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine.layers import (
    BatchNorm2d,
    BlockShuffle,
    Conv2d,
    GlobalAvgPool,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
    ResidualBlock,
)

# "input" shuffles the raw image (the prior method's baseline, channels = 3);
# the others lock internal feature maps.
PLACEMENT_IDS = ("input", "initial_conv", "layer1", "layer2", "layer3", "layer4")


@dataclass(frozen=True)
class Placement:
    """A named slot in the layer graph with its resolved feature-map shape."""

    id: str
    channels: int
    height: int
    width: int


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description; `kind` picks the layer, `args` its hyperparameters."""

    kind: str
    args: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ArchConfig:
    preset: str = "resnet_tiny"
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10
    widths: tuple[int, ...] = ()

    def resolved_widths(self) -> tuple[int, ...]:
        if self.widths:
            return self.widths
        return _DEFAULT_WIDTHS[self.preset]

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "widths": list(self.resolved_widths()),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            preset=d["preset"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            widths=tuple(d.get("widths") or ()),
        )


_DEFAULT_WIDTHS = {
    "resnet_tiny": (16, 32, 64, 128),
    "cnn_micro": (8, 16, 32, 64),
}


def _resnet_tiny_specs(arch: ArchConfig) -> list[tuple[str, LayerSpec]]:
    w1, w2, w3, w4 = arch.resolved_widths()
    return [
        ("shuffle.input", LayerSpec("block_shuffle", {"placement_id": "input"})),
        ("stem.conv", LayerSpec("conv2d", {"out_ch": w1, "kernel": 3, "stride": 1, "pad": 1})),
        ("stem.bn", LayerSpec("batchnorm2d", {})),
        ("stem.relu", LayerSpec("relu", {})),
        ("shuffle.initial_conv", LayerSpec("block_shuffle", {"placement_id": "initial_conv"})),
        ("layer1", LayerSpec("residual_block", {"out_ch": w1, "stride": 1})),
        ("shuffle.layer1", LayerSpec("block_shuffle", {"placement_id": "layer1"})),
        ("layer2", LayerSpec("residual_block", {"out_ch": w2, "stride": 2})),
        ("shuffle.layer2", LayerSpec("block_shuffle", {"placement_id": "layer2"})),
        ("layer3", LayerSpec("residual_block", {"out_ch": w3, "stride": 2})),
        ("shuffle.layer3", LayerSpec("block_shuffle", {"placement_id": "layer3"})),
        ("layer4", LayerSpec("residual_block", {"out_ch": w4, "stride": 2})),
        ("shuffle.layer4", LayerSpec("block_shuffle", {"placement_id": "layer4"})),
        ("pool", LayerSpec("global_avgpool", {})),
        ("head", LayerSpec("linear", {"out": arch.num_classes})),
    ]


def _cnn_micro_specs(arch: ArchConfig) -> list[tuple[str, LayerSpec]]:
    w1, w2, w3, w4 = arch.resolved_widths()
    specs: list[tuple[str, LayerSpec]] = []

    def conv_block(name, out_ch, placement=None):
        specs.append((f"{name}.conv", LayerSpec("conv2d", {"out_ch": out_ch, "kernel": 3, "stride": 1, "pad": 1})))
        specs.append((f"{name}.bn", LayerSpec("batchnorm2d", {})))
        specs.append((f"{name}.relu", LayerSpec("relu", {})))
        if placement:
            specs.append((f"shuffle.{placement}", LayerSpec("block_shuffle", {"placement_id": placement})))

    specs.append(("shuffle.input", LayerSpec("block_shuffle", {"placement_id": "input"})))
    conv_block("stem", w1, "initial_conv")
    specs.append(("pool1", LayerSpec("maxpool2d", {"kernel": 2})))
    conv_block("block1", w2, "layer1")
    specs.append(("pool2", LayerSpec("maxpool2d", {"kernel": 2})))
    conv_block("block2", w3, "layer2")
    specs.append(("pool3", LayerSpec("maxpool2d", {"kernel": 2})))
    conv_block("block3", w4, "layer3")
    conv_block("block4", w4, "layer4")
    specs.append(("pool", LayerSpec("global_avgpool", {})))
    specs.append(("head", LayerSpec("linear", {"out": arch.num_classes})))
    return specs


_PRESETS = {
    "resnet_tiny": _resnet_tiny_specs,
    "cnn_micro": _cnn_micro_specs,
}


def preset_specs(arch: ArchConfig) -> list[tuple[str, LayerSpec]]:
    if arch.preset not in _PRESETS:
        raise ValueError(f"unknown architecture preset {arch.preset!r}; have {sorted(_PRESETS)}")
    return _PRESETS[arch.preset](arch)


def build_layer(spec: LayerSpec, in_shape: tuple[int, ...], rng: np.random.Generator,
                dtype) -> tuple[Layer, tuple[int, ...]]:
    """Materialize one LayerSpec at a concrete input shape."""
    kind, a = spec.kind, spec.args
    if kind == "conv2d":
        layer = Conv2d(in_shape[0], a["out_ch"], a["kernel"], stride=a.get("stride", 1),
                       pad=a.get("pad", 0), bias=a.get("bias", False), rng=rng, dtype=dtype)
    elif kind == "batchnorm2d":
        layer = BatchNorm2d(in_shape[0], dtype=dtype)
    elif kind == "relu":
        layer = ReLU()
    elif kind == "maxpool2d":
        layer = MaxPool2d(a["kernel"], a.get("stride"))
    elif kind == "global_avgpool":
        layer = GlobalAvgPool()
    elif kind == "linear":
        layer = Linear(int(np.prod(in_shape)), a["out"], rng=rng, dtype=dtype)
    elif kind == "residual_block":
        layer = ResidualBlock(in_shape[0], a["out_ch"], stride=a.get("stride", 1), rng=rng, dtype=dtype)
    elif kind == "block_shuffle":
        layer = BlockShuffle(a["placement_id"])
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    return layer, layer.out_shape(in_shape)


def build_layers(arch: ArchConfig, rng: np.random.Generator, dtype=np.float32,
                 ) -> tuple[list[tuple[str, Layer]], dict[str, Placement]]:
    """Build the preset's layer stack and resolve every placement's shape."""
    layers: list[tuple[str, Layer]] = []
    placements: dict[str, Placement] = {}
    shape = arch.input_shape
    for name, spec in preset_specs(arch):
        layer, shape = build_layer(spec, shape, rng, dtype)
        layers.append((name, layer))
        if isinstance(layer, BlockShuffle):
            placements[layer.placement_id] = Placement(layer.placement_id, *shape)
    for _, layer in layers:
        if isinstance(layer, Conv2d):
            layer.skip_input_grad = True  # nothing upstream owns parameters
            break
        if not isinstance(layer, BlockShuffle):
            break
    return layers, placements
