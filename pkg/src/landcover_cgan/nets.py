"""Declarative U-Net generator and patch discriminator.

Both networks are stacks of 4x4, stride-2, padding-1 convolutions described
by :class:`LayerSpec` rows. The generator (also used as the supervised CNN
baseline) maps a 4-band 256x256 tile to a 6-class per-pixel softmax; the
discriminator scores (image, label-mask) pairs on an 8x8 patch grid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Literal

import torch
from torch import nn

from .errors import ShapeError

IN_BANDS = 4
NUM_CLASSES = 6
KERNEL = 4

Kind = Literal["down", "up"]
Norm = Literal["batch", "none"]
Activation = Literal["leaky_relu", "relu", "softmax", "sigmoid"]


@dataclass(frozen=True)
class LayerSpec:
    kind: Kind
    in_channels: int
    out_channels: int
    norm: Norm = "batch"
    activation: Activation = "leaky_relu"
    dropout: float = 0.0
    skip_source: int | None = None  # 1-based index of the block whose output is concatenated
    kernel: int = KERNEL
    stride: int = 2
    padding: int = 1

    def __post_init__(self):
        if self.kernel != KERNEL:
            raise ValueError(f"kernel must be {KERNEL}x{KERNEL}")
        if self.dropout not in (0.0, 0.5):
            raise ValueError("dropout must be absent or p=0.5")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def bias(self) -> bool:
        return self.norm == "none"


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    width_multiplier: Fraction = field(default=Fraction(1))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "width_multiplier": str(self.width_multiplier),
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkSpec":
        return cls(doc["name"], tuple(LayerSpec(**layer) for layer in doc["layers"]),
                   Fraction(doc["width_multiplier"]))


def _scaled(base: int, m: Fraction) -> int:
    v = base * m
    if v.denominator != 1 or v < 1:
        raise ValueError(f"width multiplier {m} gives non-integral channel count {float(v)} from {base}")
    return int(v)


def _multiplier(m) -> Fraction:
    m = Fraction(m).limit_denominator(1024) if isinstance(m, float) else Fraction(m)
    if m < Fraction(1, 8):
        raise ValueError(f"width multiplier must be >= 1/8, got {m}")
    return m


def generator_spec(width_multiplier=1) -> NetworkSpec:
    """14-block U-Net: 7 strided encoder convs, 7 transposed decoder convs.

    Decoder blocks 9..14 concatenate the outputs of encoder blocks 6..1.
    """
    m = _multiplier(width_multiplier)
    c64, c128, c256, c512 = (_scaled(b, m) for b in (64, 128, 256, 512))
    layers = (
        LayerSpec("down", IN_BANDS, c64, norm="none"),
        LayerSpec("down", c64, c128),
        LayerSpec("down", c128, c256),
        LayerSpec("down", c256, c512),
        LayerSpec("down", c512, c512),
        LayerSpec("down", c512, c512),
        LayerSpec("down", c512, c512, norm="none", activation="relu"),
        LayerSpec("up", c512, c512, activation="relu"),
        LayerSpec("up", 2 * c512, c512, activation="relu", dropout=0.5, skip_source=6),
        LayerSpec("up", 2 * c512, c512, activation="relu", dropout=0.5, skip_source=5),
        LayerSpec("up", 2 * c512, c256, activation="relu", skip_source=4),
        LayerSpec("up", 2 * c256, c128, activation="relu", skip_source=3),
        LayerSpec("up", 2 * c128, c64, activation="relu", skip_source=2),
        LayerSpec("up", 2 * c64, NUM_CLASSES, norm="none", activation="softmax", skip_source=1),
    )
    return NetworkSpec("generator", layers, m)


def discriminator_spec(width_multiplier=1) -> NetworkSpec:
    """5-block patch discriminator over the 10-channel (image, mask) stack."""
    m = _multiplier(width_multiplier)
    c64, c128, c256, c512 = (_scaled(b, m) for b in (64, 128, 256, 512))
    layers = (
        LayerSpec("down", IN_BANDS + NUM_CLASSES, c64, norm="none"),
        LayerSpec("down", c64, c128),
        LayerSpec("down", c128, c256),
        LayerSpec("down", c256, c512),
        LayerSpec("down", c512, 1, norm="none", activation="sigmoid"),
    )
    return NetworkSpec("discriminator", layers, m)


def _block(spec: LayerSpec) -> nn.Sequential:
    conv_cls = nn.Conv2d if spec.kind == "down" else nn.ConvTranspose2d
    mods: list[nn.Module] = [conv_cls(spec.in_channels, spec.out_channels, spec.kernel,
                                      spec.stride, spec.padding, bias=spec.bias)]
    if spec.norm == "batch":
        mods.append(nn.BatchNorm2d(spec.out_channels, momentum=0.1))
    if spec.dropout:
        mods.append(nn.Dropout(spec.dropout))
    mods.append({
        "leaky_relu": lambda: nn.LeakyReLU(0.2),
        "relu": lambda: nn.ReLU(),
        "softmax": lambda: nn.Softmax(dim=1),
        "sigmoid": lambda: nn.Sigmoid(),
    }[spec.activation]())
    return nn.Sequential(*mods)


class SpecNet(nn.Module):
    """Runs a :class:`NetworkSpec` block by block, wiring skip concatenations."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.blocks = nn.ModuleList(_block(layer) for layer in spec.layers)
        self.depth = sum(1 for layer in spec.layers if layer.kind == "down")
        init_weights(self)

    @property
    def in_channels(self) -> int:
        return self.spec.layers[0].in_channels

    def _check_input(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.spec.name} expects (N, {self.in_channels}, H, W), got {tuple(x.shape)}")
        step = 2 ** self.depth
        if x.shape[2] % step or x.shape[3] % step:
            raise ShapeError(f"{self.spec.name} needs spatial dims divisible by {step}, got {tuple(x.shape[2:])}")

    def run(self, x: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        self._check_input(x)
        outputs: list[torch.Tensor] = []
        h = x
        for layer, block in zip(self.spec.layers, self.blocks):
            if layer.skip_source is not None:
                h = torch.cat([h, outputs[layer.skip_source - 1]], dim=1)
            inp_shape = tuple(h.shape[1:])
            h = block(h)
            if trace is not None:
                trace.append((inp_shape, tuple(h.shape[1:])))
            outputs.append(h)
        return h

    def trace_shapes(self, *inputs: torch.Tensor) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """Per-block ``(input shape, output shape)`` without the batch axis."""
        trace: list = []
        with torch.no_grad():
            self._forward_traced(trace, *inputs)
        return trace

    def _forward_traced(self, trace, *inputs):
        return self.run(inputs[0], trace)


class Generator(SpecNet):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.run(x)


class Discriminator(SpecNet):
    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if mask.ndim != 4 or mask.shape[1] != NUM_CLASSES:
            raise ShapeError(f"label mask must have {NUM_CLASSES} channels, got shape {tuple(mask.shape)}")
        if image.shape[0] != mask.shape[0] or image.shape[2:] != mask.shape[2:]:
            raise ShapeError(f"image {tuple(image.shape)} and mask {tuple(mask.shape)} do not align")
        return self.run(torch.cat([image, mask], dim=1))

    def _forward_traced(self, trace, image, mask):
        return self.run(torch.cat([image, mask], dim=1), trace)


def init_weights(net: nn.Module, std: float = 0.02) -> None:
    """Conv kernels ~ N(0, std); batch-norm scale ~ N(1, std), shift 0; biases 0."""
    for mod in net.modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(mod.weight, 0.0, std)
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)
        elif isinstance(mod, nn.BatchNorm2d):
            nn.init.normal_(mod.weight, 1.0, std)
            nn.init.zeros_(mod.bias)


def build_generator(width_multiplier=1) -> Generator:
    return Generator(generator_spec(width_multiplier))


def build_discriminator(width_multiplier=1) -> Discriminator:
    return Discriminator(discriminator_spec(width_multiplier))


def build_from_spec(spec: NetworkSpec) -> SpecNet:
    return {"generator": Generator, "discriminator": Discriminator}[spec.name](spec)


def count_parameters(net: nn.Module) -> tuple[int, int]:
    """Return ``(weight_only, total)``.

    ``weight_only`` counts convolution kernels; ``total`` adds biases and
    batch-norm affine parameters.
    """
    weight_only = sum(m.weight.numel() for m in net.modules()
                      if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)))
    total = sum(p.numel() for p in net.parameters())
    return weight_only, total


def forward_generator(net: Generator, images: torch.Tensor, train: bool = False) -> torch.Tensor:
    """Soft label maps for a batch; ``train`` toggles dropout and batch statistics."""
    net.train(train)
    return net(images)


def forward_discriminator(net: Discriminator, images: torch.Tensor, masks: torch.Tensor,
                          train: bool = False) -> torch.Tensor:
    net.train(train)
    return net(images, masks)
