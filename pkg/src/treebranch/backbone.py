"""Backbone feature extractors producing the shared /16-resolution feature map.

Two variants sit behind one abstraction: ``resnet50``, a 50-layer residual
trunk truncated before global pooling with its final stage run at stride 1,
and ``desk_tiny``, a four-stage strided convolution stack with the same /16
spatial contract that is small enough for CPU tests.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import torch
from torch import nn

from .archive import load_archive, load_state_arrays, module_state_arrays, save_archive
from .blocks import BottleneckBlock, init_conv_weights
from .errors import ValidationError

SPATIAL_REDUCTION = 16

# Per-channel RGB normalization for inputs in [0, 1]; the convention the
# pretrained residual trunks were trained with. Pinned here so preprocessing
# is part of the config rather than an implicit transform.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

VARIANTS = ("resnet50", "desk_tiny")


@dataclass
class BackboneConfig:
    variant: str = "resnet50"
    input_height: int = 384
    input_width: int = 128
    output_channels: int = 2048
    last_stage_stride: int = 1
    pretrained_weights_path: str | None = None
    norm_mean: tuple[float, float, float] = field(default=IMAGENET_MEAN)
    norm_std: tuple[float, float, float] = field(default=IMAGENET_STD)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown backbone variant '{self.variant}' (choose from {VARIANTS})")
        if self.input_height % SPATIAL_REDUCTION or self.input_width % SPATIAL_REDUCTION:
            raise ValidationError(
                f"input size {self.input_height}x{self.input_width} must be divisible "
                f"by {SPATIAL_REDUCTION}"
            )
        if self.output_channels <= 0:
            raise ValidationError(f"output_channels must be positive, got {self.output_channels}")
        if self.variant == "resnet50" and self.output_channels != 2048:
            raise ValidationError("resnet50 backbone always produces 2048 channels")
        if self.variant == "desk_tiny" and self.output_channels < 8:
            raise ValidationError("desk_tiny backbone needs output_channels >= 8")
        if self.last_stage_stride not in (1, 2):
            raise ValidationError(f"last_stage_stride must be 1 or 2, got {self.last_stage_stride}")
        if len(self.norm_mean) != 3 or len(self.norm_std) != 3:
            raise ValidationError("norm_mean/norm_std must each have 3 channel entries")

    @property
    def reduction(self) -> int:
        if self.variant == "resnet50" and self.last_stage_stride == 2:
            return 2 * SPATIAL_REDUCTION
        return SPATIAL_REDUCTION

    def feature_shape(self) -> tuple[int, int, int]:
        """(channels, height, width) of the output feature map."""
        return (
            self.output_channels,
            self.input_height // self.reduction,
            self.input_width // self.reduction,
        )


def _check_input(x: torch.Tensor, config: BackboneConfig) -> None:
    expected = (3, config.input_height, config.input_width)
    if x.dim() != 4 or tuple(x.shape[1:]) != expected:
        raise ValidationError(
            f"backbone expects input of shape (batch, {expected[0]}, {expected[1]}, "
            f"{expected[2]}), got {tuple(x.shape)}"
        )


class ResNet50Trunk(nn.Module):
    """50-layer residual trunk, cut before global pooling.

    Stage strides are (1, 2, 2, last_stage_stride); with the final stage at
    stride 1 a 384x128 input maps to a 2048x24x8 feature tensor.
    """

    STAGE_BLOCKS = (3, 4, 6, 3)
    STAGE_MID = (64, 128, 256, 512)

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        in_ch = 64
        strides = (1, 2, 2, config.last_stage_stride)
        for blocks, mid, stride in zip(self.STAGE_BLOCKS, self.STAGE_MID, strides):
            out_ch = mid * 4
            layer = [BottleneckBlock(in_ch, mid, out_ch, stride=stride)]
            layer.extend(BottleneckBlock(out_ch, mid, out_ch) for _ in range(blocks - 1))
            stages.append(nn.Sequential(*layer))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.out_channels = in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.config)
        return self.stages(self.stem(x))


class DeskTinyBackbone(nn.Module):
    """Four stride-2 conv stages reaching the same /16 factor as the full trunk.

    LeakyReLU keeps every unit live so gradient-flow checks are not at the
    mercy of dead ReLUs at random init.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        widths = [max(8, config.output_channels // d) for d in (8, 4, 2, 1)]
        layers: list[nn.Module] = []
        prev = 3
        for w in widths:
            layers += [
                nn.Conv2d(prev, w, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.LeakyReLU(0.1, inplace=True),
            ]
            prev = w
        self.features = nn.Sequential(*layers)
        self.out_channels = prev

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.config)
        return self.features(x)


def build_backbone(config: BackboneConfig, init_seed: int | None = None) -> nn.Module:
    """Construct (and optionally warm-load) a backbone from its config.

    `init_seed`, when given, seeds torch's RNG immediately before
    construction so two builds with the same seed are bit-identical.
    """
    config.validate()
    if init_seed is not None:
        torch.manual_seed(init_seed)
    net: nn.Module = ResNet50Trunk(config) if config.variant == "resnet50" else DeskTinyBackbone(config)
    init_conv_weights(net)
    if config.pretrained_weights_path:
        path = config.pretrained_weights_path
        if not os.path.isfile(path):
            raise ValidationError(f"pretrained weights file not found: {path}")
        arrays, _ = load_archive(path)
        load_state_arrays(net, arrays, context="backbone ")
    return net


def save_backbone_weights(net: nn.Module, path) -> None:
    save_archive(path, module_state_arrays(net), meta={"kind": "backbone-weights"})
