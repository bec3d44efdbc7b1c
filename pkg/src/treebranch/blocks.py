"""Convolutional building blocks shared by the trunk and the branch head."""

from __future__ import annotations

import torch
from torch import nn

from .errors import ValidationError


class BottleneckBlock(nn.Module):
    """Residual unit of 1x1 -> 3x3 -> 1x1 convolutions with batch norm and a
    ReLU between stages.

    The 3x3 stage is padded by 1, so spatial size is preserved whenever
    ``stride`` is 1, for any input height/width. A projection shortcut is only
    engaged when the block changes resolution or channel count; otherwise the
    residual path is the identity. The final ReLU is applied after the
    residual addition, so a block whose convolution weights are all zero (with
    default norm parameters) reduces to ``relu(x)``.
    """

    def __init__(self, in_channels: int, mid_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        if min(in_channels, mid_channels, out_channels) < 1:
            raise ValidationError(
                f"bottleneck channel counts must be positive, got "
                f"({in_channels}, {mid_channels}, {out_channels})"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = nn.Conv2d(in_channels, mid_channels, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid_channels)
        self.conv2 = nn.Conv2d(mid_channels, mid_channels, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid_channels)
        self.conv3 = nn.Conv2d(mid_channels, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_channels != out_channels:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValidationError(
                f"bottleneck expects (batch, {self.in_channels}, H, W) input, "
                f"got shape {tuple(x.shape)}"
            )
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + self.shortcut(x))


def init_conv_weights(module: nn.Module) -> None:
    """Kaiming init for convolutions, unit/zero init for norm layers."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.constant_(m.bias, 0.0)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
            nn.init.constant_(m.weight, 1.0)
            nn.init.constant_(m.bias, 0.0)


def init_classifier(fc: nn.Linear) -> None:
    nn.init.normal_(fc.weight, std=0.001)
    if fc.bias is not None:
        nn.init.constant_(fc.bias, 0.0)
