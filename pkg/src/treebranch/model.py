"""Backbone and head bundled into one module for training and evaluation."""

from __future__ import annotations

import torch
from torch import nn

from .backbone import BackboneConfig, build_backbone
from .head import BranchOutputs, PartitionTreeConfig, TreeBranchHead


class TreeBranchNet(nn.Module):
    """Trunk + branch head; forward maps an image batch to BranchOutputs."""

    def __init__(self, backbone: nn.Module, head: TreeBranchHead):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward(self, pixels: torch.Tensor) -> BranchOutputs:
        return self.head(self.backbone(pixels))


def build_model(
    backbone_config: BackboneConfig,
    head_config: PartitionTreeConfig,
    init_seed: int | None = None,
) -> TreeBranchNet:
    """Build trunk and head together; `init_seed` makes the whole init
    deterministic (two builds with equal configs and seed are bit-identical)."""
    if init_seed is not None:
        torch.manual_seed(init_seed)
    backbone = build_backbone(backbone_config)
    head = TreeBranchHead(head_config, in_channels=backbone.out_channels)
    return TreeBranchNet(backbone, head)
