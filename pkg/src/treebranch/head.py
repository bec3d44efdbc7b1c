"""Tree-branch head over the trunk feature map.

The feature tensor is partitioned recursively along its height into a
hierarchy of local branches (2 coarse pieces, then 3 each for 6 leaves by
default), with a channel-preserving bottleneck refining every piece at every
level. Each leaf is max-pooled, reduced to a compact embedding with a 1x1
convolution, and classified by its own identity classifier; one global branch
average-pools the full tensor and classifies it directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import BottleneckBlock, init_classifier, init_conv_weights
from .errors import ValidationError


@dataclass
class PartitionTreeConfig:
    """Shape of the branch tree and its classifier heads.

    ``level_splits`` gives the fan-out at each partition level; the product is
    the leaf count K. ``global_embedding_dim`` of None means "same as the
    trunk channel count" (the global branch is pooled without reduction).
    """

    num_identities: int
    level_splits: tuple[int, ...] = (2, 3)
    leaf_embedding_dim: int = 256
    global_embedding_dim: int | None = None

    @property
    def num_leaves(self) -> int:
        return math.prod(self.level_splits)

    def validate(self, in_channels: int) -> None:
        if not self.level_splits or any(int(s) < 1 for s in self.level_splits):
            raise ValidationError(f"level_splits must be positive integers, got {self.level_splits}")
        if self.leaf_embedding_dim < 1:
            raise ValidationError(f"leaf_embedding_dim must be >= 1, got {self.leaf_embedding_dim}")
        if self.num_identities < 2:
            raise ValidationError(f"num_identities must be >= 2, got {self.num_identities}")
        if self.global_embedding_dim is not None and self.global_embedding_dim != in_channels:
            raise ValidationError(
                f"global_embedding_dim {self.global_embedding_dim} must match trunk "
                f"channels {in_channels} (the global branch is pooled, not reduced)"
            )

    def resolved_global_dim(self, in_channels: int) -> int:
        return in_channels if self.global_embedding_dim is None else self.global_embedding_dim

    def descriptor_dims(self, in_channels: int) -> dict[str, int]:
        local = self.num_leaves * self.leaf_embedding_dim
        global_ = self.resolved_global_dim(in_channels)
        return {"local_only": local, "global_only": global_, "joint": local + global_}


@dataclass
class BranchOutputs:
    """Per-batch bundle of everything the head produces.

    ``local_*`` lists are ordered top-to-bottom by leaf position. Logits are
    pre-softmax scores, one vector of length M per branch.
    """

    global_embedding: torch.Tensor
    local_embeddings: list[torch.Tensor]
    global_logits: torch.Tensor
    local_logits: list[torch.Tensor]

    @property
    def num_leaves(self) -> int:
        return len(self.local_logits)


def partition(feature_map: torch.Tensor, num_pieces: int) -> list[torch.Tensor]:
    """Uniformly split a feature map along its height axis, top to bottom.

    Concatenating the pieces along height reconstructs the input exactly.
    Works on (C, H, W) and (N, C, H, W) tensors alike.
    """
    if num_pieces < 1:
        raise ValidationError(f"num_pieces must be >= 1, got {num_pieces}")
    height = feature_map.shape[-2]
    if height % num_pieces != 0:
        raise ValidationError(
            f"cannot partition height {height} of tensor {tuple(feature_map.shape)} "
            f"into {num_pieces} equal pieces"
        )
    return list(torch.split(feature_map, height // num_pieces, dim=-2))


class TreeBranchHead(nn.Module):
    """Global branch plus a coarse-to-fine tree of local branches.

    Per sample: the global branch average-pools the input tensor and applies
    one linear classifier; the local side alternates partition and bottleneck
    at every tree level, then max-pools each leaf, reduces it with a
    1x1 conv + batch norm + ReLU to ``leaf_embedding_dim``, and classifies it
    with an independent linear head. Retrieval embeddings are the reduced leaf
    vectors and the pooled global vector (taken before the classifiers).
    """

    def __init__(self, config: PartitionTreeConfig, in_channels: int):
        super().__init__()
        config.validate(in_channels)
        self.config = config
        self.in_channels = in_channels
        self.splits = tuple(int(s) for s in config.level_splits)

        counts = []
        n = 1
        for s in self.splits:
            n *= s
            counts.append(n)
        mid = max(1, in_channels // 4)
        self.level_blocks = nn.ModuleList(
            nn.ModuleList(BottleneckBlock(in_channels, mid, in_channels) for _ in range(count))
            for count in counts
        )
        self.reductions = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(in_channels, config.leaf_embedding_dim, 1, bias=False),
                nn.BatchNorm2d(config.leaf_embedding_dim),
                nn.ReLU(inplace=True),
            )
            for _ in range(config.num_leaves)
        )
        self.leaf_classifiers = nn.ModuleList(
            nn.Linear(config.leaf_embedding_dim, config.num_identities)
            for _ in range(config.num_leaves)
        )
        self.global_classifier = nn.Linear(
            config.resolved_global_dim(in_channels), config.num_identities
        )
        init_conv_weights(self.level_blocks)
        init_conv_weights(self.reductions)
        for fc in self.leaf_classifiers:
            init_classifier(fc)
        init_classifier(self.global_classifier)

    @property
    def num_leaves(self) -> int:
        return self.config.num_leaves

    def descriptor_dims(self) -> dict[str, int]:
        return self.config.descriptor_dims(self.in_channels)

    def _check_input(self, t0: torch.Tensor) -> None:
        if t0.dim() != 4 or t0.shape[1] != self.in_channels:
            raise ValidationError(
                f"head expects (batch, {self.in_channels}, H, W) input, got {tuple(t0.shape)}"
            )
        height = t0.shape[-2]
        for s in self.splits:
            if height % s != 0:
                raise ValidationError(
                    f"feature height {t0.shape[-2]} is not divisible through splits "
                    f"{self.splits} (stuck at {height} % {s})"
                )
            height //= s

    def leaf_inputs(self, t0: torch.Tensor) -> list[torch.Tensor]:
        """The K per-leaf tensors after the final partition, before the leaf
        bottlenecks. From here on the leaves are processed independently."""
        self._check_input(t0)
        pieces = [t0]
        last = len(self.splits) - 1
        for level, s in enumerate(self.splits):
            pieces = [piece for parent in pieces for piece in partition(parent, s)]
            if level < last:
                pieces = [blk(piece) for blk, piece in zip(self.level_blocks[level], pieces)]
        return pieces

    def leaf_branch(self, k: int, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Run leaf k's bottleneck, pooling, reduction, and classifier."""
        x = self.level_blocks[-1][k](x)
        pooled = F.adaptive_max_pool2d(x, 1)
        embedding = self.reductions[k](pooled).flatten(1)
        logits = self.leaf_classifiers[k](embedding)
        return embedding, logits

    def forward(self, t0: torch.Tensor) -> BranchOutputs:
        leaves = self.leaf_inputs(t0)
        local_embeddings = []
        local_logits = []
        for k, leaf in enumerate(leaves):
            embedding, logits = self.leaf_branch(k, leaf)
            local_embeddings.append(embedding)
            local_logits.append(logits)
        global_embedding = F.adaptive_avg_pool2d(t0, 1).flatten(1)
        global_logits = self.global_classifier(global_embedding)
        return BranchOutputs(
            global_embedding=global_embedding,
            local_embeddings=local_embeddings,
            global_logits=global_logits,
            local_logits=local_logits,
        )
