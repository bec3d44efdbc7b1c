"""Coarse-to-fine tree-branch feature learning for person re-identification."""

from .backbone import BackboneConfig, build_backbone, save_backbone_weights
from .data import (
    BatchStream,
    DatasetManifest,
    ImageBatch,
    Preprocess,
    SyntheticSpec,
    generate_synthetic,
    make_batches,
    read_manifest,
    scan_reid_directory,
    write_manifest,
)
from .errors import ArchiveError, ValidationError
from .evaluator import (
    EmbeddingSet,
    RankingResult,
    distance_matrix,
    dump_ranking,
    evaluate,
    evaluate_sets,
    extract_embeddings,
    k_reciprocal_rerank,
    load_embeddings,
    pool_multi_query,
    save_embeddings,
)
from .head import BranchOutputs, PartitionTreeConfig, TreeBranchHead, partition
from .losses import (
    LossConfig,
    LossReport,
    concat_local_logits,
    global_ce_loss,
    local_ce_loss,
    mutual_kl_loss,
    mutual_total_loss,
    supervised_loss,
)
from .model import TreeBranchNet, build_model
from .trainer import (
    Checkpoint,
    TrainConfig,
    build_optimizer,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    snapshot_checkpoint,
    train_mutual,
    train_single,
    write_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "ArchiveError",
    "BackboneConfig",
    "BatchStream",
    "BranchOutputs",
    "Checkpoint",
    "DatasetManifest",
    "EmbeddingSet",
    "ImageBatch",
    "LossConfig",
    "LossReport",
    "PartitionTreeConfig",
    "Preprocess",
    "RankingResult",
    "SyntheticSpec",
    "TrainConfig",
    "TreeBranchHead",
    "TreeBranchNet",
    "ValidationError",
    "build_backbone",
    "build_model",
    "build_optimizer",
    "concat_local_logits",
    "distance_matrix",
    "dump_ranking",
    "evaluate",
    "evaluate_sets",
    "extract_embeddings",
    "generate_synthetic",
    "global_ce_loss",
    "k_reciprocal_rerank",
    "load_checkpoint",
    "load_embeddings",
    "local_ce_loss",
    "lr_at",
    "make_batches",
    "mutual_kl_loss",
    "mutual_total_loss",
    "partition",
    "pool_multi_query",
    "read_manifest",
    "save_backbone_weights",
    "save_checkpoint",
    "save_embeddings",
    "scan_reid_directory",
    "snapshot_checkpoint",
    "supervised_loss",
    "train_mutual",
    "train_single",
    "write_checkpoint",
    "write_manifest",
]
