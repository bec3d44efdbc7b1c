"""Shared fixtures: the committed synthetic dataset and one desk-scale
training run reused by the trainer, evaluator, and acceptance tests."""

from __future__ import annotations

import time
from types import SimpleNamespace

import pytest
import torch

from treebranch import (
    BackboneConfig,
    BatchStream,
    PartitionTreeConfig,
    Preprocess,
    SyntheticSpec,
    TrainConfig,
    build_model,
    extract_embeddings,
    generate_synthetic,
    train_single,
    write_checkpoint,
)

# Committed desk-scale setup: 8 identities, 2 cameras, seed 7; 96x32 images so
# the /16 feature map is 6x2 and splits (2, 3) divide its height exactly.
DESK_SPEC = SyntheticSpec()


def desk_backbone_config(**overrides) -> BackboneConfig:
    base = dict(variant="desk_tiny", input_height=96, input_width=32, output_channels=64)
    base.update(overrides)
    return BackboneConfig(**base)


def desk_head_config(**overrides) -> PartitionTreeConfig:
    base = dict(num_identities=8, leaf_embedding_dim=16)
    base.update(overrides)
    return PartitionTreeConfig(**base)


def desk_train_config(**overrides) -> TrainConfig:
    base = dict(
        mode="single",
        epochs=25,
        base_lr_pretrained=0.05,
        base_lr_new=0.05,
        decay_epoch=20,
        batch_size=16,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def desk_preprocess() -> Preprocess:
    return Preprocess(height=96, width=32)


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    manifests = generate_synthetic(DESK_SPEC, root)
    return SimpleNamespace(root=root, spec=DESK_SPEC, manifests=manifests)


def desk_config_bundle(dataset_root) -> dict:
    """The fully resolved CLI config for the committed desk run, so the
    checkpoint written here is consumable by `treebranch eval`."""
    from treebranch.cli import resolve_config

    overrides = [
        "backbone.variant=desk_tiny",
        "backbone.input_height=96",
        "backbone.input_width=32",
        "backbone.output_channels=64",
        "head.leaf_embedding_dim=16",
        "head.num_identities=8",
        "trainer.epochs=25",
        "trainer.base_lr_pretrained=0.05",
        "trainer.base_lr_new=0.05",
        "trainer.decay_epoch=20",
        "trainer.batch_size=16",
        "trainer.seed=0",
        f"data.train_root={dataset_root / 'train'}",
        f"data.query_root={dataset_root / 'query'}",
        f"data.gallery_root={dataset_root / 'gallery'}",
        "eval.rerank_k1=8",
        "eval.rerank_k2=3",
    ]
    return resolve_config(None, overrides)


@pytest.fixture(scope="session")
def desk_run(synth_dataset, tmp_path_factory):
    """One committed-seed desk training run (<=30 epochs, CPU) with its
    checkpoint on disk and joint embeddings extracted."""
    from treebranch.cli import backbone_config_from, head_config_from, train_config_from

    out = tmp_path_factory.mktemp("desk_run")
    backbone_cfg = desk_backbone_config()
    head_cfg = desk_head_config()
    train_cfg = desk_train_config()
    preprocess = desk_preprocess()
    bundle = desk_config_bundle(synth_dataset.root)
    # the bundle must describe exactly the run we execute
    assert backbone_config_from(bundle["backbone"]) == backbone_cfg
    assert head_config_from(bundle["head"], 8) == head_cfg
    assert train_config_from(bundle["trainer"]) == train_cfg
    model = build_model(backbone_cfg, head_cfg, init_seed=bundle["trainer"]["init_seed"])
    stream = BatchStream(synth_dataset.manifests["train"], preprocess, augment=True)
    started = time.monotonic()
    checkpoint = train_single(
        model.backbone,
        model.head,
        stream,
        train_cfg,
        config_bundle=bundle,
        log_path=out / "train_log.jsonl",
    )
    train_seconds = time.monotonic() - started
    ckpt_path = out / "checkpoint.tba"
    write_checkpoint(ckpt_path, checkpoint)
    query = extract_embeddings(model, synth_dataset.manifests["query"], "joint", preprocess)
    gallery = extract_embeddings(model, synth_dataset.manifests["gallery"], "joint", preprocess)
    return SimpleNamespace(
        model=model,
        checkpoint=checkpoint,
        checkpoint_path=ckpt_path,
        out_dir=out,
        backbone_config=backbone_cfg,
        head_config=head_cfg,
        train_config=train_cfg,
        preprocess=preprocess,
        manifests=synth_dataset.manifests,
        dataset_root=synth_dataset.root,
        query=query,
        gallery=gallery,
        train_seconds=train_seconds,
    )


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)
