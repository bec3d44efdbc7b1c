"""Command-line entry point: synth, train, eval, and rerank subcommands.

Every run resolves one nested config (defaults, then an optional JSON file,
then ``--set dotted.key=value`` overrides), validates it as a whole, and
writes the fully resolved document into the output directory so any reported
number can be reproduced by re-running from that file.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from .backbone import IMAGENET_MEAN, IMAGENET_STD, BackboneConfig
from .data import Preprocess, SyntheticSpec, generate_synthetic, scan_reid_directory, BatchStream
from .errors import ValidationError
from .evaluator import (
    distance_matrix,
    dump_ranking,
    evaluate,
    evaluate_sets,
    extract_embeddings,
    k_reciprocal_rerank,
    load_embeddings,
    save_embeddings,
)
from .head import PartitionTreeConfig
from .losses import LossConfig
from .model import build_model
from .trainer import TrainConfig, load_checkpoint, train_mutual, train_single, write_checkpoint

DEFAULT_CONFIG: dict = {
    "backbone": {
        "variant": "resnet50",
        "input_height": 384,
        "input_width": 128,
        "output_channels": 2048,
        "last_stage_stride": 1,
        "pretrained_weights_path": None,
        "norm_mean": list(IMAGENET_MEAN),
        "norm_std": list(IMAGENET_STD),
    },
    "head": {
        "level_splits": [2, 3],
        "leaf_embedding_dim": 256,
        "global_embedding_dim": None,
        "num_identities": None,  # filled from the train split when absent
    },
    "loss": {
        "kl_direction": "partner_to_own",
        "kl_weight": 1.0,
        "kl_over": "concat",
    },
    "trainer": {
        "mode": "single",
        "epochs": None,  # None -> per-mode default (60 single / 300 mutual)
        "base_lr_pretrained": None,  # None -> 0.01 single / 0.02 mutual
        "base_lr_new": None,  # None -> 0.1 single / 0.002 mutual
        "lr_decay_factor": 0.1,
        "decay_epoch": None,  # None -> 40 single / 150 mutual
        "batch_size": 64,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "seed": 0,
        "init_seed": None,  # None -> seed; mutual model b uses init_seed + 1
        "update_scheme": "alternating",
    },
    "data": {
        "train_root": None,
        "query_root": None,
        "gallery_root": None,
        "hflip": True,
    },
    "eval": {
        "feature_mode": "joint",
        "protocol": "single_query",
        "normalize": True,
        "rerank": False,
        "rerank_k1": 20,
        "rerank_k2": 6,
        "rerank_lambda": 0.3,
        "dump_top_n": 10,
        "batch_size": 64,
    },
}

_MODE_DEFAULTS = {
    "single": {"epochs": 60, "base_lr_pretrained": 0.01, "base_lr_new": 0.1, "decay_epoch": 40},
    "mutual": {"epochs": 300, "base_lr_pretrained": 0.02, "base_lr_new": 0.002, "decay_epoch": 150},
}


def _merge(base: dict, incoming: dict, path: str = "") -> None:
    for key, value in incoming.items():
        full = f"{path}.{key}" if path else key
        if key not in base:
            raise ValidationError(f"unknown config key '{full}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, full)
        else:
            base[key] = value


def _apply_override(config: dict, spec: str) -> None:
    if "=" not in spec:
        raise ValidationError(f"--set expects dotted.key=value, got '{spec}'")
    dotted, raw = spec.split("=", 1)
    keys = dotted.strip().split(".")
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    node = config
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ValidationError(f"unknown config key '{dotted}'")
        node = node[key]
    if keys[-1] not in node:
        raise ValidationError(f"unknown config key '{dotted}'")
    node[keys[-1]] = value


def resolve_config(config_path: str | None, overrides: list[str] | None = None) -> dict:
    """Defaults, then the config file, then --set overrides; unknown keys are
    rejected and mode-dependent trainer defaults are filled in."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except ValueError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
        _merge(config, loaded)
    for spec in overrides or []:
        _apply_override(config, spec)
    mode = config["trainer"]["mode"]
    if mode not in _MODE_DEFAULTS:
        raise ValidationError(f"trainer.mode must be 'single' or 'mutual', got '{mode}'")
    for key, value in _MODE_DEFAULTS[mode].items():
        if config["trainer"][key] is None:
            config["trainer"][key] = value
    if config["trainer"]["init_seed"] is None:
        config["trainer"]["init_seed"] = config["trainer"]["seed"]
    return config


def backbone_config_from(cfg: dict) -> BackboneConfig:
    return BackboneConfig(
        variant=cfg["variant"],
        input_height=cfg["input_height"],
        input_width=cfg["input_width"],
        output_channels=cfg["output_channels"],
        last_stage_stride=cfg["last_stage_stride"],
        pretrained_weights_path=cfg["pretrained_weights_path"],
        norm_mean=tuple(cfg["norm_mean"]),
        norm_std=tuple(cfg["norm_std"]),
    )


def head_config_from(cfg: dict, num_identities: int) -> PartitionTreeConfig:
    return PartitionTreeConfig(
        num_identities=num_identities,
        level_splits=tuple(cfg["level_splits"]),
        leaf_embedding_dim=cfg["leaf_embedding_dim"],
        global_embedding_dim=cfg["global_embedding_dim"],
    )


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        mode=cfg["mode"],
        epochs=cfg["epochs"],
        base_lr_pretrained=cfg["base_lr_pretrained"],
        base_lr_new=cfg["base_lr_new"],
        lr_decay_factor=cfg["lr_decay_factor"],
        decay_epoch=cfg["decay_epoch"],
        batch_size=cfg["batch_size"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        update_scheme=cfg["update_scheme"],
    )


def preprocess_from(config: dict, augment: bool) -> Preprocess:
    b = config["backbone"]
    return Preprocess(
        height=b["input_height"],
        width=b["input_width"],
        mean=tuple(b["norm_mean"]),
        std=tuple(b["norm_std"]),
        hflip=config["data"]["hflip"] and augment,
    )


def _require_dir(path_value: str | None, what: str) -> Path:
    if not path_value:
        raise ValidationError(f"{what} is not set in the config")
    path = Path(path_value)
    if not path.is_dir():
        raise ValidationError(f"{what} does not exist: {path}")
    return path


def _resolve_split_dir(root: Path, split: str) -> Path:
    aliases = {
        "train": ("train", "bounding_box_train"),
        "query": ("query",),
        "gallery": ("gallery", "bounding_box_test"),
    }
    for name in aliases[split]:
        candidate = root / name
        if candidate.is_dir():
            return candidate
    raise ValidationError(f"no {split} directory under {root} (tried {', '.join(aliases[split])})")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    config = resolve_config(args.config, args.set)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_root = _require_dir(config["data"]["train_root"], "data.train_root")
    manifest = scan_reid_directory(train_root, "train")
    if config["head"]["num_identities"] is None:
        config["head"]["num_identities"] = manifest.num_identities
    elif config["head"]["num_identities"] != manifest.num_identities:
        raise ValidationError(
            f"head.num_identities={config['head']['num_identities']} but the train split "
            f"has {manifest.num_identities} identities"
        )

    (out_dir / "resolved_config.json").write_text(json.dumps(config, indent=2, sort_keys=True))

    backbone_cfg = backbone_config_from(config["backbone"])
    head_cfg = head_config_from(config["head"], config["head"]["num_identities"])
    train_cfg = train_config_from(config["trainer"])
    stream = BatchStream(manifest, preprocess_from(config, augment=True), augment=True)
    init_seed = config["trainer"]["init_seed"]

    if train_cfg.mode == "single":
        model = build_model(backbone_cfg, head_cfg, init_seed=init_seed)
        checkpoint = train_single(
            model.backbone,
            model.head,
            stream,
            train_cfg,
            config_bundle=config,
            log_path=out_dir / "train_log.jsonl",
        )
        write_checkpoint(out_dir / "checkpoint.tba", checkpoint)
        final = checkpoint.loss_history[-1] if checkpoint.loss_history else {}
        print(f"trained single model for {train_cfg.epochs} epochs; final losses: {final}")
        print(f"checkpoint written to {out_dir / 'checkpoint.tba'}")
    else:
        model_a = build_model(backbone_cfg, head_cfg, init_seed=init_seed)
        model_b = build_model(backbone_cfg, head_cfg, init_seed=init_seed + 1)
        loss_cfg = LossConfig(
            num_identities=head_cfg.num_identities,
            num_leaves=head_cfg.num_leaves,
            kl_direction=config["loss"]["kl_direction"],
            kl_weight=config["loss"]["kl_weight"],
            kl_over=config["loss"]["kl_over"],
        )
        ckpt_a, ckpt_b = train_mutual(
            model_a,
            model_b,
            stream,
            train_cfg,
            loss_cfg,
            config_bundle=config,
            log_path=out_dir / "train_log.jsonl",
        )
        write_checkpoint(out_dir / "checkpoint_a.tba", ckpt_a)
        write_checkpoint(out_dir / "checkpoint_b.tba", ckpt_b)
        final_a = ckpt_a.loss_history[-1] if ckpt_a.loss_history else {}
        final_b = ckpt_b.loss_history[-1] if ckpt_b.loss_history else {}
        print(f"trained mutual pair for {train_cfg.epochs} epochs")
        print(f"model a final losses: {final_a}")
        print(f"model b final losses: {final_b}")
        print(f"checkpoints written to {out_dir / 'checkpoint_a.tba'} and {out_dir / 'checkpoint_b.tba'}")
    return 0


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise ValidationError(f"checkpoint file not found: {ckpt_path}")
    checkpoint = load_checkpoint(ckpt_path)
    config = checkpoint.config
    if not config:
        raise ValidationError(f"checkpoint {ckpt_path} carries no config; cannot rebuild the model")
    for spec in args.set or []:
        _apply_override(config, spec)

    data_root = _require_dir(args.data_root, "--data-root")
    query_dir = _resolve_split_dir(data_root, "query")
    gallery_dir = _resolve_split_dir(data_root, "gallery")
    query_manifest = scan_reid_directory(query_dir, "query")
    gallery_manifest = scan_reid_directory(gallery_dir, "gallery")

    backbone_cfg = backbone_config_from(config["backbone"])
    head_cfg = head_config_from(config["head"], config["head"]["num_identities"])
    model = build_model(backbone_cfg, head_cfg, init_seed=0)
    checkpoint.load_model(model.backbone, model.head)

    eval_cfg = dict(config["eval"])
    feature_mode = args.feature_mode or eval_cfg["feature_mode"]
    protocol = "multi_query" if args.multi_query else eval_cfg["protocol"]
    rerank = args.rerank or eval_cfg["rerank"]
    preprocess = preprocess_from(config, augment=False)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    query_set = extract_embeddings(
        model, query_manifest, feature_mode, preprocess,
        batch_size=eval_cfg["batch_size"], normalize=eval_cfg["normalize"],
    )
    gallery_set = extract_embeddings(
        model, gallery_manifest, feature_mode, preprocess,
        batch_size=eval_cfg["batch_size"], normalize=eval_cfg["normalize"],
    )
    if args.save_embeddings:
        save_embeddings(query_set, out_dir / f"query_{feature_mode}")
        save_embeddings(gallery_set, out_dir / f"gallery_{feature_mode}")

    result, ranked_query = evaluate_sets(query_set, gallery_set, protocol)
    report = result.report(feature_mode=feature_mode, protocol=protocol)

    if rerank:
        refined = k_reciprocal_rerank(
            ranked_query, gallery_set,
            k1=eval_cfg["rerank_k1"], k2=eval_cfg["rerank_k2"],
            lambda_value=eval_cfg["rerank_lambda"],
        )
        rr = evaluate(
            refined,
            ranked_query.identity_ids, ranked_query.camera_ids,
            gallery_set.identity_ids, gallery_set.camera_ids,
        )
        report["reranked"] = rr.report(feature_mode=feature_mode, protocol=protocol)

    report_path = out_dir / f"report_{feature_mode}.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    if protocol == "single_query":
        dump_ranking(
            result, query_manifest, gallery_manifest,
            top_n=eval_cfg["dump_top_n"], out_path=out_dir / f"ranking_{feature_mode}.csv",
        )
    print(json.dumps(report, indent=2, sort_keys=True))
    print(f"report written to {report_path}")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        num_identities=args.num_identities,
        images_per_identity=args.images_per_identity,
        num_cameras=args.num_cameras,
        height=args.height,
        width=args.width,
        noise_level=args.noise,
        seed=args.seed,
    )
    out_root = Path(args.out)
    manifests = generate_synthetic(spec, out_root)
    desk_config = desk_run_config(spec, out_root)
    (out_root / "desk_config.json").write_text(json.dumps(desk_config, indent=2, sort_keys=True))
    counts = {split: len(m) for split, m in manifests.items()}
    print(f"synthetic dataset written to {out_root}: {counts}")
    print(f"desk-scale run config written to {out_root / 'desk_config.json'}")
    return 0


def desk_run_config(spec: SyntheticSpec, out_root: Path) -> dict:
    """A ready-to-train config for the synthetic dataset: tiny backbone at the
    synthetic image size, small branch head, short single-model schedule, and
    re-ranking neighborhoods scaled down to the desk gallery size."""
    per_cam = spec.images_per_identity // spec.num_cameras
    gallery_size = spec.num_identities * spec.num_cameras * max(1, (per_cam - 1) // 2)
    k1 = min(20, max(3, gallery_size // 4))
    k2 = max(1, min(6, k1 // 2))
    return {
        "backbone": {
            "variant": "desk_tiny",
            "input_height": spec.height,
            "input_width": spec.width,
            "output_channels": 64,
        },
        "head": {"leaf_embedding_dim": 16},
        "trainer": {
            "mode": "single",
            "epochs": 25,
            "base_lr_pretrained": 0.05,
            "base_lr_new": 0.05,
            "decay_epoch": 20,
            "batch_size": 16,
            "seed": 0,
        },
        "data": {
            "train_root": str(out_root / "train"),
            "query_root": str(out_root / "query"),
            "gallery_root": str(out_root / "gallery"),
        },
        "eval": {"rerank_k1": k1, "rerank_k2": k2},
    }


def cmd_rerank(args) -> int:
    query_set = load_embeddings(args.query)
    gallery_set = load_embeddings(args.gallery)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    raw = distance_matrix(query_set, gallery_set)
    refined = k_reciprocal_rerank(query_set, gallery_set, k1=args.k1, k2=args.k2, lambda_value=args.lam)
    np.save(out_dir / "final_dist.npy", refined)

    raw_result = evaluate(
        raw, query_set.identity_ids, query_set.camera_ids,
        gallery_set.identity_ids, gallery_set.camera_ids,
    )
    rr_result = evaluate(
        refined, query_set.identity_ids, query_set.camera_ids,
        gallery_set.identity_ids, gallery_set.camera_ids,
    )
    report = {
        "original": raw_result.report(feature_mode=query_set.feature_mode),
        "reranked": rr_result.report(feature_mode=query_set.feature_mode),
        "k1": args.k1,
        "k2": args.k2,
        "lambda": args.lam,
    }
    (out_dir / "rerank_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treebranch",
        description="Tree-branch local/global feature learning for person re-identification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a single model or a mutual pair")
    p_train.add_argument("--config", default=None, help="JSON run config (defaults apply when omitted)")
    p_train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config entry by dotted path, e.g. trainer.epochs=2")
    p_train.add_argument("--out", default="runs/train", help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a query/gallery split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data-root", required=True,
                        help="directory containing query/ and gallery/ (or bounding_box_test/)")
    p_eval.add_argument("--feature-mode", choices=("local_only", "global_only", "joint"), default=None)
    p_eval.add_argument("--rerank", action="store_true", help="also report k-reciprocal re-ranked metrics")
    p_eval.add_argument("--multi-query", action="store_true",
                        help="pool query vectors per (identity, camera) before ranking")
    p_eval.add_argument("--save-embeddings", action="store_true")
    p_eval.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override entries of the checkpoint's stored config")
    p_eval.add_argument("--out", default="runs/eval", help="output directory")
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="generate the synthetic desk-scale dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--num-identities", type=int, default=8)
    p_synth.add_argument("--images-per-identity", type=int, default=12)
    p_synth.add_argument("--num-cameras", type=int, default=2)
    p_synth.add_argument("--height", type=int, default=96)
    p_synth.add_argument("--width", type=int, default=32)
    p_synth.add_argument("--noise", type=float, default=0.1)
    p_synth.add_argument("--seed", type=int, default=7)
    p_synth.set_defaults(func=cmd_synth)

    p_rerank = sub.add_parser("rerank", help="re-rank saved embedding files")
    p_rerank.add_argument("--query", required=True, help="embedding file prefix (.npy/.json pair)")
    p_rerank.add_argument("--gallery", required=True, help="embedding file prefix (.npy/.json pair)")
    p_rerank.add_argument("--k1", type=int, default=20)
    p_rerank.add_argument("--k2", type=int, default=6)
    p_rerank.add_argument("--lam", type=float, default=0.3)
    p_rerank.add_argument("--out", default="runs/rerank")
    p_rerank.set_defaults(func=cmd_rerank)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps failures to exit codes
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
