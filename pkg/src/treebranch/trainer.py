"""Optimization loops: single-model supervised training and dual-model mutual
training, with two learning-rate groups (pretrained trunk vs newly initialized
layers), one-step decay schedules, JSON-lines step logs, and checkpoints.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .archive import load_archive, load_state_arrays, module_state_arrays, save_archive
from .data import BatchStream, ImageBatch
from .errors import ArchiveError, ValidationError
from .losses import LossConfig, LossReport, mutual_total_loss, supervised_loss
from .model import TreeBranchNet

UPDATE_SCHEMES = ("alternating", "simultaneous")


@dataclass
class TrainConfig:
    mode: str = "single"
    epochs: int = 60
    base_lr_pretrained: float = 0.01
    base_lr_new: float = 0.1
    lr_decay_factor: float = 0.1
    decay_epoch: int = 40
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    # Mutual training only: "alternating" updates A then B within each batch,
    # recomputing A's logits for B's KL term; "simultaneous" reuses the
    # pre-update logits for both, which makes the two roles exactly symmetric.
    update_scheme: str = "alternating"

    @classmethod
    def mutual_defaults(cls, **overrides) -> "TrainConfig":
        """Dual-model schedule: 300 epochs, decay after 150, rates 0.02
        (pretrained trunk) and 0.002 (new layers)."""
        base = dict(
            mode="mutual",
            epochs=300,
            base_lr_pretrained=0.02,
            base_lr_new=0.002,
            decay_epoch=150,
        )
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.mode not in ("single", "mutual"):
            raise ValidationError(f"mode must be 'single' or 'mutual', got '{self.mode}'")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("base_lr_pretrained", "base_lr_new", "lr_decay_factor"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0, got {getattr(self, name)}")
        # decay_epoch >= epochs is allowed: the schedule simply never decays
        # within the run (short smoke runs override epochs without retuning it).
        if self.decay_epoch < 0:
            raise ValidationError(f"decay_epoch must be >= 0, got {self.decay_epoch}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.update_scheme not in UPDATE_SCHEMES:
            raise ValidationError(f"update_scheme must be one of {UPDATE_SCHEMES}")


def lr_at(config: TrainConfig, epoch: int) -> tuple[float, float]:
    """(pretrained, new) learning rates at a given epoch; a pure function, so
    resumed runs follow the same schedule as uninterrupted ones."""
    factor = config.lr_decay_factor if epoch >= config.decay_epoch else 1.0
    return config.base_lr_pretrained * factor, config.base_lr_new * factor


def build_optimizer(backbone: nn.Module, head: nn.Module, config: TrainConfig) -> torch.optim.SGD:
    """SGD with momentum over exactly two parameter groups, pretrained trunk
    first, new layers second. Every trainable parameter must land in exactly
    one group."""
    backbone_params = [p for p in backbone.parameters() if p.requires_grad]
    head_params = [p for p in head.parameters() if p.requires_grad]
    seen = {id(p) for p in backbone_params}
    overlap = [p for p in head_params if id(p) in seen]
    if overlap:
        raise ValidationError("backbone and head share parameters; groups must not overlap")
    return torch.optim.SGD(
        [
            {"params": backbone_params, "lr": config.base_lr_pretrained},
            {"params": head_params, "lr": config.base_lr_new},
        ],
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def _set_lrs(optimizer: torch.optim.SGD, config: TrainConfig, epoch: int) -> tuple[float, float]:
    lrs = lr_at(config, epoch)
    for group, lr in zip(optimizer.param_groups, lrs):
        group["lr"] = lr
    return lrs


def _check_finite(report: LossReport, epoch: int, step: int, tag: str = "") -> None:
    terms = [(f"local_ce[{k}]", t) for k, t in enumerate(report.per_part_ce)]
    terms += [("global_ce", report.global_ce)]
    if report.kl is not None:
        terms.append(("kl", report.kl))
    terms.append(("total", report.total))
    for name, value in terms:
        if not torch.isfinite(value):
            raise RuntimeError(
                f"non-finite loss at epoch {epoch} step {step}{tag}: "
                f"first non-finite term is '{name}'"
            )


class _StepLogger:
    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, record: dict) -> None:
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _forward_frozen_stats(model: TreeBranchNet, pixels: torch.Tensor):
    """Extra train-mode forward that leaves batch-norm running statistics
    untouched, so KL-only partner forwards have no side effects."""
    stats = [
        (m, m.running_mean.clone(), m.running_var.clone(), m.num_batches_tracked.clone())
        for m in model.modules()
        if isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)) and m.track_running_stats
    ]
    try:
        with torch.no_grad():
            return model(pixels)
    finally:
        for m, mean, var, count in stats:
            m.running_mean.copy_(mean)
            m.running_var.copy_(var)
            m.num_batches_tracked.copy_(count)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    epoch: int
    config: dict
    config_hash: str
    loss_history: list[dict] = field(default_factory=list)

    def load_model(self, backbone: nn.Module, head: nn.Module) -> None:
        load_state_arrays(backbone, self._sub("model/backbone/"), context="checkpoint backbone ")
        load_state_arrays(head, self._sub("model/head/"), context="checkpoint head ")

    def load_optimizer(self, optimizer: torch.optim.SGD, backbone: nn.Module, head: nn.Module) -> None:
        for prefix, module in (("backbone", backbone), ("head", head)):
            for name, param in module.named_parameters():
                key = f"optim/{prefix}/{name}"
                if key in self.arrays:
                    optimizer.state[param] = {
                        "momentum_buffer": torch.from_numpy(self.arrays[key].copy())
                    }

    def _sub(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def config_fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def snapshot_checkpoint(
    backbone: nn.Module,
    head: nn.Module,
    optimizer: torch.optim.SGD | None,
    epoch: int,
    config: dict,
    loss_history: list[dict] | None = None,
) -> Checkpoint:
    """In-memory checkpoint of model parameters and optimizer momentum."""
    arrays: dict[str, np.ndarray] = {}
    for prefix, module in (("backbone", backbone), ("head", head)):
        for name, arr in module_state_arrays(module).items():
            arrays[f"model/{prefix}/{name}"] = arr
        if optimizer is not None:
            for name, param in module.named_parameters():
                buf = optimizer.state.get(param, {}).get("momentum_buffer")
                if buf is not None:
                    arrays[f"optim/{prefix}/{name}"] = buf.detach().cpu().numpy().copy()
    return Checkpoint(
        arrays=arrays,
        epoch=epoch,
        config=config,
        config_hash=config_fingerprint(config),
        loss_history=loss_history or [],
    )


def write_checkpoint(path, checkpoint: Checkpoint) -> None:
    meta = {
        "kind": "checkpoint",
        "epoch": checkpoint.epoch,
        "config": checkpoint.config,
        "config_hash": checkpoint.config_hash,
        "loss_history": checkpoint.loss_history,
    }
    save_archive(path, checkpoint.arrays, meta=meta)


def save_checkpoint(
    path,
    backbone: nn.Module,
    head: nn.Module,
    optimizer: torch.optim.SGD | None,
    epoch: int,
    config: dict,
    loss_history: list[dict] | None = None,
) -> None:
    write_checkpoint(path, snapshot_checkpoint(backbone, head, optimizer, epoch, config, loss_history))


def load_checkpoint(path, expected_config: dict | None = None) -> Checkpoint:
    arrays, meta = load_archive(path)
    if meta.get("kind") != "checkpoint":
        raise ArchiveError(f"{path}: archive is not a checkpoint (kind={meta.get('kind')!r})")
    stored_hash = meta["config_hash"]
    if config_fingerprint(meta["config"]) != stored_hash:
        raise ArchiveError(f"{path}: checkpoint config does not match its recorded hash")
    if expected_config is not None and config_fingerprint(expected_config) != stored_hash:
        raise ArchiveError(
            f"{path}: checkpoint is incompatible with the requested config "
            f"(hash {stored_hash[:12]} != {config_fingerprint(expected_config)[:12]})"
        )
    return Checkpoint(
        arrays=arrays,
        epoch=meta["epoch"],
        config=meta["config"],
        config_hash=stored_hash,
        loss_history=meta["loss_history"],
    )


# ---------------------------------------------------------------------------
# training loops


def _epoch_summary(reports: list[dict]) -> dict:
    keys = [k for k in ("total", "local_ce", "global_ce", "kl") if k in reports[0]]
    return {k: float(np.mean([r[k] for r in reports])) for k in keys}


def train_single(
    backbone: nn.Module,
    head: nn.Module,
    data: BatchStream,
    config: TrainConfig,
    config_bundle: dict | None = None,
    log_path=None,
    resume_from: Checkpoint | None = None,
) -> Checkpoint:
    """Supervised training of one model; returns the final checkpoint, whose
    loss history has one summary record per epoch.

    Deterministic given the config seed and fixed initial parameters (subject
    to the usual floating-point caveats of the BLAS backend).
    """
    config.validate()
    backbone.train()
    head.train()
    optimizer = build_optimizer(backbone, head, config)
    start_epoch = 0
    history: list[dict] = []
    if resume_from is not None:
        resume_from.load_model(backbone, head)
        resume_from.load_optimizer(optimizer, backbone, head)
        start_epoch = resume_from.epoch
        history = list(resume_from.loss_history)
    logger = _StepLogger(log_path)
    for epoch in range(start_epoch, config.epochs):
        lr_pre, lr_new = _set_lrs(optimizer, config, epoch)
        step_reports = []
        for step, batch in enumerate(data.epoch_batches(epoch, config.batch_size, config.seed)):
            report = _supervised_step(backbone, head, optimizer, batch, epoch, step)
            scalars = report.scalars()
            step_reports.append(scalars)
            logger.log(
                {"epoch": epoch, "step": step, "lr_pretrained": lr_pre, "lr_new": lr_new, **scalars}
            )
        history.append({"epoch": epoch, **_epoch_summary(step_reports)})
    return snapshot_checkpoint(
        backbone, head, optimizer, config.epochs, config_bundle or {}, history
    )


def _supervised_step(backbone, head, optimizer, batch: ImageBatch, epoch: int, step: int) -> LossReport:
    outputs = head(backbone(batch.pixels))
    report = supervised_loss(outputs, batch.labels)
    _check_finite(report, epoch, step)
    optimizer.zero_grad()
    report.total.backward()
    optimizer.step()
    return report


def train_mutual(
    model_a: TreeBranchNet,
    model_b: TreeBranchNet,
    data: BatchStream,
    config: TrainConfig,
    loss_config: LossConfig,
    config_bundle: dict | None = None,
    log_path=None,
) -> tuple[Checkpoint, Checkpoint]:
    """Co-train two structurally identical models, each adding a KL term
    toward the other's concatenated local-logit distribution.

    Per batch under the default alternating scheme: both models run forward;
    A updates against B's (detached) logits; A's logits are then recomputed
    with its fresh parameters (without touching batch-norm statistics) for
    B's update. The simultaneous scheme reuses the pre-update logits for both
    sides. With ``kl_weight == 0`` the KL machinery is skipped entirely and
    each model follows exactly the arithmetic of its own single-model run.
    """
    config.validate()
    loss_config.validate()
    keys_a = {k: tuple(v.shape) for k, v in model_a.state_dict().items()}
    keys_b = {k: tuple(v.shape) for k, v in model_b.state_dict().items()}
    if keys_a != keys_b:
        raise ValidationError("mutual training requires structurally identical models")

    model_a.train()
    model_b.train()
    opt_a = build_optimizer(model_a.backbone, model_a.head, config)
    opt_b = build_optimizer(model_b.backbone, model_b.head, config)
    logger = _StepLogger(log_path)
    history_a: list[dict] = []
    history_b: list[dict] = []
    use_kl = loss_config.kl_weight > 0

    for epoch in range(config.epochs):
        lr_pre, lr_new = _set_lrs(opt_a, config, epoch)
        _set_lrs(opt_b, config, epoch)
        reports_a: list[dict] = []
        reports_b: list[dict] = []
        for step, batch in enumerate(data.epoch_batches(epoch, config.batch_size, config.seed)):
            if not use_kl:
                report_a = _supervised_step(model_a.backbone, model_a.head, opt_a, batch, epoch, step)
                report_b = _supervised_step(model_b.backbone, model_b.head, opt_b, batch, epoch, step)
            else:
                out_a = model_a(batch.pixels)
                out_b = model_b(batch.pixels)

                report_a = mutual_total_loss(out_a, out_b, batch.labels, loss_config)
                _check_finite(report_a, epoch, step, tag=" (model a)")
                opt_a.zero_grad()
                report_a.total.backward()
                opt_a.step()

                if config.update_scheme == "alternating":
                    partner_for_b = _forward_frozen_stats(model_a, batch.pixels)
                else:
                    partner_for_b = out_a
                report_b = mutual_total_loss(out_b, partner_for_b, batch.labels, loss_config)
                _check_finite(report_b, epoch, step, tag=" (model b)")
                opt_b.zero_grad()
                report_b.total.backward()
                opt_b.step()

            for tag, report, reports in (("a", report_a, reports_a), ("b", report_b, reports_b)):
                scalars = report.scalars()
                reports.append(scalars)
                logger.log(
                    {
                        "model": tag,
                        "epoch": epoch,
                        "step": step,
                        "lr_pretrained": lr_pre,
                        "lr_new": lr_new,
                        **scalars,
                    }
                )
        history_a.append({"epoch": epoch, **_epoch_summary(reports_a)})
        history_b.append({"epoch": epoch, **_epoch_summary(reports_b)})
    bundle = config_bundle or {}
    ckpt_a = snapshot_checkpoint(
        model_a.backbone, model_a.head, opt_a, config.epochs, bundle, history_a
    )
    ckpt_b = snapshot_checkpoint(
        model_b.backbone, model_b.head, opt_b, config.epochs, bundle, history_b
    )
    return ckpt_a, ckpt_b
