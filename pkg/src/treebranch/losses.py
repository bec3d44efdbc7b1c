"""Classification objectives for the branch head and the dual-model mutual
objective.

The supervised loss is the sum of per-leaf cross-entropies (averaged over the
batch) plus the global branch cross-entropy. The mutual term is a KL
divergence between the two models' softmax distributions over the
*concatenation* of all local logits: one distribution of length K*M per
sample, not K separate ones. A per-part variant is available behind
``LossConfig.kl_over`` for ablations.

All softmax / CE / KL math runs in log space (max-subtracted), and partner
logits are always gradient-detached inside the mutual losses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .errors import ValidationError
from .head import BranchOutputs

# Direction of the mutual KL term for the model being updated:
#   partner_to_own -- minimize KL(partner || own); the mutual-learning convention. Default.
#   own_to_partner -- minimize KL(own || partner).
KL_DIRECTIONS = ("partner_to_own", "own_to_partner")
KL_DOMAINS = ("concat", "per_part")


@dataclass
class LossConfig:
    num_identities: int
    num_leaves: int
    kl_direction: str = "partner_to_own"
    kl_weight: float = 1.0
    kl_over: str = "concat"

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ValidationError(f"num_identities must be >= 2, got {self.num_identities}")
        if self.num_leaves < 1:
            raise ValidationError(f"num_leaves must be >= 1, got {self.num_leaves}")
        if self.kl_weight < 0:
            raise ValidationError(f"kl_weight must be >= 0, got {self.kl_weight}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValidationError(f"kl_direction must be one of {KL_DIRECTIONS}, got '{self.kl_direction}'")
        if self.kl_over not in KL_DOMAINS:
            raise ValidationError(f"kl_over must be one of {KL_DOMAINS}, got '{self.kl_over}'")


@dataclass
class LossReport:
    """Scalar total plus its breakdown. ``total = local_ce + global_ce``, plus
    ``kl_weight * kl`` when a mutual term is present (``kl`` stores the raw,
    unweighted divergence)."""

    total: torch.Tensor
    local_ce: torch.Tensor
    global_ce: torch.Tensor
    per_part_ce: list[torch.Tensor]
    kl: Optional[torch.Tensor] = None
    kl_weight: float = 0.0

    def scalars(self) -> dict[str, float]:
        out = {
            "total": float(self.total.detach()),
            "local_ce": float(self.local_ce.detach()),
            "global_ce": float(self.global_ce.detach()),
            "per_part_ce": [float(t.detach()) for t in self.per_part_ce],
        }
        if self.kl is not None:
            out["kl"] = float(self.kl.detach())
            out["kl_weight"] = self.kl_weight
        return out


def _check_labels(labels: torch.Tensor, num_classes: int) -> None:
    if labels.dim() != 1:
        raise ValidationError(f"labels must be a 1-D index tensor, got shape {tuple(labels.shape)}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValidationError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )


def _cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if logits.dim() != 2:
        raise ValidationError(f"logits must be (batch, M), got shape {tuple(logits.shape)}")
    if logits.shape[0] != labels.shape[0]:
        raise ValidationError(
            f"batch mismatch: {logits.shape[0]} logit rows vs {labels.shape[0]} labels"
        )
    _check_labels(labels, logits.shape[1])
    log_probs = torch.log_softmax(logits, dim=1)
    return -log_probs[torch.arange(logits.shape[0]), labels].mean()


def global_ce_loss(global_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch-mean cross-entropy of the global branch."""
    return _cross_entropy(global_logits, labels)


def local_ce_loss(local_logits: Sequence[torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
    """Batch-mean of the sum over leaves of per-leaf cross-entropy.

    Each leaf contributes the negative log of its own softmax evaluated at
    the true identity: the indicator over classes collapses the class sum to
    the labeled entry, so every leaf is an ordinary softmax classifier and
    the local term is their sum, averaged over the mini-batch.
    """
    if not local_logits:
        raise ValidationError("local_logits is empty")
    first = local_logits[0].shape
    for k, block in enumerate(local_logits):
        if block.shape != first:
            raise ValidationError(
                f"local logit block {k} has shape {tuple(block.shape)}, expected {tuple(first)}"
            )
    parts = [_cross_entropy(block, labels) for block in local_logits]
    return torch.stack(parts).sum()


def supervised_loss(outputs: BranchOutputs, labels: torch.Tensor) -> LossReport:
    """Local + global cross-entropy with a per-term breakdown."""
    per_part = [_cross_entropy(block, labels) for block in outputs.local_logits]
    local = torch.stack(per_part).sum()
    global_ = _cross_entropy(outputs.global_logits, labels)
    return LossReport(total=local + global_, local_ce=local, global_ce=global_, per_part_ce=per_part)


def concat_local_logits(local_logits: Sequence[torch.Tensor]) -> torch.Tensor:
    """Row-wise concatenation of the K local logit blocks, in leaf order."""
    if not local_logits:
        raise ValidationError("local_logits is empty")
    first = local_logits[0].shape
    for k, block in enumerate(local_logits):
        if block.dim() != 2 or block.shape != first:
            raise ValidationError(
                f"local logit block {k} has shape {tuple(block.shape)}, expected {tuple(first)}"
            )
    return torch.cat(list(local_logits), dim=1)


def _kl_from_logits(logits_p: torch.Tensor, logits_q: torch.Tensor) -> torch.Tensor:
    """Batch-mean KL(softmax(p) || softmax(q)); entries with p == 0 contribute 0."""
    if logits_p.shape != logits_q.shape:
        raise ValidationError(
            f"logit shapes differ: {tuple(logits_p.shape)} vs {tuple(logits_q.shape)}"
        )
    log_p = torch.log_softmax(logits_p, dim=1)
    log_q = torch.log_softmax(logits_q, dim=1)
    p = log_p.exp()
    contrib = torch.where(p > 0, p * (log_p - log_q), torch.zeros_like(p))
    return contrib.sum(dim=1).mean()


def mutual_kl_loss(logits_p: torch.Tensor, logits_q: torch.Tensor) -> torch.Tensor:
    """Batch-mean KL from q's distribution to p's over concatenated logits.

    ``logits_q`` is treated as a constant: no gradient flows to the partner.
    """
    return _kl_from_logits(logits_p, logits_q.detach())


def mutual_total_loss(
    outputs: BranchOutputs,
    partner_outputs: BranchOutputs,
    labels: torch.Tensor,
    config: LossConfig,
) -> LossReport:
    """Supervised loss of the model being updated plus the weighted mutual KL
    term against the (gradient-detached) partner. Only local logits enter the
    KL; the global branch stays purely supervised."""
    config.validate()
    if outputs.num_leaves != config.num_leaves or partner_outputs.num_leaves != config.num_leaves:
        raise ValidationError(
            f"expected {config.num_leaves} local branches, got "
            f"{outputs.num_leaves} (model) and {partner_outputs.num_leaves} (partner)"
        )
    report = supervised_loss(outputs, labels)
    if config.kl_weight == 0:
        return report

    if config.kl_over == "concat":
        own = [concat_local_logits(outputs.local_logits)]
        partner = [concat_local_logits(partner_outputs.local_logits).detach()]
    else:
        own = list(outputs.local_logits)
        partner = [block.detach() for block in partner_outputs.local_logits]

    terms = []
    for own_block, partner_block in zip(own, partner):
        if config.kl_direction == "partner_to_own":
            terms.append(_kl_from_logits(partner_block, own_block))
        else:
            terms.append(_kl_from_logits(own_block, partner_block))
    kl = torch.stack(terms).sum()
    return LossReport(
        total=report.total + config.kl_weight * kl,
        local_ce=report.local_ce,
        global_ce=report.global_ce,
        per_part_ce=report.per_part_ce,
        kl=kl,
        kl_weight=config.kl_weight,
    )
