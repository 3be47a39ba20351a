"""Training objective: stripe, identity and attribute cross-entropy terms.

``total = w_s * sum_i L_i + w_id * L_ID + w_attr * L_Model`` with unit
weights by default. Every term is a batch mean. Records without any
attribute label are left out of the attribute term's mean; hard and
soft (predicted) attribute labels are both used as one-hot targets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .datamodel import VehicleRecord

NO_ATTRIBUTE = -1


# ------------------------------------------------------------ scalar reference forms


def cross_entropy(logits, target: int) -> float:
    """``-log softmax(logits)[target]`` via the stabilised log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < logits.shape[-1]:
        raise ValueError(f"target {target} outside [0, {logits.shape[-1]})")
    top = logits.max()
    lse = top + np.log(np.exp(logits - top).sum())
    return float(lse - logits[target])


def one_hot(target: int, num_classes: int) -> np.ndarray:
    out = np.zeros(num_classes)
    out[target] = 1.0
    return out


def cross_entropy_full(logits, target_dist) -> float:
    """``-sum_k log p(k) q(k)`` over every class, for an arbitrary target distribution."""
    logits = np.asarray(logits, dtype=np.float64)
    top = logits.max()
    log_p = logits - (top + np.log(np.exp(logits - top).sum()))
    return float(-(log_p * np.asarray(target_dist, dtype=np.float64)).sum())


# ------------------------------------------------------------ batched torch forms


def _per_sample_ce(logits: torch.Tensor, targets: torch.Tensor, smoothing: float = 0.0) -> torch.Tensor:
    log_p = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    nll = -log_p.gather(1, targets[:, None]).squeeze(1)
    if smoothing:
        nll = (1.0 - smoothing) * nll - smoothing * log_p.mean(dim=1)
    return nll


def batch_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, smoothing: float = 0.0) -> torch.Tensor:
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    k = logits.shape[1]
    if bool(((targets < 0) | (targets >= k)).any()):
        raise ValueError(f"targets outside [0, {k})")
    return _per_sample_ce(logits, targets, smoothing).mean()


@dataclass
class LossBreakdown:
    stripe_losses: list[torch.Tensor]
    id_loss: torch.Tensor
    attr_loss: torch.Tensor
    total: torch.Tensor

    def as_record(self, step: int | None = None) -> dict:
        rec = {
            "L_i": [x.item() for x in self.stripe_losses],
            "L_ID": self.id_loss.item(),
            "L_Model": self.attr_loss.item(),
            "total": self.total.item(),
        }
        if step is not None:
            rec = {"step": step, **rec}
        return rec


def targets_from_records(records: Sequence[VehicleRecord]) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.tensor([r.identity for r in records], dtype=torch.long)
    attrs = torch.tensor(
        [NO_ATTRIBUTE if r.attribute is None else r.attribute for r in records], dtype=torch.long
    )
    return ids, attrs


def total_loss(
    outputs: dict,
    identities: torch.Tensor,
    attributes: torch.Tensor,
    weights: Sequence[float] = (1.0, 1.0, 1.0),
    smoothing: float = 0.0,
) -> LossBreakdown:
    """Combine the three loss groups for one batch.

    ``attributes`` holds ``-1`` for records with no label. ``weights`` scale
    (stripe sum, ID, attribute); the breakdown keeps the unweighted terms.
    """
    w_stripe, w_id, w_attr = weights
    stripe = [batch_cross_entropy(lg, identities, smoothing) for lg in outputs["stripe_logits"]]
    id_loss = batch_cross_entropy(outputs["id_logits"], identities, smoothing)
    labelled = attributes != NO_ATTRIBUTE
    attr_logits = outputs["attr_logits"]
    if bool(labelled.any()):
        attr_loss = batch_cross_entropy(attr_logits[labelled], attributes[labelled], smoothing)
    else:
        attr_loss = attr_logits.sum() * 0.0
    # left-to-right so that re-summing the breakdown reproduces total exactly
    stripe_sum = sum(stripe[1:], stripe[0]) if stripe else id_loss * 0.0
    total = w_stripe * stripe_sum + w_id * id_loss + w_attr * attr_loss
    return LossBreakdown(stripe, id_loss, attr_loss, total)
