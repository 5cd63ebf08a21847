"""Classification losses: cross-entropy, focal loss and CLIP-CE.

CLIP-CE scales each ground-truth object's cross-entropy by ``exp(alpha * w)``
where ``w`` is the object's AME weight during the first ``ep_i`` (pre-training)
epochs and its FAME weight afterwards. Background proposals keep plain CE.

Scalar numpy versions are the reference; :func:`clipce_loss_torch` is the
batched form the detector trains with.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .ame import FocalParams, WeightRecord
from .exceptions import InputError, StateError

PROB_EPS = 1e-7
AME_BRANCH = "ame"
FAME_BRANCH = "fame"

# per-dataset (alpha1, alpha2) defaults
DATASET_ALPHAS = {
    "hazycoco": (0.5, 1.0),
    "rtts": (2.0, 2.0),
    "exdark": (1.0, 1.0),
    "trashcan": (0.5, 0.5),
}


@dataclass(frozen=True)
class ClassificationOutput:
    probs: np.ndarray
    gt_index: int

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim != 1 or np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-5:
            raise InputError("probs must lie on the probability simplex")
        if not 0 <= self.gt_index < p.shape[0]:
            raise InputError(f"gt_index {self.gt_index} invalid for {p.shape[0]} classes")

    @property
    def p_t(self) -> float:
        return float(self.probs[self.gt_index])

    @classmethod
    def from_logits(cls, logits, gt_index: int) -> "ClassificationOutput":
        return cls(softmax(logits), gt_index)


@dataclass(frozen=True)
class ClipCeSchedule:
    alpha1: float = 0.5
    alpha2: float = 1.0
    ep_i: int = 15
    ep_j: int = 20

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise InputError("alphas must be >= 0")
        if not 0 < self.ep_i <= self.ep_j:
            raise InputError(f"need 0 < ep_i <= ep_j, got ep_i={self.ep_i}, ep_j={self.ep_j}")

    def branch(self, epoch: int) -> str:
        if not 0 < epoch <= self.ep_j:
            raise InputError(f"epoch {epoch} outside (0, {self.ep_j}]")
        return AME_BRANCH if epoch <= self.ep_i else FAME_BRANCH

    def active_weight(self, weights: WeightRecord, epoch: int) -> float:
        if self.branch(epoch) == AME_BRANCH:
            return weights.w_ame
        if weights.w_fame is None:
            raise StateError(f"epoch {epoch} needs a FAME weight but the adapter pathway has not run")
        return weights.w_fame

    def multiplier(self, weights: WeightRecord, epoch: int) -> float:
        alpha = self.alpha1 if self.branch(epoch) == AME_BRANCH else self.alpha2
        return math.exp(alpha * self.active_weight(weights, epoch))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _nll(p_t: float) -> float:
    return -math.log(max(p_t, PROB_EPS))


def ce_loss(out: ClassificationOutput) -> float:
    return _nll(out.p_t)


def focal_loss(out: ClassificationOutput, params: FocalParams = FocalParams()) -> float:
    return (1.0 - out.p_t) ** params.gamma * _nll(out.p_t)


def clipce_loss(
    out: ClassificationOutput,
    weights: WeightRecord,
    epoch: int,
    sched: ClipCeSchedule,
    counter: Counter | None = None,
) -> float:
    """CLIP-CE for one ground-truth-matched proposal.

    ``counter``, if given, is incremented under the branch name used.
    """
    m = sched.multiplier(weights, epoch)
    if counter is not None:
        counter[sched.branch(epoch)] += 1
    return m * _nll(out.p_t)


def clipce_grad_logits(logits, gt_index: int, multiplier: float) -> np.ndarray:
    """Gradient of ``multiplier * -log softmax(logits)[gt]`` w.r.t. the logits.

    The weight multiplier is a constant here. Valid where ``p_t`` is above
    the clamp.
    """
    g = softmax(logits)
    g[gt_index] -= 1.0
    return multiplier * g


def batch_detection_class_loss(batch, epoch: int, sched: ClipCeSchedule, counter: Counter | None = None) -> float:
    """Mean classification loss over proposals.

    ``batch`` holds ``(out, weights)`` pairs; ``weights`` is ``None`` for
    background proposals, which get unweighted CE.
    """
    if len(batch) == 0:
        raise InputError("empty proposal batch")
    total = 0.0
    for out, weights in batch:
        total += ce_loss(out) if weights is None else clipce_loss(out, weights, epoch, sched, counter)
    return total / len(batch)


def clipce_loss_torch(logits, labels, multipliers):
    """Batched CLIP-CE: mean of ``multipliers * -log(max(p_label, eps))``.

    ``multipliers`` is 1 for background proposals and ``exp(alpha * w)`` for
    ground-truth-matched ones; it must carry no gradient.
    """
    import torch

    logp = torch.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    nll = -torch.clamp(logp, min=math.log(PROB_EPS))
    return (multipliers.detach() * nll).mean()
