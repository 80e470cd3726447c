# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""losses.py: bipartite matching, point sampling and the detector loss.

The loss of one prediction stage is

  L = mean over matched pairs of (bce + dice) + cls

where bce sums the point-wise binary cross-entropy over K sampled points,
dice is the set-level dice loss over the same points, and cls is the binary
cross-entropy of every query's text logit, weighted by lambda_cls_matched or
lambda_cls_unmatched and averaged over all N queries. Matching is recomputed
for every stage and carries no gradient.
"""

import dataclasses
import logging
import typing as t

import numpy as np
from scipy.optimize import linear_sum_assignment

import src.decoder as decoder
import src.settings as settings
import src.tensor as tensor
from src.tensor import Tensor

DICE_EPS = 1.0


@dataclasses.dataclass(frozen=True)
class LossConfig:
    points_k: int = 1024
    importance_ratio: float = 0.75
    oversample_ratio: int = 3
    lambda_cls_matched: float = 0.4
    lambda_cls_unmatched: float = 0.02
    aux_loss: bool = True
    aux_weight: float = 1.0

    @classmethod
    def from_settings(cls) -> "LossConfig":
        return cls(**{f.name: settings.get(f.name) for f in dataclasses.fields(cls)})


class MatchResult(t.NamedTuple):
    pairs: t.List[t.Tuple[int, int]]
    """(query, ground truth) pairs, sorted by query."""

    unmatched_queries: t.List[int]

    def matched(self, n_queries: int) -> np.ndarray:
        labels = np.zeros(n_queries, dtype=bool)
        labels[[q for q, _ in self.pairs]] = True
        return labels


def sample_points(logits: np.ndarray, n_points: int, rng: np.random.Generator,
                  importance_ratio: float = 0.75, oversample_ratio: int = 3) -> np.ndarray:
    """
    Choose K flat positions on a mask: importance_ratio of them are the most
    uncertain (smallest |logit|) of oversample_ratio * K uniform candidates,
    the rest are uniform.

    Uniform positions are drawn without replacement when K fits the grid,
    and with replacement otherwise.

    Args:
      logits: the prediction's mask logits, any shape.

    Returns:
      K flat indices.
    """
    size = logits.size
    n_important = int(round(importance_ratio * n_points))
    n_uniform = n_points - n_important
    picked = []
    if n_important:
        candidates = rng.integers(0, size, size=oversample_ratio * n_points)
        order = np.argsort(np.abs(logits.reshape(-1)[candidates]), kind="stable")
        picked.append(candidates[order[:n_important]])
    if n_uniform:
        if n_uniform <= size:
            picked.append(rng.permutation(size)[:n_uniform])
        else:
            picked.append(rng.integers(0, size, size=n_uniform))
    return np.concatenate(picked).astype(np.int64)


def point_logits(mask_logits: Tensor, query: int, points: np.ndarray) -> Tensor:
    """Logits of one query's mask at flat positions."""
    n = mask_logits.shape[0]
    flat = tensor.reshape(mask_logits, (n, -1))
    return flat[query, points]


def loss_bce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """P x K logits and targets: point-wise BCE summed over K, averaged over P."""
    return tensor.mean(tensor.tsum(tensor.bce_with_logits(logits, targets), axis=1))


def loss_dice(probs: Tensor, targets: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """P x K probabilities: 1 - (2 sum py + eps) / (sum p + sum y + eps), averaged over P."""
    y = np.asarray(targets, dtype=probs.data.dtype)
    numerator = 2.0 * tensor.tsum(probs * y, axis=1) + eps
    denominator = tensor.tsum(probs, axis=1) + y.sum(axis=1) + eps
    return tensor.mean(1.0 - numerator / denominator)


def loss_cls(class_logits: Tensor, matched: np.ndarray, cfg: LossConfig) -> Tensor:
    """Weighted binary cross-entropy of the text logits, averaged over N."""
    labels = np.asarray(matched, dtype=bool)
    weights = np.where(labels, cfg.lambda_cls_matched, cfg.lambda_cls_unmatched)
    return tensor.mean(tensor.bce_with_logits(class_logits, labels) * weights)


def assign(cost: np.ndarray) -> MatchResult:
    """Minimum-cost one-to-one assignment of rows (queries) to columns (ground truths)."""
    n_queries = cost.shape[0]
    if cost.shape[1] == 0:
        return MatchResult([], list(range(n_queries)))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    used = {q for q, _ in pairs}
    return MatchResult(pairs, [q for q in range(n_queries) if q not in used])


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def match_cost(mask_logits: np.ndarray, class_logits: np.ndarray, gt_masks: np.ndarray,
               points: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """
    N x G matching cost on one shared point set:
    lambda_cls_matched * -log p + bce + dice.
    """
    z = np.clip(mask_logits.reshape(len(mask_logits), -1)[:, points],
                -tensor.BCE_LOGIT_CLIP, tensor.BCE_LOGIT_CLIP).astype(np.float64)
    y = gt_masks.reshape(len(gt_masks), -1)[:, points].astype(np.float64)
    bce = _softplus(z).sum(axis=1)[:, None] - z @ y.T
    p = tensor._sigmoid(z)
    dice = 1.0 - (2.0 * p @ y.T + DICE_EPS) / (p.sum(axis=1)[:, None] + y.sum(axis=1)[None] + DICE_EPS)
    c = np.clip(class_logits.astype(np.float64), -tensor.BCE_LOGIT_CLIP, tensor.BCE_LOGIT_CLIP)
    cls = cfg.lambda_cls_matched * _softplus(-c)
    return cls[:, None] + bce + dice


def hungarian_match(prediction: decoder.Prediction, gt_masks: np.ndarray, cfg: LossConfig,
                    rng: np.random.Generator) -> MatchResult:
    """
    Match queries to ground truths by the cost of match_cost on uniformly
    sampled points shared by every pair.

    Args:
      gt_masks: G x h x w ground truths on the embedding grid.
    """
    n = prediction.mask_logits.shape[0]
    if len(gt_masks) == 0:
        return MatchResult([], list(range(n)))
    logits = prediction.mask_logits.data
    points = sample_points(logits[0], cfg.points_k, rng, importance_ratio=0.0)
    return assign(match_cost(logits, prediction.class_logits.data, gt_masks, points, cfg))


def stage_loss(prediction: decoder.Prediction, gt_masks: np.ndarray, cfg: LossConfig,
               rng: np.random.Generator) -> t.Tuple[Tensor, t.Dict[str, float]]:
    """Loss of one prediction stage, with its components for logging."""
    match = hungarian_match(prediction, gt_masks, cfg, rng)
    n = prediction.mask_logits.shape[0]
    cls = loss_cls(prediction.class_logits, match.matched(n), cfg)
    if not match.pairs:
        return cls, {"bce": 0.0, "dice": 0.0, "cls": cls.item()}
    flat_gt = gt_masks.reshape(len(gt_masks), -1)
    logits, targets = [], []
    for q, g in match.pairs:
        points = sample_points(prediction.mask_logits.data[q], cfg.points_k, rng,
                               cfg.importance_ratio, cfg.oversample_ratio)
        logits.append(point_logits(prediction.mask_logits, q, points))
        targets.append(flat_gt[g, points])
    logits = tensor.stack(logits)
    targets = np.stack(targets)
    bce = loss_bce(logits, targets)
    dice = loss_dice(tensor.sigmoid(logits), targets)
    total = bce + dice + cls
    return total, {"bce": bce.item(), "dice": dice.item(), "cls": cls.item()}


def loss_total(instances: decoder.TextInstanceSet, gt_masks: np.ndarray, cfg: LossConfig,
               rng: np.random.Generator) -> t.Tuple[Tensor, t.Dict[str, float]]:
    """
    Final-stage loss plus, when aux_loss is set, aux_weight times the loss of
    every earlier stage.

    Returns:
      the scalar loss and a flat dict of logged components.
    """
    total, parts = stage_loss(instances.final, gt_masks, cfg, rng)
    log = dict(parts)
    if cfg.aux_loss:
        for s, prediction in enumerate(instances.aux):
            aux, aux_parts = stage_loss(prediction, gt_masks, cfg, rng)
            total = total + cfg.aux_weight * aux
            log.update({"aux{}_{}".format(s, k): v for k, v in aux_parts.items()})
    log["total"] = total.item()
    logging.debug("Loss components: %s", log)
    return total, log
