"""Optimal one-to-one assignment between predictions and ground truth.

The solver is scipy's linear_sum_assignment wrapped with a deterministic
tie-break: among all minimum-cost assignments the lexicographically
smallest pair list is returned, which keeps results stable across platforms
when costs tie.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dataio import GroundTruth
from .decoder import MaskPredictions
from .numerics import sigmoid

LAMBDA_CLS = 2.0
LAMBDA_BCE = 5.0
LAMBDA_DICE = 5.0


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (gt index, prediction index), sorted
    total_cost: float


def _optimal_cost(cost: np.ndarray, rows: list[int], cols: list[int], need: int) -> float | None:
    """Min cost of assigning ``need`` pairs within the given row/col subsets."""
    if need == 0:
        return 0.0
    if min(len(rows), len(cols)) < need:
        return None
    sub = cost[np.ix_(rows, cols)]
    ri, ci = linear_sum_assignment(sub)
    return float(sub[ri, ci].sum())


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost one-to-one assignment of min(R, C) pairs.

    Ties between optimal assignments are broken by returning the
    lexicographically smallest sorted pair list.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if cost.size and not np.isfinite(cost).all():
        raise ValueError("cost matrix entries must be finite")
    r, c = cost.shape
    m = min(r, c)
    if m == 0:
        return Assignment(pairs=[], total_cost=0.0)
    ri, ci = linear_sum_assignment(cost)
    best = float(cost[ri, ci].sum())
    tol = 1e-9 * max(1.0, abs(best))

    pairs: list[tuple[int, int]] = []
    fixed_cost = 0.0
    avail_rows = list(range(r))
    avail_cols = list(range(c))
    current = sorted(zip(ri.tolist(), ci.tolist()))
    for pos in range(m):
        cur_i, cur_j = current[pos]
        need = m - pos - 1
        chosen = None
        # scan candidates lexicographically smaller than the incumbent pair
        for i in avail_rows:
            if i > cur_i:
                break
            rem_rows = [x for x in avail_rows if x > i]
            if len(rem_rows) < need:
                continue
            # cheap lower bound on the completion: each matched row costs at
            # least its row minimum over the still-available columns
            if need:
                row_mins = np.sort(cost[np.ix_(rem_rows, avail_cols)].min(axis=1))
                lb_rest = float(row_mins[:need].sum())
            else:
                lb_rest = 0.0
            j_limit = cur_j if i == cur_i else c
            for j in avail_cols:
                if j >= j_limit:
                    break
                if fixed_cost + cost[i, j] + lb_rest > best + tol:
                    continue
                rem_cols = [x for x in avail_cols if x != j]
                rest = _optimal_cost(cost, rem_rows, rem_cols, need)
                if rest is None:
                    continue
                if fixed_cost + cost[i, j] + rest <= best + tol:
                    chosen = (i, j)
                    if need:
                        sub = cost[np.ix_(rem_rows, rem_cols)]
                        sri, sci = linear_sum_assignment(sub)
                        completion = sorted(
                            (rem_rows[a], rem_cols[b]) for a, b in zip(sri, sci)
                        )
                        current = current[:pos] + [(i, j)] + completion
                    else:
                        current = current[:pos] + [(i, j)]
                    break
            if chosen:
                break
        i, j = current[pos]
        pairs.append((i, j))
        fixed_cost += cost[i, j]
        avail_rows = [x for x in avail_rows if x > i]  # earlier rows stay unmatched
        avail_cols = [x for x in avail_cols if x != j]

    total = float(sum(cost[i, j] for i, j in pairs))
    return Assignment(pairs=pairs, total_cost=total)


def _bce_mean(y: np.ndarray, logits: np.ndarray) -> float:
    # mean BCE of sigmoid(logits) vs binary y, computed stably from logits
    z = logits
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(loss.mean())


def _dice_loss(y: np.ndarray, probs: np.ndarray) -> float:
    inter = float((y * probs).sum())
    denom = float(y.sum() + probs.sum())
    if denom == 0.0:
        return 0.0
    return 1.0 - 2.0 * inter / denom


def rasterize_to_stride(mask: np.ndarray, stride: int) -> np.ndarray:
    """Downsample a binary (H, W) mask by block-mean >= 0.5."""
    h, w = mask.shape
    if h % stride or w % stride:
        raise ValueError(f"mask dims must be divisible by stride {stride}")
    blocks = mask.astype(np.float64).reshape(h // stride, stride, w // stride, stride)
    return blocks.mean(axis=(1, 3)) >= 0.5


def match_cost(
    gt: GroundTruth,
    pred: MaskPredictions,
    class_probs: np.ndarray,
    lambda_cls: float = LAMBDA_CLS,
    lambda_bce: float = LAMBDA_BCE,
    lambda_dice: float = LAMBDA_DICE,
) -> np.ndarray:
    """Cost matrix (N_mask x N): -class prob + BCE + dice, lambda-weighted.

    Ground-truth masks are rasterized to the prediction stride before the
    mask terms are computed.
    """
    n_gt = gt.n_masks
    n_pred = pred.n_queries
    h4, w4 = pred.p_mask_logits.shape[-2:]
    stride = gt.y_mask.shape[1] // h4
    probs = sigmoid(pred.p_mask_logits)
    cost = np.zeros((n_gt, n_pred), dtype=np.float64)
    for i in range(n_gt):
        y = rasterize_to_stride(gt.y_mask[i], stride).astype(np.float64)
        cls_idx = int(gt.y_class[i])
        for j in range(n_pred):
            c = lambda_cls * (-float(class_probs[j, cls_idx]))
            c += lambda_bce * _bce_mean(y, pred.p_mask_logits[j].astype(np.float64))
            c += lambda_dice * _dice_loss(y, probs[j].astype(np.float64))
            cost[i, j] = c
    return cost
