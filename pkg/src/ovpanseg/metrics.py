"""Panoptic-quality family and mean IoU over semantic projections.

Segments match iff they share a category and their IoU exceeds 0.5 (such a
match is unique). Ground-truth void pixels are excluded from IoU
denominators, and an unmatched predicted segment lying mostly on void does
not count as a false positive. Aggregates are unweighted means over the
categories present in the ground truth of the respective split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import PanopticMap, Vocabulary


@dataclass
class CategoryStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0
    gt_present: bool = False


@dataclass
class PqAccumulator:
    """Additive per-category TP/FP/FN and matched-IoU totals."""

    vocab: Vocabulary
    seen_mask: np.ndarray  # (C,) bool in vocabulary order
    stats: dict[int, CategoryStats] = field(default_factory=dict)  # by category id

    def stat(self, cat_id: int) -> CategoryStats:
        if cat_id not in self.stats:
            self.stats[cat_id] = CategoryStats()
        return self.stats[cat_id]

    def is_seen_id(self, cat_id: int) -> bool:
        return bool(self.seen_mask[self.vocab.index_of_id(cat_id)])


def make_accumulator(vocab: Vocabulary, seen_mask: np.ndarray | None = None) -> PqAccumulator:
    if seen_mask is None:
        seen_mask = np.ones(vocab.size, dtype=bool)
    return PqAccumulator(vocab=vocab, seen_mask=np.asarray(seen_mask, dtype=bool))


def merge(a: PqAccumulator, b: PqAccumulator) -> PqAccumulator:
    out = make_accumulator(a.vocab, a.seen_mask)
    for src in (a, b):
        for cat_id, s in src.stats.items():
            t = out.stat(cat_id)
            t.tp += s.tp
            t.fp += s.fp
            t.fn += s.fn
            t.iou_sum += s.iou_sum
            t.gt_present = t.gt_present or s.gt_present
    return out


def pq_accumulate(acc: PqAccumulator, pred: PanopticMap, gt: PanopticMap) -> PqAccumulator:
    """Add one image's match statistics; returns a new accumulator."""
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth grids differ in size")
    out = merge(acc, make_accumulator(acc.vocab, acc.seen_mask))

    gt_ids = gt.segment_ids.astype(np.int64)
    pr_ids = pred.segment_ids.astype(np.int64)
    offset = int(pr_ids.max()) + 1
    combo = gt_ids * offset + pr_ids
    vals, counts = np.unique(combo, return_counts=True)
    inter: dict[tuple[int, int], int] = {}
    gt_area: dict[int, int] = {}
    pr_area: dict[int, int] = {}
    for v, cnt in zip(vals.tolist(), counts.tolist()):
        g, p = divmod(v, offset)
        inter[(g, p)] = cnt
        gt_area[g] = gt_area.get(g, 0) + cnt
        pr_area[p] = pr_area.get(p, 0) + cnt

    gt_by_id = {s.id: s for s in gt.segments}
    pr_by_id = {s.id: s for s in pred.segments}
    for s in gt.segments:
        out.stat(s.category).gt_present = True

    matched_gt: set[int] = set()
    matched_pr: set[int] = set()
    for (g, p), cnt in inter.items():
        if g == 0 or p == 0:
            continue
        gs, ps = gt_by_id[g], pr_by_id[p]
        if gs.category != ps.category:
            continue
        # prediction pixels on gt void leave the union
        void_overlap = inter.get((0, p), 0)
        union = gt_area[g] + pr_area[p] - cnt - void_overlap
        iou = cnt / union if union > 0 else 0.0
        if iou > 0.5:
            st = out.stat(gs.category)
            st.tp += 1
            st.iou_sum += iou
            matched_gt.add(g)
            matched_pr.add(p)

    for s in gt.segments:
        if s.id not in matched_gt:
            out.stat(s.category).fn += 1
    for s in pred.segments:
        if s.id in matched_pr:
            continue
        # mostly-void predictions are ignored rather than penalized
        void_overlap = inter.get((0, s.id), 0)
        if pr_area.get(s.id, 0) > 0 and void_overlap / pr_area[s.id] > 0.5:
            continue
        out.stat(s.category).fp += 1
    return out


def _category_pq(s: CategoryStats) -> tuple[float, float, float]:
    sq = s.iou_sum / s.tp if s.tp > 0 else 0.0
    denom = s.tp + 0.5 * s.fp + 0.5 * s.fn
    rq = s.tp / denom if denom > 0 else 0.0
    return sq * rq, sq, rq


def pq_report(acc: PqAccumulator) -> dict:
    """Per-category PQ/SQ/RQ plus unweighted aggregates over categories
    present in ground truth, split by thing/stuff and seen/unseen."""
    per_category: dict[int, dict] = {}
    rows = []
    for cat in acc.vocab.categories:
        s = acc.stats.get(cat.id)
        if s is None:
            continue
        pq, sq, rq = _category_pq(s)
        info = {
            "name": cat.name,
            "pq": pq, "sq": sq, "rq": rq,
            "tp": s.tp, "fp": s.fp, "fn": s.fn, "iou_sum": s.iou_sum,
            "is_thing": cat.is_thing,
            "is_seen": acc.is_seen_id(cat.id),
            "gt_present": s.gt_present,
        }
        per_category[cat.id] = info
        if s.gt_present:
            rows.append(info)

    def mean_over(sel) -> float:
        vals = [r["pq"] for r in rows if sel(r)]
        return float(np.mean(vals)) if vals else 0.0

    totals = {
        "PQ": float(np.mean([r["pq"] for r in rows])) if rows else 0.0,
        "SQ": float(np.mean([r["sq"] for r in rows])) if rows else 0.0,
        "RQ": float(np.mean([r["rq"] for r in rows])) if rows else 0.0,
        "PQ_th": mean_over(lambda r: r["is_thing"]),
        "PQ_st": mean_over(lambda r: not r["is_thing"]),
        "PQ_seen": mean_over(lambda r: r["is_seen"]),
        "PQ_unseen": mean_over(lambda r: not r["is_seen"]),
        "n_categories": len(rows),
    }
    return {"per_category": per_category, "totals": totals}


@dataclass
class MiouAccumulator:
    """Per-class intersection and union pixel counts, addable across images."""

    intersection: np.ndarray  # (C,) int64
    union: np.ndarray  # (C,) int64

    @classmethod
    def empty(cls, n_classes: int) -> "MiouAccumulator":
        return cls(intersection=np.zeros(n_classes, dtype=np.int64),
                   union=np.zeros(n_classes, dtype=np.int64))

    def add(self, pred_sem: np.ndarray, gt_sem: np.ndarray) -> None:
        """Accumulate one image; grids hold class indices in [0, C), -1 = void.
        Ground-truth void pixels are excluded entirely."""
        valid = gt_sem >= 0
        p = pred_sem[valid]
        g = gt_sem[valid]
        c = self.intersection.shape[0]
        for k in range(c):
            pk = p == k
            gk = g == k
            self.intersection[k] += int(np.logical_and(pk, gk).sum())
            self.union[k] += int(np.logical_or(pk, gk).sum())

    def result(self) -> tuple[float, np.ndarray]:
        per_class = np.full(self.intersection.shape[0], np.nan)
        nz = self.union > 0
        per_class[nz] = self.intersection[nz] / self.union[nz]
        mean = float(per_class[nz].mean()) if nz.any() else 0.0
        return mean, per_class


def miou(pred_sem: np.ndarray, gt_sem: np.ndarray, n_classes: int) -> tuple[float, np.ndarray]:
    """Mean IoU of two class-index grids (-1 = void, gt void excluded).

    Classes with zero union are left out of the mean (NaN in the per-class
    vector)."""
    acc = MiouAccumulator.empty(n_classes)
    acc.add(pred_sem, gt_sem)
    return acc.result()
