"""Open-vocabulary classification, selective ensembling, panoptic fusion.

Two class distributions per mask (fusion-stream and plain image-text
stream) are combined by an IoU-weighted geometric ensemble whose exponents
adapt per mask to the relative peakedness of the two streams, split between
in-vocabulary and out-of-vocabulary categories by the overlap mask. The
fused scores then drive a pixel-argmax panoptic fusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import PanopticMap, SegmentInfo, Vocabulary
from .ldp import MaskEmbeddings
from .numerics import bilinear_resize, nearest_resize, softmax

EPS_POWER = 1e-12  # floor for geometric-ensemble bases (exponents can exceed 1)
EPS_CONF = 1e-9  # degenerate-confidence guard for the selective-entropy ratio
DEFAULT_ALPHA = 0.8
DEFAULT_BETA = 0.4


@dataclass
class ClassDistributions:
    p_ldp_raw: np.ndarray  # (N, C) softmax rows of the fusion stream
    p_clip_raw: np.ndarray  # (N, C) softmax rows of the plain image-text stream
    overlap_mask: np.ndarray  # (C,) bool, True = in-vocabulary
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA


@dataclass
class FusedClassScores:
    p_class: np.ndarray  # (N, C) non-negative fused scores (not renormalized)
    se_ldp: np.ndarray  # (N,)
    se_clip: np.ndarray  # (N,)
    se_conf: np.ndarray  # (N,) in [0, 1]
    alpha_hat: np.ndarray  # (N,) in [alpha, 2*alpha]
    beta_hat: np.ndarray  # (N,) in [beta, 2*beta]


@dataclass
class FusionConfig:
    score_thresh: float = 0.3
    min_area: int = 16
    overlap_thresh: float = 0.8
    upsample: str = "nearest"  # "nearest" keeps stride-4 cells lossless; or "bilinear"

    def __post_init__(self) -> None:
        if not (0.0 <= self.score_thresh <= 1.0 and 0.0 <= self.overlap_thresh <= 1.0):
            raise ValueError("fusion thresholds must lie in [0, 1]")
        if self.upsample not in ("nearest", "bilinear"):
            raise ValueError("upsample must be 'nearest' or 'bilinear'")


def classify(embeddings: MaskEmbeddings, g_text: np.ndarray, tau: float,
             stream: str = "ldp") -> np.ndarray:
    """Row-wise softmax of cosine-similarity logits scaled by 1/tau.

    Rows of invalid masks get the uniform distribution.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    rows = embeddings.g_ldp if stream == "ldp" else embeddings.g_clip
    c = g_text.shape[0]
    out = np.full((rows.shape[0], c), 1.0 / c, dtype=np.float64)
    if embeddings.valid.any():
        logits = rows[embeddings.valid].astype(np.float64) @ g_text.T.astype(np.float64)
        out[embeddings.valid] = softmax(logits, axis=-1, temperature=tau)
    return out


def selective_entropy(p_row: np.ndarray) -> float:
    """1 - (second largest / largest); a peakedness score in [0, 1]."""
    p_row = np.asarray(p_row, dtype=np.float64)
    if p_row.ndim != 1 or p_row.size < 2:
        raise ValueError("need a 1-D row with at least two entries")
    if np.any(p_row < 0):
        raise ValueError("row entries must be non-negative")
    top2 = np.sort(p_row)[-2:]
    if top2[1] <= 0:
        raise ValueError("degenerate distribution (all-zero row)")
    return float(1.0 - top2[0] / top2[1])


def _se_rows(weighted: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Selective entropy per mask of IoU-weighted rows; a row zeroed out by a
    zero IoU weight falls back to its raw distribution (the weighting cancels
    in the top-2 ratio, so this is the continuous extension)."""
    n = weighted.shape[0]
    out = np.empty(n, dtype=np.float64)
    for k in range(n):
        row = weighted[k] if weighted[k].max() > 0 else raw[k]
        out[k] = selective_entropy(row)
    return out


def _ensemble(
    dist: ClassDistributions,
    p_iou: np.ndarray,
    se_conf_override: float | None,
) -> FusedClassScores:
    p_iou = np.asarray(p_iou, dtype=np.float64)
    if (not np.isfinite(p_iou).all()) or p_iou.min(initial=0.0) < 0 or p_iou.max(initial=0.0) > 1:
        raise ValueError("invalid IoU scores (must be finite and within [0, 1])")
    n, c = dist.p_ldp_raw.shape
    if dist.overlap_mask.shape != (c,):
        raise ValueError("overlap mask length must equal the class count")

    p_ldp = dist.p_ldp_raw.astype(np.float64) * p_iou[:, None]
    p_clip = dist.p_clip_raw.astype(np.float64) * p_iou[:, None]

    se_ldp = _se_rows(p_ldp, dist.p_ldp_raw)
    se_clip = _se_rows(p_clip, dist.p_clip_raw)
    if se_conf_override is None:
        denom = se_clip + se_ldp
        se_conf = np.where(denom < EPS_CONF, 0.5, se_clip / np.where(denom == 0, 1.0, denom))
    else:
        se_conf = np.full(n, float(se_conf_override))
    alpha_hat = dist.alpha * (1.0 + se_conf)
    beta_hat = dist.beta * (1.0 + se_conf)

    m = dist.overlap_mask.astype(np.float64)
    base_ldp = np.maximum(p_ldp, EPS_POWER)
    base_clip = np.maximum(p_clip, EPS_POWER)
    p_in = np.power(base_ldp, (1.0 - alpha_hat)[:, None]) \
        * np.power(base_clip, alpha_hat[:, None]) * m[None, :]
    p_out = np.power(base_ldp, (1.0 - beta_hat)[:, None]) \
        * np.power(base_clip, beta_hat[:, None]) * (1.0 - m)[None, :]
    return FusedClassScores(
        p_class=p_in + p_out,
        se_ldp=se_ldp,
        se_clip=se_clip,
        se_conf=se_conf,
        alpha_hat=alpha_hat,
        beta_hat=beta_hat,
    )


def mase(dist: ClassDistributions, p_iou: np.ndarray) -> FusedClassScores:
    """Mask-aware selective ensemble of the two class-distribution streams.

    Rows are weighted by the per-mask IoU score, the ensemble exponents are
    adapted per mask by the relative peakedness of the two weighted rows,
    and the in/out-of-vocabulary halves are fused with the adapted alpha and
    beta exponents before being re-summed.
    """
    return _ensemble(dist, p_iou, se_conf_override=None)


def geometric_ensemble(
    dist: ClassDistributions, p_iou: np.ndarray, force_se_conf: float = 0.0
) -> FusedClassScores:
    """Fixed-exponent baseline: the same fusion with the confidence term
    pinned (0 by default, i.e. alpha_hat = alpha and beta_hat = beta)."""
    return _ensemble(dist, p_iou, se_conf_override=force_se_conf)


def panoptic_fuse(
    p_mask_probs: np.ndarray,
    fused: FusedClassScores,
    vocab: Vocabulary,
    cfg: FusionConfig | None = None,
    image_h: int | None = None,
    image_w: int | None = None,
) -> PanopticMap:
    """Resolve per-mask predictions into a panoptic map.

    Masks scoring below the threshold are discarded; every pixel goes to the
    argmax of score * mask probability (ties to the lower mask index);
    segments that are too small or retain too little of their own area are
    dropped; stuff segments of one category are merged. Remaining pixels are
    void.
    """
    cfg = cfg or FusionConfig()
    n, h4, w4 = p_mask_probs.shape
    h = image_h if image_h is not None else h4 * 4
    w = image_w if image_w is not None else w4 * 4

    scores = fused.p_class.max(axis=1)
    labels = fused.p_class.argmax(axis=1)
    keep = np.flatnonzero(scores >= cfg.score_thresh)

    ids = np.zeros((h, w), dtype=np.int32)
    segments: list[SegmentInfo] = []
    if keep.size == 0:
        return PanopticMap(segment_ids=ids, segments=segments)

    if cfg.upsample == "nearest":
        up = nearest_resize(p_mask_probs[keep], h, w)
    else:
        up = bilinear_resize(p_mask_probs[keep], h, w)
    weighted = up * scores[keep][:, None, None]
    owner = np.argmax(weighted, axis=0)  # ties -> lower index = lower mask index

    next_id = 1
    stuff_ids: dict[int, int] = {}  # category id -> segment id
    for kk, mask_idx in enumerate(keep):
        won = owner == kk
        area = int(won.sum())
        own = up[kk] >= 0.5
        own_area = int(own.sum())
        if area == 0 or area < cfg.min_area or own_area == 0:
            continue
        retention = float((won & own).sum()) / own_area
        if retention < cfg.overlap_thresh:
            continue
        cat_idx = int(labels[mask_idx])
        cat = vocab.categories[cat_idx]
        if cat.is_thing:
            seg_id = next_id
            next_id += 1
            segments.append(SegmentInfo(id=seg_id, category=cat.id, is_thing=True,
                                        score=float(scores[mask_idx])))
        elif cat.id in stuff_ids:
            seg_id = stuff_ids[cat.id]
            for s in segments:
                if s.id == seg_id:
                    s.score = max(s.score, float(scores[mask_idx]))
        else:
            seg_id = next_id
            next_id += 1
            stuff_ids[cat.id] = seg_id
            segments.append(SegmentInfo(id=seg_id, category=cat.id, is_thing=False,
                                        score=float(scores[mask_idx])))
        ids[won] = seg_id
    return PanopticMap(segment_ids=ids, segments=segments)


def semantic_project(pan: PanopticMap) -> np.ndarray:
    """Per-pixel category-id grid; void pixels become -1."""
    out = np.full(pan.shape, -1, dtype=np.int64)
    for seg in pan.segments:
        out[pan.segment_ids == seg.id] = seg.category
    return out
