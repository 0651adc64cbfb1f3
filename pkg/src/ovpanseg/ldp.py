"""Per-mask embeddings: soft mask pooling plus the two-stream fusion block.

The fusion path pools the stride-4 pixel embedding (spatial stream) and the
frozen image-text features (semantic stream) under each predicted mask,
projects both to the text-embedding width, refines the resulting 2-token
sequence with one self-attention block per mask, and reads out the averaged
token through layer norm and L2 normalization. The plain semantic path is
mask pooling on the image-text features followed by L2 normalization only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fixtures import LdpWeights
from .numerics import bilinear_resize, layer_norm, multi_head_attention

EPS_AREA = 1e-4


@dataclass
class MaskEmbeddings:
    g_ldp: np.ndarray  # (N, D_emb), unit rows where valid, zero rows otherwise
    g_clip: np.ndarray  # (N, D_emb)
    valid: np.ndarray  # (N,) bool


def mask_pool(
    features: np.ndarray,
    mask_probs: np.ndarray,
    eps_area: float = EPS_AREA,
    hard: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean of ``features`` (D, h, w) under each soft mask.

    Masks are resized bilinearly to the feature grid. ``hard=True`` switches
    to binary weights (prob >= 0.5). A mask whose total weight falls below
    ``eps_area`` yields a zero row and valid=False.
    """
    d, h, w = features.shape
    n = mask_probs.shape[0]
    weights = bilinear_resize(mask_probs, h, w).reshape(n, -1)
    if hard:
        weights = (weights >= 0.5).astype(features.dtype)
    area = weights.sum(axis=1)
    valid = area >= eps_area
    flat = features.reshape(d, -1).T  # (h*w, d)
    pooled = np.zeros((n, d), dtype=np.result_type(features, mask_probs))
    if valid.any():
        pooled[valid] = (weights[valid] @ flat) / area[valid, None]
    return pooled, valid


def _l2_rows(x: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    norms = np.linalg.norm(x[valid], axis=1, keepdims=True)
    safe = norms.squeeze(-1) > 0
    idx = np.flatnonzero(valid)[safe]
    out[idx] = x[idx] / norms[safe]
    return out


def ldp_forward(
    sam_pooled: np.ndarray, clip_pooled: np.ndarray, weights: LdpWeights
) -> np.ndarray:
    """Fuse the two pooled streams into one embedding row per mask.

    Each mask is processed independently: project both streams to D_emb,
    run self-attention over the resulting 2-token sequence with a residual
    connection, average the refined tokens, layer-norm, L2-normalize.
    """
    n = sam_pooled.shape[0]
    d_emb = weights.sam_proj.w.shape[1]
    if clip_pooled.shape[0] != n:
        raise ValueError("stream row counts differ")
    out = np.zeros((n, d_emb), dtype=np.result_type(sam_pooled, clip_pooled))
    if n == 0:
        return out
    sam_tok = sam_pooled @ weights.sam_proj.w + weights.sam_proj.b
    clip_tok = clip_pooled @ weights.clip_proj.w + weights.clip_proj.b
    for i in range(n):
        tokens = np.stack([sam_tok[i], clip_tok[i]])  # (2, D_emb)
        refined = tokens + multi_head_attention(tokens, tokens, tokens, weights.attn)
        read = refined.mean(axis=0)
        read = layer_norm(read, weights.norm.gain, weights.norm.bias)
        norm = np.linalg.norm(read)
        out[i] = read / norm if norm > 0 else read
    return out


def clip_embed(
    f_clip: np.ndarray, mask_probs: np.ndarray, eps_area: float = EPS_AREA,
    hard: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Mask-pool the image-text features and L2-normalize valid rows."""
    pooled, valid = mask_pool(f_clip, mask_probs, eps_area=eps_area, hard=hard)
    return _l2_rows(pooled, valid), valid


def embed_masks(
    pixel_features: np.ndarray,
    f_clip: np.ndarray,
    mask_probs: np.ndarray,
    weights: LdpWeights,
    region_features: np.ndarray | None = None,
    eps_area: float = EPS_AREA,
    hard: bool = False,
) -> MaskEmbeddings:
    """Build both classification embeddings for every mask.

    The spatial stream pools ``pixel_features`` (the stride-4 map) unless
    ``region_features`` is given, in which case the decoder's per-query
    region features are used directly. ``g_clip`` always comes from pooling
    ``f_clip``. Rows for masks invalid in either stream are zeroed.
    """
    clip_pooled, clip_valid = mask_pool(f_clip, mask_probs, eps_area=eps_area, hard=hard)
    if region_features is not None:
        sam_pooled = np.array(region_features)
        sam_valid = np.ones(sam_pooled.shape[0], dtype=bool)
    else:
        sam_pooled, sam_valid = mask_pool(pixel_features, mask_probs,
                                          eps_area=eps_area, hard=hard)
    valid = sam_valid & clip_valid
    g_ldp = ldp_forward(sam_pooled, clip_pooled, weights)
    g_ldp[~valid] = 0.0
    g_clip = _l2_rows(clip_pooled, clip_valid)
    g_clip[~valid] = 0.0
    return MaskEmbeddings(g_ldp=g_ldp, g_clip=g_clip, valid=valid)
