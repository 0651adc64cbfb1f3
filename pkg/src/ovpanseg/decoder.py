"""Query-based mask decoder.

N learned queries are refined through repeated rounds of masked
cross-attention onto one pyramid scale (cycling strides 32 -> 16 -> 8),
self-attention among queries, and an FFN, each followed by residual + layer
norm. The attention mask for a layer is the previous round's predicted mask
resized to the scale and thresholded at 0.5 (the initial queries provide
layer 0's mask). Mask logits are the dot product between an MLP of each
query and the stride-4 per-pixel embedding; an IoU head estimates each
mask's quality from the final region features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fixtures import DecoderWeights, MlpWeights
from .numerics import bilinear_resize, layer_norm, multi_head_attention, sigmoid
from .pyramid import MultiScaleFeatures

SCALE_CYCLE = (32, 16, 8)


@dataclass
class MaskPredictions:
    f_masked: np.ndarray  # (N, D_pix) region features
    p_mask_logits: np.ndarray  # (N, H/4, W/4)
    p_iou: np.ndarray  # (N,) in [0, 1]

    @property
    def n_queries(self) -> int:
        return int(self.f_masked.shape[0])


def mask_probabilities(preds: MaskPredictions) -> np.ndarray:
    """Elementwise sigmoid of the mask logits."""
    return sigmoid(preds.p_mask_logits)


def _mlp(x: np.ndarray, w: MlpWeights) -> np.ndarray:
    h = np.maximum(x @ w.w1 + w.b1, 0.0)
    return h @ w.w2 + w.b2


def sinusoidal_pos_2d(h: int, w: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2D sine/cosine positional embedding, shape (d, h, w)."""
    if d % 4:
        raise ValueError("positional embedding needs d divisible by 4")
    quarter = d // 4
    freq = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys = np.arange(h)[:, None] * freq[None, :]  # (h, quarter)
    xs = np.arange(w)[:, None] * freq[None, :]
    pos = np.zeros((d, h, w), dtype=dtype)
    pos[0 * quarter:1 * quarter] = np.sin(ys).T[:, :, None]
    pos[1 * quarter:2 * quarter] = np.cos(ys).T[:, :, None]
    pos[2 * quarter:3 * quarter] = np.sin(xs).T[:, None, :]
    pos[3 * quarter:4 * quarter] = np.cos(xs).T[:, None, :]
    return pos


def _mask_logits(queries: np.ndarray, mask_mlp: MlpWeights, pix4: np.ndarray) -> np.ndarray:
    d, h4, w4 = pix4.shape
    emb = _mlp(queries, mask_mlp)  # (N, d)
    return (emb @ pix4.reshape(d, -1)).reshape(-1, h4, w4)


def decoder_forward(
    f_ms: MultiScaleFeatures,
    weights: DecoderWeights,
    layers: int | None = None,
    use_pos_encoding: bool = False,
) -> MaskPredictions:
    """Run the full decoder; returns region features, mask logits, IoU scores."""
    if layers is None:
        layers = len(weights.layers)
    if layers < 1:
        raise ValueError("layer count must be positive")
    if layers > len(weights.layers):
        raise ValueError(f"requested {layers} layers but weights hold {len(weights.layers)}")

    pix4 = f_ms.s4
    queries = np.array(weights.query_embed)
    n = queries.shape[0]
    logits = _mask_logits(queries, weights.mask_mlp, pix4)

    for li in range(layers):
        lw = weights.layers[li]
        feat = f_ms.by_stride(SCALE_CYCLE[li % len(SCALE_CYCLE)])
        d, hs, ws = feat.shape
        if use_pos_encoding:
            feat = feat + sinusoidal_pos_2d(hs, ws, d, dtype=feat.dtype)
        keys = feat.reshape(d, -1).T  # (hs*ws, d)

        probs = sigmoid(logits)
        attn_mask = bilinear_resize(probs, hs, ws) >= 0.5
        attn_mask = attn_mask.reshape(n, -1)

        x = multi_head_attention(queries, keys, keys, lw.cross_attn, attn_mask)
        queries = layer_norm(queries + x, lw.norm1.gain, lw.norm1.bias)
        x = multi_head_attention(queries, queries, queries, lw.self_attn)
        queries = layer_norm(queries + x, lw.norm2.gain, lw.norm2.bias)
        x = np.maximum(queries @ lw.ffn.w1 + lw.ffn.b1, 0.0) @ lw.ffn.w2 + lw.ffn.b2
        queries = layer_norm(queries + x, lw.norm3.gain, lw.norm3.bias)

        logits = _mask_logits(queries, weights.mask_mlp, pix4)

    p_iou = sigmoid(_mlp(queries, weights.iou_mlp))[:, 0]
    return MaskPredictions(f_masked=queries, p_mask_logits=logits, p_iou=p_iou)
