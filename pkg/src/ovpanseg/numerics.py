"""Minimal dense-array kernels (forward passes only).

All operations are pure functions over numpy arrays. Arrays are float32 by
convention; passing float64 inputs runs the whole op in float64, which is
what the gradient-check path uses. The only place non-finite values are
legal is the additive -inf attention mask fed to softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(np.asarray(2.0, dtype=x.dtype))))


def softmax(x: np.ndarray, axis: int = -1, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax along ``axis``.

    -inf entries are allowed (they get exactly zero weight); any other
    non-finite input, or a slice that is entirely -inf, is an error.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x = np.asarray(x)
    if np.isnan(x).any() or np.isposinf(x).any():
        raise ValueError("softmax input must be finite or -inf")
    z = x / np.asarray(temperature, dtype=x.dtype)
    m = np.max(z, axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise ValueError("softmax slice is entirely -inf")
    e = np.exp(z - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x = np.asarray(x)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"gain/bias must have shape ({d},)")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    z = (x - mean) / np.sqrt(var + eps)
    return z * gain + bias


@dataclass
class AttnWeights:
    """Projection weights for one multi-head attention block.

    Linear maps are applied as ``x @ w + b``; all of wq/wk/wv/wo are
    (d_model, d_model).
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray
    n_heads: int


def multi_head_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    weights: AttnWeights,
    attn_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Scaled dot-product attention with ``n_heads`` heads.

    q: (Lq, D), k/v: (Lk, D). ``attn_mask`` is boolean (Lq, Lk); True means
    the key may be attended to. Masked-out keys get exactly zero weight.
    A query row whose mask blocks every key falls back to unmasked
    attention over that row.
    """
    d = q.shape[-1]
    h = weights.n_heads
    if d % h != 0:
        raise ValueError(f"embedding dim {d} not divisible by {h} heads")
    dh = d // h
    lq, lk = q.shape[0], k.shape[0]

    qp = q @ weights.wq + weights.bq
    kp = k @ weights.wk + weights.bk
    vp = v @ weights.wv + weights.bv

    # (h, L, dh)
    qh = qp.reshape(lq, h, dh).transpose(1, 0, 2)
    kh = kp.reshape(lk, h, dh).transpose(1, 0, 2)
    vh = vp.reshape(lk, h, dh).transpose(1, 0, 2)

    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(np.asarray(dh, dtype=q.dtype))
    if attn_mask is not None:
        if attn_mask.shape != (lq, lk):
            raise ValueError(f"attn_mask must have shape ({lq}, {lk})")
        mask = attn_mask.copy()
        dead = ~mask.any(axis=1)
        mask[dead] = True  # empty-mask rows fall back to full attention
        scores = np.where(mask[None, :, :], scores, -np.inf)
    attn = softmax(scores, axis=-1)
    out = (attn @ vh).transpose(1, 0, 2).reshape(lq, d)
    return out @ weights.wo + weights.bo


def conv2d_forward(
    x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """Cross-correlation of x (C_in, H, W) with kernel (C_out, C_in, kh, kw)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise ValueError(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    _, h, w = x.shape
    if h < kh or w < kw:
        raise ValueError("kernel larger than padded input")
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (C_in, H', W', kh, kw)
    return np.tensordot(kernel, windows, axes=([1, 2, 3], [0, 3, 4]))


def deconv2d_forward(x: np.ndarray, kernel: np.ndarray, stride: int = 1) -> np.ndarray:
    """Transposed cross-correlation; output spatial dims are (in-1)*stride + k."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise ValueError(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    _, h, w = x.shape
    oh = (h - 1) * stride + kh
    ow = (w - 1) * stride + kw
    out = np.zeros((c_out, oh, ow), dtype=np.result_type(x, kernel))
    contrib = np.tensordot(kernel, x, axes=([1], [0]))  # (C_out, kh, kw, H, W)
    for di in range(kh):
        for dj in range(kw):
            out[:, di : di + (h - 1) * stride + 1 : stride,
                dj : dj + (w - 1) * stride + 1 : stride] += contrib[:, di, dj]
    return out


def bilinear_resize(
    x: np.ndarray, out_h: int, out_w: int, align_corners: bool = False
) -> np.ndarray:
    """Bilinear resample of the trailing two axes of ``x``."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    h, w = x.shape[-2], x.shape[-1]

    def src_coords(n_out: int, n_in: int) -> np.ndarray:
        idx = np.arange(n_out, dtype=np.float64)
        if align_corners:
            if n_out == 1:
                return np.zeros(1)
            return idx * (n_in - 1) / (n_out - 1)
        return (idx + 0.5) * (n_in / n_out) - 0.5

    ys = src_coords(out_h, h)
    xs = src_coords(out_w, w)
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    x0 = np.clip(x0f.astype(np.int64), 0, w - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w - 1)
    ty = (ys - y0f).astype(x.dtype)
    tx = (xs - x0f).astype(x.dtype)

    top = x[..., y0, :][..., :, x0] * (1 - tx) + x[..., y0, :][..., :, x1] * tx
    bot = x[..., y1, :][..., :, x0] * (1 - tx) + x[..., y1, :][..., :, x1] * tx
    return top * (1 - ty)[:, None] + bot * ty[:, None]


def nearest_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resample (half-pixel centers) of the trailing two axes."""
    h, w = x.shape[-2], x.shape[-1]
    ys = np.clip(((np.arange(out_h) + 0.5) * (h / out_h) - 0.5).round().astype(np.int64), 0, h - 1)
    xs = np.clip(((np.arange(out_w) + 0.5) * (w / out_w) - 0.5).round().astype(np.int64), 0, w - 1)
    return x[..., ys, :][..., :, xs]


def kmeans(
    points: np.ndarray, k: int, seed: int = 0, max_iters: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations with seeded k-means++ initialization.

    An empty cluster is re-seeded at the point farthest from its assigned
    centroid, which keeps the run deterministic. Returns (assignments,
    centroids).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds number of points {n}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))

    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        dist = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(dist, axis=1)
        for j in range(k):
            sel = new_assign == j
            if sel.any():
                centroids[j] = points[sel].mean(axis=0)
            else:
                # deterministic re-seed: farthest point from its own centroid
                far = int(np.argmax(dist[np.arange(n), new_assign]))
                centroids[j] = points[far]
                new_assign[far] = j
        if np.array_equal(new_assign, assignments):
            assignments = new_assign
            break
        assignments = new_assign
    return assignments, centroids


def kmeans_inertia(points: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> float:
    diff = np.asarray(points, dtype=np.float64) - centroids[assignments]
    return float(np.sum(diff * diff))
