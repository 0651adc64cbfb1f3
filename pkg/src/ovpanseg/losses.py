"""Training-loss evaluation on matched pairs, with analytic input gradients.

Three components: pixelwise BCE on mask logits, squared error between the
predicted IoU score and the soft IoU of the predicted mask against its
matched ground truth (a literal mask-MSE variant is available behind a
flag), and cross-entropy of the embedding-vs-text softmax. The total is the
gamma-weighted sum; mask/IoU terms are means over matched pairs, the class
term is a mean over all predictions with unmatched ones trained against a
dedicated void embedding row.

All gradients are with respect to prediction inputs (logits, IoU scores,
embedding rows); they are verified against central finite differences by
the test suite and the CLI gradcheck command.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import GroundTruth
from .decoder import MaskPredictions
from .ldp import MaskEmbeddings
from .matching import Assignment, hungarian, match_cost, rasterize_to_stride
from .numerics import sigmoid, softmax

GAMMA_CLASS = 2.0
GAMMA_MASK = 5.0
GAMMA_IOU = 1.0


@dataclass
class PairLoss:
    gt_index: int
    pred_index: int
    l_mask: float
    l_iou: float
    l_class: float


@dataclass
class LossReport:
    l_mask: float
    l_iou: float
    l_class: float
    l_total: float
    gamma_a: float
    gamma_b: float
    gamma_c: float
    pairs: list[PairLoss] = field(default_factory=list)


@dataclass
class TotalLossGrads:
    d_mask_logits: np.ndarray  # (N, h4, w4)
    d_p_iou: np.ndarray  # (N,)
    d_embeddings: np.ndarray  # (N, D_emb)


def mask_loss(
    y: np.ndarray, p_logits: np.ndarray, include_dice: bool = False
) -> tuple[float, np.ndarray]:
    """Mean pixelwise BCE of sigmoid(p_logits) against binary y.

    ``include_dice`` adds the dice loss of the soft mask. Returns
    (loss, gradient w.r.t. p_logits).
    """
    if y.shape != p_logits.shape:
        raise ValueError("mask shapes differ")
    y = y.astype(p_logits.dtype)
    z = p_logits
    n = z.size
    loss = float((np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean())
    s = sigmoid(z)
    grad = (s - y) / n
    if include_dice:
        inter = float((y * s).sum())
        denom = float(y.sum() + s.sum())
        if denom > 0.0:
            loss += 1.0 - 2.0 * inter / denom
            grad = grad - 2.0 * (y * denom - inter) / denom**2 * s * (1.0 - s)
    return loss, grad


def soft_iou(y: np.ndarray, probs: np.ndarray) -> float:
    """Soft IoU: sum(min) / sum(max); defined as 1 when both masks are empty."""
    inter = float(np.minimum(probs, y).sum())
    union = float(np.maximum(probs, y).sum())
    if union < 1e-12:
        return 1.0
    return inter / union


def iou_loss(
    y: np.ndarray,
    p_logits: np.ndarray,
    predicted_iou: float,
    literal: bool = False,
) -> tuple[float, float, np.ndarray]:
    """Squared error between the predicted IoU and the actual soft IoU.

    ``literal=True`` evaluates the mean squared error between the binary
    target and the soft mask instead (then the predicted score is unused).
    Returns (loss, grad w.r.t. predicted_iou, grad w.r.t. p_logits).
    """
    if y.shape != p_logits.shape:
        raise ValueError("mask shapes differ")
    y = y.astype(p_logits.dtype)
    s = sigmoid(p_logits)
    if literal:
        diff = s - y
        loss = float((diff * diff).mean())
        grad_logits = 2.0 * diff * s * (1.0 - s) / y.size
        return loss, 0.0, grad_logits
    inter = float(np.minimum(s, y).sum())
    union = float(np.maximum(s, y).sum())
    if union < 1e-12:
        actual = 1.0
        d_actual = np.zeros_like(s)
    else:
        actual = inter / union
        # with binary y: d inter/d s = [y==1], d union/d s = [y==0]
        d_actual = (y * union - inter * (1.0 - y)) / union**2
    err = float(predicted_iou) - actual
    loss = err * err
    grad_pred = 2.0 * err
    grad_logits = -2.0 * err * d_actual * s * (1.0 - s)
    return loss, grad_pred, grad_logits


def class_loss(
    y_class: int, emb_row: np.ndarray, text_rows: np.ndarray, tau: float
) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(emb_row . text_rows / tau) at ``y_class``.

    ``text_rows`` may include the void row as its last entry; ``y_class``
    indexes whatever is passed. Returns (loss, grad w.r.t. emb_row).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    c = text_rows.shape[0]
    if not (0 <= y_class < c):
        raise ValueError(f"class index {y_class} out of range [0, {c})")
    logits = emb_row @ text_rows.T / tau
    p = softmax(logits, axis=-1)
    loss = -float(np.log(max(p[y_class], 1e-300)))
    onehot = np.zeros(c, dtype=p.dtype)
    onehot[y_class] = 1.0
    grad = (p - onehot) @ text_rows / tau
    return loss, grad


def text_rows_with_void(g_text: np.ndarray, void_embed: np.ndarray) -> np.ndarray:
    return np.vstack([g_text, void_embed[None, :]])


def total_loss(
    gt: GroundTruth,
    pred: MaskPredictions,
    embeddings: MaskEmbeddings,
    g_text: np.ndarray,
    void_embed: np.ndarray,
    tau: float,
    gamma_a: float = GAMMA_CLASS,
    gamma_b: float = GAMMA_MASK,
    gamma_c: float = GAMMA_IOU,
    assignment: Assignment | None = None,
    literal_iou: bool = False,
    include_dice: bool = False,
    return_grads: bool = False,
):
    """Gamma-weighted total loss over Hungarian-matched pairs.

    If ``assignment`` is omitted it is computed here from the matching cost.
    With ``return_grads`` the analytic gradients w.r.t. mask logits, IoU
    scores and embedding rows are returned alongside the report (the
    assignment is held fixed inside the gradient).
    """
    text_full = text_rows_with_void(g_text, void_embed)
    void_idx = g_text.shape[0]
    n_pred = pred.n_queries
    stride = gt.y_mask.shape[1] // pred.p_mask_logits.shape[-2] if gt.n_masks else 4

    if assignment is None:
        class_probs = softmax(embeddings.g_ldp @ text_full.T / tau, axis=-1)
        cost = match_cost(gt, pred, class_probs)
        assignment = hungarian(cost)

    grads = TotalLossGrads(
        d_mask_logits=np.zeros_like(pred.p_mask_logits),
        d_p_iou=np.zeros_like(pred.p_iou),
        d_embeddings=np.zeros_like(embeddings.g_ldp),
    )

    pair_rows: list[PairLoss] = []
    matched_pred = {}
    for i, j in assignment.pairs:
        matched_pred[j] = i
    n_pairs = len(assignment.pairs)

    l_mask_sum = 0.0
    l_iou_sum = 0.0
    for i, j in assignment.pairs:
        y4 = rasterize_to_stride(gt.y_mask[i], stride)
        lm, g_lm = mask_loss(y4, pred.p_mask_logits[j], include_dice=include_dice)
        li, g_ip, g_il = iou_loss(y4, pred.p_mask_logits[j], float(pred.p_iou[j]),
                                  literal=literal_iou)
        l_mask_sum += lm
        l_iou_sum += li
        grads.d_mask_logits[j] += (gamma_b * g_lm + gamma_c * g_il) / n_pairs
        grads.d_p_iou[j] += gamma_c * g_ip / n_pairs
        lc, _ = class_loss(int(gt.y_class[i]), embeddings.g_ldp[j], text_full, tau)
        pair_rows.append(PairLoss(gt_index=i, pred_index=j, l_mask=lm, l_iou=li, l_class=lc))

    l_class_sum = 0.0
    for j in range(n_pred):
        target = int(gt.y_class[matched_pred[j]]) if j in matched_pred else void_idx
        lc, g_c = class_loss(target, embeddings.g_ldp[j], text_full, tau)
        l_class_sum += lc
        grads.d_embeddings[j] += gamma_a * g_c / n_pred

    l_mask = l_mask_sum / n_pairs if n_pairs else 0.0
    l_iou = l_iou_sum / n_pairs if n_pairs else 0.0
    l_class = l_class_sum / n_pred if n_pred else 0.0
    l_total = gamma_a * l_class + gamma_b * l_mask + gamma_c * l_iou
    report = LossReport(l_mask=l_mask, l_iou=l_iou, l_class=l_class, l_total=l_total,
                        gamma_a=gamma_a, gamma_b=gamma_b, gamma_c=gamma_c,
                        pairs=pair_rows)
    if return_grads:
        return report, grads, assignment
    return report


# ---------------------------------------------------------------------------
# finite-difference verification (used by the CLI gradcheck command)
# ---------------------------------------------------------------------------

def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x (x is flattened)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = f(x)
        flat[k] = orig - step
        lo = f(x)
        flat[k] = orig
        g[k] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    f = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.abs(a).max(initial=0.0), np.abs(f).max(initial=0.0), 1e-12)
    return float(np.abs(a - f).max(initial=0.0) / denom)


def _random_case(rng: np.random.Generator, h: int = 8, w: int = 8):
    y = (rng.random((h, w)) < 0.5).astype(np.float64)
    logits = 1.5 * rng.standard_normal((h, w))
    return y, logits


def gradcheck_report(seeds: int = 20, step: float = 1e-5) -> dict[str, float]:
    """Max relative error of every analytic gradient vs central differences.

    Everything runs in float64. Keys cover the mask loss, both IoU-loss
    interpretations, the classification loss and the total loss.
    """
    errs: dict[str, list[float]] = {
        "mask": [], "iou": [], "iou_literal": [], "class": [], "total": [],
    }
    for s in range(seeds):
        rng = np.random.default_rng(1000 + s)
        y, logits = _random_case(rng)

        _, g = mask_loss(y, logits)
        fd = central_difference(lambda z: mask_loss(y, z)[0], logits.copy(), step)
        errs["mask"].append(relative_error(g, fd))

        pred_iou = float(rng.uniform(0.1, 0.9))
        _, gp, gl = iou_loss(y, logits, pred_iou)
        fd_l = central_difference(lambda z: iou_loss(y, z, pred_iou)[0], logits.copy(), step)
        fd_p = central_difference(
            lambda v: iou_loss(y, logits, float(v[0]))[0], np.array([pred_iou]), step)
        errs["iou"].append(max(relative_error(gl, fd_l),
                               relative_error(np.array([gp]), fd_p)))

        _, gp2, gl2 = iou_loss(y, logits, pred_iou, literal=True)
        fd_l2 = central_difference(
            lambda z: iou_loss(y, z, pred_iou, literal=True)[0], logits.copy(), step)
        errs["iou_literal"].append(max(relative_error(gl2, fd_l2), abs(gp2)))

        c, d_emb = 5, 8
        text = rng.standard_normal((c, d_emb))
        text /= np.linalg.norm(text, axis=1, keepdims=True)
        row = rng.standard_normal(d_emb)
        row /= np.linalg.norm(row)
        tau = float(rng.uniform(0.05, 0.5))
        target = int(rng.integers(c))
        _, gc = class_loss(target, row, text, tau)
        fd_c = central_difference(lambda v: class_loss(target, v, text, tau)[0],
                                  row.copy(), step)
        errs["class"].append(relative_error(gc, fd_c))

        errs["total"].append(_total_loss_fd_error(rng, step))
    return {name: max(vals) for name, vals in errs.items()}


def _total_loss_fd_error(rng: np.random.Generator, step: float) -> float:
    from .ldp import MaskEmbeddings as _ME  # local import keeps module load light

    n_gt, n_pred, d_emb, c = 2, 3, 8, 4
    h = w = 16
    masks = np.zeros((n_gt, h, w), dtype=bool)
    masks[0, : h // 2] = True
    masks[1, h // 2 :] = True
    gt = GroundTruth(y_mask=masks,
                     y_class=rng.integers(0, c, size=n_gt).astype(np.int64),
                     is_thing=np.ones(n_gt, dtype=bool))
    logits = 1.5 * rng.standard_normal((n_pred, h // 4, w // 4))
    p_iou = rng.uniform(0.1, 0.9, size=n_pred)
    emb = rng.standard_normal((n_pred, d_emb))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    text = rng.standard_normal((c, d_emb))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    void = rng.standard_normal(d_emb)
    void /= np.linalg.norm(void)
    tau = 0.2

    def build(lg, pi, em):
        pred = MaskPredictions(f_masked=np.zeros((n_pred, 4)), p_mask_logits=lg, p_iou=pi)
        return pred, _ME(g_ldp=em, g_clip=em, valid=np.ones(n_pred, dtype=bool))

    pred0, emb0 = build(logits, p_iou, emb)
    report, grads, assign = total_loss(gt, pred0, emb0, text, void, tau, return_grads=True)

    def f(params: np.ndarray) -> float:
        lg = params[: logits.size].reshape(logits.shape)
        pi = params[logits.size : logits.size + n_pred]
        em = params[logits.size + n_pred :].reshape(emb.shape)
        pred_k, emb_k = build(lg, pi, em)
        return total_loss(gt, pred_k, emb_k, text, void, tau,
                          assignment=assign).l_total

    params = np.concatenate([logits.ravel(), p_iou, emb.ravel()])
    fd = central_difference(f, params, step)
    analytic = np.concatenate([
        grads.d_mask_logits.ravel(), grads.d_p_iou, grads.d_embeddings.ravel()
    ])
    return relative_error(analytic, fd)
