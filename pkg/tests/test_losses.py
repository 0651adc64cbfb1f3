import numpy as np
import pytest

from ovpanseg.dataio import GroundTruth
from ovpanseg.decoder import MaskPredictions
from ovpanseg.ldp import MaskEmbeddings
from ovpanseg.losses import (class_loss, gradcheck_report, iou_loss, mask_loss,
                             soft_iou, total_loss)
from ovpanseg.numerics import sigmoid

from oracles import fd_gradient, max_rel_err


class TestMaskLoss:
    def test_all_ones_zero_logits_is_ln2(self):
        y = np.ones((4, 4))
        loss, _ = mask_loss(y, np.zeros((4, 4)))
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    def test_confident_correct_logits_vanish(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((6, 6))
        logits = np.sign(z) * (25.0 + 10.0 * np.abs(z))  # bounded away from 0
        y = (sigmoid(logits) > 0.5).astype(np.float64)
        loss, _ = mask_loss(y, logits)
        assert loss < 1e-8

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        y = (rng.random((8, 8)) < 0.5).astype(np.float64)
        logits = 1.5 * rng.standard_normal((8, 8))
        _, grad = mask_loss(y, logits)
        fd = fd_gradient(lambda z: mask_loss(y, z)[0], logits)
        assert max_rel_err(grad, fd) < 1e-5

    def test_dice_variant_gradient(self):
        rng = np.random.default_rng(77)
        y = (rng.random((8, 8)) < 0.5).astype(np.float64)
        logits = rng.standard_normal((8, 8))
        _, grad = mask_loss(y, logits, include_dice=True)
        fd = fd_gradient(lambda z: mask_loss(y, z, include_dice=True)[0], logits)
        assert max_rel_err(grad, fd) < 1e-5

    def test_bce_symmetry(self):
        rng = np.random.default_rng(1)
        y = (rng.random((5, 5)) < 0.5).astype(np.float64)
        logits = rng.standard_normal((5, 5))
        a, _ = mask_loss(y, logits)
        b, _ = mask_loss(1.0 - y, -logits)
        assert a == pytest.approx(b, rel=1e-12)


class TestIouLoss:
    def test_perfect_mask_wrong_score(self):
        y = np.zeros((4, 4))
        y[:2] = 1.0
        logits = np.where(y > 0, 300.0, -300.0)
        loss, _, _ = iou_loss(y, logits, 0.5)
        assert loss == pytest.approx(0.25, abs=1e-9)

    def test_matching_score_zero_loss(self):
        rng = np.random.default_rng(2)
        y = (rng.random((6, 6)) < 0.5).astype(np.float64)
        logits = rng.standard_normal((6, 6))
        actual = soft_iou(y, sigmoid(logits))
        loss, _, _ = iou_loss(y, logits, actual)
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_both_empty_iou_is_one(self):
        y = np.zeros((4, 4))
        logits = np.full((4, 4), -900.0)  # sigmoid underflows to exactly 0
        loss, _, _ = iou_loss(y, logits, 1.0)
        assert loss == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_match_fd(self, seed):
        rng = np.random.default_rng(200 + seed)
        y = (rng.random((8, 8)) < 0.5).astype(np.float64)
        logits = 1.5 * rng.standard_normal((8, 8))
        pred = float(rng.uniform(0.1, 0.9))
        _, gp, gl = iou_loss(y, logits, pred)
        actual = soft_iou(y, sigmoid(logits))
        assert gp == pytest.approx(2 * (pred - actual), rel=1e-12)
        fd_p = fd_gradient(lambda v: iou_loss(y, logits, float(v[0]))[0],
                           np.array([pred]))
        assert max_rel_err(np.array([gp]), fd_p) < 1e-6
        fd_l = fd_gradient(lambda z: iou_loss(y, z, pred)[0], logits)
        assert max_rel_err(gl, fd_l) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_literal_variant_gradients_match_fd(self, seed):
        rng = np.random.default_rng(300 + seed)
        y = (rng.random((8, 8)) < 0.5).astype(np.float64)
        logits = 1.5 * rng.standard_normal((8, 8))
        _, gp, gl = iou_loss(y, logits, 0.4, literal=True)
        assert gp == 0.0
        fd_l = fd_gradient(lambda z: iou_loss(y, z, 0.4, literal=True)[0], logits)
        assert max_rel_err(gl, fd_l) < 1e-5


class TestClassLoss:
    def test_uniform_logits_give_ln2(self):
        text = np.array([[1.0, 0.0], [1.0, 0.0]])  # identical rows -> equal logits
        row = np.array([0.3, 0.9])
        loss, _ = class_loss(0, row, text, tau=1.0)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    def test_aligned_embedding_small_tau_vanishes(self):
        d = 8
        text = np.eye(3, d)
        row = text[1]
        loss, _ = class_loss(1, row, text, tau=0.01)
        assert loss < 1e-8

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_fd(self, seed):
        rng = np.random.default_rng(400 + seed)
        c, d = 5, 8
        text = rng.standard_normal((c, d))
        text /= np.linalg.norm(text, axis=1, keepdims=True)
        row = rng.standard_normal(d)
        row /= np.linalg.norm(row)
        tau = float(rng.uniform(0.05, 0.5))
        target = int(rng.integers(c))
        _, grad = class_loss(target, row, text, tau)
        fd = fd_gradient(lambda v: class_loss(target, v, text, tau)[0], row)
        assert max_rel_err(grad, fd) < 1e-5

    def test_out_of_range_class(self):
        with pytest.raises(ValueError):
            class_loss(3, np.zeros(4), np.zeros((3, 4)), 0.1)


def make_total_case(seed=0, n_gt=2, n_pred=4, c=4, d_emb=8, h=16, w=16,
                    perfect=False, tau=0.2):
    rng = np.random.default_rng(seed)
    masks = np.zeros((n_gt, h, w), dtype=bool)
    split = (h // n_gt // 4) * 4
    for i in range(n_gt):
        lo = i * split
        hi = (i + 1) * split if i < n_gt - 1 else h
        masks[i, lo:hi] = True
    y_class = rng.choice(c, size=n_gt, replace=False).astype(np.int64)
    gt = GroundTruth(y_mask=masks, y_class=y_class, is_thing=np.ones(n_gt, dtype=bool))
    text = rng.standard_normal((c, d_emb))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    void = rng.standard_normal(d_emb)
    void /= np.linalg.norm(void)
    if perfect:
        logits = np.zeros((n_pred, h // 4, w // 4))
        emb = np.tile(void, (n_pred, 1))
        p_iou = np.zeros(n_pred)
        from ovpanseg.matching import rasterize_to_stride
        for i in range(n_gt):
            y4 = rasterize_to_stride(gt.y_mask[i], 4)
            logits[i] = np.where(y4, 60.0, -60.0)
            emb[i] = text[y_class[i]]
            p_iou[i] = soft_iou(y4.astype(np.float64), sigmoid(logits[i]))
    else:
        logits = 1.5 * rng.standard_normal((n_pred, h // 4, w // 4))
        emb = rng.standard_normal((n_pred, d_emb))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        p_iou = rng.uniform(0.1, 0.9, size=n_pred)
    pred = MaskPredictions(f_masked=np.zeros((n_pred, 4)),
                           p_mask_logits=logits, p_iou=p_iou)
    embeddings = MaskEmbeddings(g_ldp=emb, g_clip=emb.copy(),
                                valid=np.ones(n_pred, dtype=bool))
    return gt, pred, embeddings, text, void, tau


class TestTotalLoss:
    def test_perfect_predictions_approach_zero(self):
        gt, pred, emb, text, void, _ = make_total_case(0, perfect=True, tau=0.2)
        report = total_loss(gt, pred, emb, text, void, tau=0.005)
        assert report.l_mask < 1e-8
        assert report.l_iou < 1e-8
        # matched queries classify perfectly; unmatched ones hit the void row
        for row in report.pairs:
            assert row.l_class < 1e-6

    def test_gamma_weighted_arithmetic(self):
        gt, pred, emb, text, void, tau = make_total_case(1)
        report = total_loss(gt, pred, emb, text, void, tau)
        assert report.l_total == pytest.approx(
            2.0 * report.l_class + 5.0 * report.l_mask + 1.0 * report.l_iou, rel=1e-12)
        # unit per-component losses give gamma sum = 8 by the same formula
        assert 2.0 * 1 + 5.0 * 1 + 1.0 * 1 == 8.0

    def test_seeded_recomposition_from_components(self):
        gt, pred, emb, text, void, tau = make_total_case(2)
        report, grads, assign = total_loss(gt, pred, emb, text, void, tau,
                                           return_grads=True)
        from ovpanseg.losses import text_rows_with_void
        from ovpanseg.matching import rasterize_to_stride
        text_full = text_rows_with_void(text, void)
        lm = li = 0.0
        for i, j in assign.pairs:
            y4 = rasterize_to_stride(gt.y_mask[i], 4)
            lm += mask_loss(y4, pred.p_mask_logits[j])[0]
            li += iou_loss(y4, pred.p_mask_logits[j], float(pred.p_iou[j]))[0]
        lm /= len(assign.pairs)
        li /= len(assign.pairs)
        matched = dict((j, i) for i, j in assign.pairs)
        lc = 0.0
        for j in range(pred.n_queries):
            target = int(gt.y_class[matched[j]]) if j in matched else text.shape[0]
            lc += class_loss(target, emb.g_ldp[j], text_full, tau)[0]
        lc /= pred.n_queries
        assert report.l_mask == pytest.approx(lm, rel=1e-12)
        assert report.l_iou == pytest.approx(li, rel=1e-12)
        assert report.l_class == pytest.approx(lc, rel=1e-12)

    def test_permutation_invariance_over_predictions(self):
        gt, pred, emb, text, void, tau = make_total_case(3)
        base = total_loss(gt, pred, emb, text, void, tau)
        perm = np.array([2, 0, 3, 1])
        pred_p = MaskPredictions(f_masked=pred.f_masked[perm],
                                 p_mask_logits=pred.p_mask_logits[perm],
                                 p_iou=pred.p_iou[perm])
        emb_p = MaskEmbeddings(g_ldp=emb.g_ldp[perm], g_clip=emb.g_clip[perm],
                               valid=emb.valid[perm])
        permuted = total_loss(gt, pred_p, emb_p, text, void, tau)
        assert permuted.l_total == pytest.approx(base.l_total, rel=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_total_gradients_match_fd(self, seed):
        gt, pred, emb, text, void, tau = make_total_case(50 + seed)
        report, grads, assign = total_loss(gt, pred, emb, text, void, tau,
                                           return_grads=True)
        n_pred = pred.n_queries

        def f(params):
            k = pred.p_mask_logits.size
            lg = params[:k].reshape(pred.p_mask_logits.shape)
            pi = params[k:k + n_pred]
            em = params[k + n_pred:].reshape(emb.g_ldp.shape)
            p2 = MaskPredictions(f_masked=pred.f_masked, p_mask_logits=lg, p_iou=pi)
            e2 = MaskEmbeddings(g_ldp=em, g_clip=em, valid=emb.valid)
            return total_loss(gt, p2, e2, text, void, tau, assignment=assign).l_total

        params = np.concatenate([pred.p_mask_logits.ravel(), pred.p_iou,
                                 emb.g_ldp.ravel()])
        fd = fd_gradient(f, params)
        analytic = np.concatenate([grads.d_mask_logits.ravel(), grads.d_p_iou,
                                   grads.d_embeddings.ravel()])
        assert max_rel_err(analytic, fd) < 1e-4

    def test_all_components_non_negative(self):
        gt, pred, emb, text, void, tau = make_total_case(4)
        report = total_loss(gt, pred, emb, text, void, tau)
        assert report.l_mask >= 0 and report.l_iou >= 0 and report.l_class >= 0


def test_gradcheck_report_is_green():
    errors = gradcheck_report(seeds=5)
    assert set(errors) == {"mask", "iou", "iou_literal", "class", "total"}
    assert max(errors.values()) < 1e-4
