import numpy as np
import pytest

from ovpanseg.dataio import GroundTruth
from ovpanseg.decoder import MaskPredictions
from ovpanseg.matching import hungarian, match_cost, rasterize_to_stride
from ovpanseg.numerics import sigmoid

from oracles import brute_force_assignment, sigmoid_scalar


class TestHungarian:
    def test_diagonal_optimum(self):
        out = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert out.pairs == [(0, 0), (1, 1)]
        assert out.total_cost == 2.0

    def test_single_entry(self):
        out = hungarian(np.array([[5.0]]))
        assert out.pairs == [(0, 0)]
        assert out.total_cost == 5.0

    def test_seeded_6x6_matches_brute_force(self):
        rng = np.random.default_rng(6)
        cost = rng.standard_normal((6, 6))
        out = hungarian(cost)
        pairs, total = brute_force_assignment(cost)
        assert out.pairs == pairs
        assert out.total_cost == total

    @pytest.mark.parametrize("seed", range(25))
    def test_random_rectangular_vs_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        r = int(rng.integers(1, 8))
        c = int(rng.integers(1, 8))
        cost = rng.standard_normal((r, c)) * 3
        out = hungarian(cost)
        pairs, total = brute_force_assignment(cost)
        assert out.pairs == pairs
        assert out.total_cost == total

    @pytest.mark.parametrize("seed", range(8))
    def test_integer_ties_match_brute_force(self, seed):
        rng = np.random.default_rng(100 + seed)
        r = int(rng.integers(2, 6))
        c = int(rng.integers(2, 6))
        cost = rng.integers(0, 3, size=(r, c)).astype(np.float64)
        out = hungarian(cost)
        pairs, total = brute_force_assignment(cost)
        assert out.pairs == pairs
        assert out.total_cost == total

    def test_all_equal_costs_lexicographic(self):
        out = hungarian(np.zeros((3, 5)))
        assert out.pairs == [(0, 0), (1, 1), (2, 2)]
        out = hungarian(np.zeros((5, 3)))
        assert out.pairs == [(0, 0), (1, 1), (2, 2)]

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        cost = rng.standard_normal((5, 5))
        base = hungarian(cost).pairs
        assert hungarian(cost + 11.5).pairs == base
        assert hungarian(cost - 3.25).pairs == base

    def test_transpose(self):
        rng = np.random.default_rng(8)
        cost = rng.standard_normal((4, 6))
        base = hungarian(cost).pairs
        transposed = hungarian(cost.T).pairs
        assert sorted((j, i) for i, j in transposed) == base

    def test_every_gt_matched_when_preds_exceed_gts(self):
        rng = np.random.default_rng(9)
        cost = rng.standard_normal((3, 10))
        out = hungarian(cost)
        assert sorted(i for i, _ in out.pairs) == [0, 1, 2]

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            hungarian(np.array([[1.0, np.inf]]))
        with pytest.raises(ValueError):
            hungarian(np.array([[np.nan]]))


class TestRasterize:
    def test_block_aligned_mask_is_exact(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[:8] = True
        down = rasterize_to_stride(mask, 4)
        assert down.shape == (4, 4)
        assert down[:2].all() and not down[2:].any()

    def test_majority_rule(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, :2] = True  # 2/16 of the block
        assert not rasterize_to_stride(mask, 4)[0, 0]
        mask[:2, :] = True  # 8/16 -> >= 0.5
        assert rasterize_to_stride(mask, 4)[0, 0]


def build_case(seed=0, n_gt=3, n_pred=5, c=4, h=16, w=16):
    rng = np.random.default_rng(seed)
    bounds = np.sort(rng.choice(np.arange(1, h // 4), size=n_gt - 1, replace=False)) * 4
    edges = [0, *bounds.tolist(), h]
    masks = np.zeros((n_gt, h, w), dtype=bool)
    for i in range(n_gt):
        masks[i, edges[i]:edges[i + 1]] = True
    gt = GroundTruth(y_mask=masks,
                     y_class=rng.integers(0, c, size=n_gt).astype(np.int64),
                     is_thing=np.ones(n_gt, dtype=bool))
    logits = rng.standard_normal((n_pred, h // 4, w // 4)) * 2
    pred = MaskPredictions(f_masked=np.zeros((n_pred, 4)),
                           p_mask_logits=logits,
                           p_iou=rng.uniform(0, 1, size=n_pred))
    probs = rng.dirichlet(np.ones(c), size=n_pred)
    return gt, pred, probs


class TestMatchCost:
    def test_perfect_prediction_dominates_its_row(self):
        gt, pred, probs = build_case(1, n_gt=2, n_pred=3)
        # make prediction 1 exactly reproduce gt 0 with confident class
        y4 = rasterize_to_stride(gt.y_mask[0], 4)
        pred.p_mask_logits[1] = np.where(y4, 30.0, -30.0)
        probs[1] = 0.01
        probs[1, gt.y_class[0]] = 0.97
        cost = match_cost(gt, pred, probs)
        assert cost[0].argmin() == 1

    def test_identical_predictions_constant_row(self):
        gt, pred, probs = build_case(2, n_gt=1, n_pred=3)
        pred.p_mask_logits[1] = pred.p_mask_logits[0]
        pred.p_mask_logits[2] = pred.p_mask_logits[0]
        probs[1] = probs[0]
        probs[2] = probs[0]
        cost = match_cost(gt, pred, probs)
        assert np.allclose(cost[0], cost[0, 0])

    def test_seeded_entries_match_scalar_loops(self):
        gt, pred, probs = build_case(3, n_gt=3, n_pred=5)
        cost = match_cost(gt, pred, probs)
        for i in range(3):
            y4 = rasterize_to_stride(gt.y_mask[i], 4).astype(np.float64)
            for j in range(5):
                z = pred.p_mask_logits[j]
                bce = 0.0
                inter = 0.0
                ssum = 0.0
                for a in range(z.shape[0]):
                    for b in range(z.shape[1]):
                        s = sigmoid_scalar(z[a, b])
                        yv = y4[a, b]
                        eps = 1e-300
                        bce += -(yv * np.log(max(s, eps)) +
                                 (1 - yv) * np.log(max(1 - s, eps)))
                        inter += yv * s
                        ssum += s
                bce /= z.size
                dice = 1.0 - 2.0 * inter / (y4.sum() + ssum)
                ref = 2.0 * (-probs[j, gt.y_class[i]]) + 5.0 * bce + 5.0 * dice
                assert abs(cost[i, j] - ref) < 1e-9

    def test_finite(self):
        gt, pred, probs = build_case(4)
        assert np.isfinite(match_cost(gt, pred, probs)).all()
