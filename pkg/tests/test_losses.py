import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ad2cn import autodiff as ad
from ad2cn.autodiff import DimensionError
from ad2cn.losses import (ConfidentSubset, LabelError, LossBreakdown, alignment_loss, draw_projections,
                          entropy_loss, filter_confident, source_loss, swd)


def softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestSourceLoss:
    def test_near_perfect_predictions(self):
        y = np.array([0, 2, 1])
        p = np.full((3, 3), 1e-15)
        p[np.arange(3), y] = 1 - 2e-15
        assert source_loss(p, p, y).item() == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("C", [2, 3, 31, 65])
    def test_uniform_is_twice_log_c(self, C):
        u = np.full((5, C), 1.0 / C)
        assert source_loss(u, u, np.arange(5) % C).item() == pytest.approx(2 * math.log(C), rel=1e-12)

    def test_hand_summed_oracle(self):
        rng = np.random.default_rng(0)
        pn, pp = softmax(rng.normal(size=(4, 3))), softmax(rng.normal(size=(4, 3)))
        y = [2, 0, 1, 1]
        hand = 0.0
        for i in range(4):
            hand += -math.log(pn[i][y[i]]) / 4
        for i in range(4):
            hand += -math.log(pp[i][y[i]]) / 4
        assert abs(source_loss(pn, pp, y).item() - hand) < 1e-10

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            source_loss(np.full((2, 3), 1 / 3), np.full((2, 3), 1 / 3), [0, 3])

    def test_zero_probability_is_clamped(self):
        p = np.array([[1.0, 0.0]])
        assert source_loss(p, p, [1]).item() == pytest.approx(-2 * math.log(1e-12))


def exact_w2_1d(a, b):
    """Order-statistics coupling: pair the i-th smallest with the i-th smallest."""
    a, b = sorted(a), sorted(b)
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)


class TestSWD:
    def test_identical_inputs_zero(self):
        p = softmax(np.random.default_rng(0).normal(size=(10, 4)))
        assert swd(p, p, 32, np.random.default_rng(1)).item() == 0.0

    def test_row_permutation_zero(self):
        rng = np.random.default_rng(2)
        p = softmax(rng.normal(size=(10, 4)))
        assert swd(p, p[rng.permutation(10)], 32, rng).item() == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_scalar_rows_match_exact_1d_wasserstein(self, seed):
        rng = np.random.default_rng(seed)
        p, q = rng.normal(size=(9, 1)), rng.normal(size=(9, 1)) + 0.5
        got = swd(p, q, num_projections=16, rng=rng).item()
        assert abs(got - exact_w2_1d(p[:, 0], q[:, 0])) < 1e-10

    def test_symmetric_for_same_projections(self):
        rng = np.random.default_rng(3)
        p, q = softmax(rng.normal(size=(8, 5))), softmax(rng.normal(size=(8, 5)))
        theta = draw_projections(5, 64, rng)
        assert swd(p, q, projections=theta).item() == pytest.approx(swd(q, p, projections=theta).item(), rel=1e-14)

    @settings(max_examples=50)
    @given(arrays(np.float64, (6, 3), elements=st.floats(-5, 5)), arrays(np.float64, (6, 3), elements=st.floats(-5, 5)),
           st.permutations(range(6)), st.permutations(range(6)))
    def test_nonnegative_and_permutation_invariant(self, p, q, perm_p, perm_q):
        theta = draw_projections(3, 16, np.random.default_rng(0))
        base = swd(p, q, projections=theta).item()
        assert base >= 0
        permuted = swd(p[list(perm_p)], q[list(perm_q)], projections=theta).item()
        assert permuted == pytest.approx(base, rel=1e-12, abs=1e-14)

    def test_projections_are_unit_vectors(self):
        theta = draw_projections(7, 128, np.random.default_rng(0))
        np.testing.assert_allclose(np.linalg.norm(theta, axis=0), 1.0, rtol=1e-14)

    def test_brute_force_average_over_directions(self):
        rng = np.random.default_rng(4)
        p, q = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        theta = draw_projections(3, 7, rng)
        hand = np.mean([exact_w2_1d(p @ theta[:, m], q @ theta[:, m]) for m in range(7)])
        assert abs(swd(p, q, projections=theta).item() - hand) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            swd(np.zeros((3, 2)), np.zeros((4, 2)), 4, np.random.default_rng(0))


class TestFilter:
    def test_sigma_zero_keeps_all(self):
        p = softmax(np.random.default_rng(0).normal(size=(10, 3)))
        assert len(filter_confident(p, 0.0)) == 10

    def test_sigma_one_keeps_none(self):
        p = np.array([[1.0, 0.0], [0.3, 0.7]])
        sub = filter_confident(p, 1.0)
        assert len(sub) == 0 and sub.classes_present == ()

    def test_hand_example(self):
        sub = filter_confident(np.array([[0.5, 0.5], [0.9, 0.1], [0.02, 0.98]]), 0.6)
        np.testing.assert_array_equal(sub.indices, [1, 2])
        np.testing.assert_array_equal(sub.labels, [0, 1])
        assert sub.classes_present == (0, 1)

    def test_partial_label_coverage_allowed(self):
        sub = filter_confident(np.array([[0.9, 0.05, 0.05], [0.8, 0.1, 0.1]]), 0.5)
        assert sub.classes_present == (0,)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_sigma(self, a, b):
        p = softmax(np.random.default_rng(1).normal(size=(30, 4)) * 2)
        lo, hi = min(a, b), max(a, b)
        assert len(filter_confident(p, lo)) >= len(filter_confident(p, hi))

    def test_sigma_range_checked(self):
        with pytest.raises(ValueError):
            filter_confident(np.ones((1, 1)), 1.5)


def brute_force_alignment(z_s, y_s, z_t, idx, labels):
    """Plain loops over class means, independent of the graph code."""
    classes = sorted(set(labels.tolist()) & set(y_s.tolist()))

    def mean(rows):
        rows = list(rows)
        return [sum(r[j] for r in rows) / len(rows) for j in range(len(rows[0]))]

    src = {c: mean(z_s[i] for i in range(len(y_s)) if y_s[i] == c) for c in classes}
    tgt = {c: mean(z_t[idx[k]] for k in range(len(idx)) if labels[k] == c) for c in classes}
    dist = lambda a, b: math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    l_c = sum(dist(src[c], tgt[c]) for c in classes) / len(classes)
    pairs = [(c, k) for c in classes for k in classes if c != k]
    l_d = sum(dist(src[c], tgt[k]) for c, k in pairs) / len(pairs) if pairs else 0.0
    return l_c, l_d


class TestAlignment:
    def test_equal_means_zero_lc(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(6, 4))
        y = np.array([0, 1, 2, 0, 1, 2])
        sub = ConfidentSubset(np.arange(6), y, (0, 1, 2))
        l_c, l_d = alignment_loss(z, y, z, sub)
        assert l_c.item() == 0.0
        assert l_d.item() > 0

    def test_orthonormal_basis(self):
        e = np.eye(2)
        sub = ConfidentSubset(np.array([0, 1]), np.array([0, 1]), (0, 1))
        l_c, l_d = alignment_loss(e, [0, 1], e, sub)
        assert l_c.item() == 0.0
        assert l_d.item() == pytest.approx(math.sqrt(2), rel=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_three_class_vs_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        z_s, z_t = rng.normal(size=(15, 5)), rng.normal(size=(12, 5))
        y_s = rng.permutation(np.arange(15) % 3)
        idx = np.sort(rng.choice(12, size=9, replace=False))
        labels = rng.permutation(np.arange(9) % 3)
        sub = ConfidentSubset(idx, labels, (0, 1, 2))
        l_c, l_d = alignment_loss(z_s, y_s, z_t, sub)
        bc, bd = brute_force_alignment(z_s, y_s, z_t, idx, labels)
        assert abs(l_c.item() - bc) < 1e-10
        assert abs(l_d.item() - bd) < 1e-10

    def test_single_class_has_zero_ld_and_flag(self):
        sub = ConfidentSubset(np.array([0, 1]), np.array([1, 1]), (1,))
        res = alignment_loss(np.ones((2, 3)), [1, 0], np.zeros((2, 3)), sub)
        assert res.single_class and res.l_d.item() == 0.0
        assert res.l_c.item() == pytest.approx(math.sqrt(3))

    def test_class_missing_from_source_batch_is_dropped(self):
        rng = np.random.default_rng(1)
        sub = ConfidentSubset(np.arange(4), np.array([0, 1, 2, 2]), (0, 1, 2))
        res = alignment_loss(rng.normal(size=(4, 2)), [0, 0, 1, 1], rng.normal(size=(4, 2)), sub)
        assert res.classes == (0, 1)

    def test_no_overlap_skips(self):
        sub = ConfidentSubset(np.array([0]), np.array([2]), (2,))
        res = alignment_loss(np.ones((2, 2)), [0, 1], np.ones((1, 2)), sub)
        assert res.skipped and res.l_c.item() == 0.0 and res.l_d.item() == 0.0

    def test_gradients_reach_both_domains(self):
        rng = np.random.default_rng(2)
        zs = ad.Node(rng.normal(size=(6, 3)), requires_grad=True)
        zt = ad.Node(rng.normal(size=(6, 3)), requires_grad=True)
        sub = ConfidentSubset(np.arange(6), np.arange(6) % 3, (0, 1, 2))
        l_c, l_d = alignment_loss(zs, np.arange(6) % 3, zt, sub)
        ad.sub(l_c, l_d).backward()
        assert zs.grad.any() and zt.grad.any()


class TestEntropy:
    def test_one_hot_is_zero(self):
        p = np.eye(3)
        assert entropy_loss(p, p).item() == 0.0

    @pytest.mark.parametrize("C", [2, 5, 65])
    def test_uniform(self, C):
        u = np.full((4, C), 1.0 / C)
        assert entropy_loss(u, u).item() == pytest.approx(2 * math.log(C), rel=1e-12)

    def test_half_and_one_hot(self):
        assert entropy_loss([[0.5, 0.5]], [[1.0, 0.0]]).item() == pytest.approx(math.log(2), rel=1e-15)

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        assert entropy_loss(softmax(rng.normal(size=(5, 4))), softmax(rng.normal(size=(5, 4)))).item() >= 0


def test_breakdown_lm_identity():
    bd = LossBreakdown(l_c=1.25, l_d=3.5)
    assert bd.l_m == bd.l_c - bd.l_d
    rec = bd.as_record()
    assert rec["l_m"] == rec["l_c"] - rec["l_d"]


@pytest.fixture(scope="module")
def suite():
    from ad2cn.gradcheck import run_suite

    return run_suite(instances=20, seed=11)


@pytest.mark.parametrize("name", ["L_s", "L_dis", "L_c", "L_d", "L_em", "mlp_composite"])
def test_composite_losses_pass_gradcheck(suite, name):
    assert suite[name] < 1e-4
