import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imcswav import autodiff as ad
from imcswav.autodiff import Tensor
from imcswav.errors import ConfigError, DimensionError, ParameterError
from imcswav.objectives import ViewBundle, jsd, logit_penalty, mi_cluster_loss, swap_loss, total_loss
from imcswav.selflabel import Codes, Targets

from fd import numeric_grad, rel_err

FLOOR = 1e-12


def random_simplex(rng, m, k, sharp=1.0):
    x = np.exp(sharp * rng.standard_normal((m, k)))
    return x / x.sum(axis=1, keepdims=True)


def make_bundle(codes, targets, posteriors, logits=None, grad=False):
    return ViewBundle(
        [Codes(Tensor(u, requires_grad=grad), np.log(np.maximum(u, FLOOR)), v) for v, u in enumerate(codes)],
        [Targets(q, 0.05, 3, t) for t, q in enumerate(targets)],
        [Tensor(y, requires_grad=grad) for y in posteriors],
        [Tensor(lg, requires_grad=grad) for lg in (logits or [])],
    )


def random_instance(rng, V, V_h, m, k, kp):
    codes = [random_simplex(rng, m, kp, 2.0) for _ in range(V)]
    targets = [random_simplex(rng, m, kp, 2.0) for _ in range(V_h)]
    posts = [random_simplex(rng, m, k, 2.0) for _ in range(V)]
    return codes, targets, posts


def naive_swap(codes, targets):
    total, pairs = 0.0, 0
    for t, q in enumerate(targets):
        for v, u in enumerate(codes):
            if v == t:
                continue
            m = len(u)
            s = 0.0
            for i in range(m):
                for j in range(len(u[i])):
                    s += q[i][j] * math.log(max(u[i][j], FLOOR))
            total += -s / m
            pairs += 1
    return total / pairs


def naive_mi(codes, posts, beta):
    V = len(codes)
    m = len(codes[0])
    k, kp = len(posts[0][0]), len(codes[0][0])
    total = 0.0
    for i in range(V):
        for j in range(V):
            joint = [[sum(posts[j][l][a] * codes[i][l][b] for l in range(m)) / m for b in range(kp)]
                     for a in range(k)]
            pu = [sum(codes[i][l][b] for l in range(m)) / m for b in range(kp)]
            py = [sum(posts[j][l][a] for l in range(m)) / m for a in range(k)]
            cond = 0.0
            for a in range(k):
                for b in range(kp):
                    p = joint[a][b]
                    cond += p * (math.log(max(pu[b], FLOOR)) - math.log(max(p, FLOOR)))
            ent = sum(p * math.log(max(p, FLOOR)) for p in py)
            total += cond + beta * ent
    return total / V**2


class TestSwapLoss:
    def test_perfect_prediction_is_zero(self):
        one_hot = np.eye(3)[[0, 1, 2, 1]]
        b = make_bundle([one_hot, one_hot], [one_hot, one_hot], [np.full((4, 2), 0.5)] * 2)
        assert 0.0 <= swap_loss(b).item() <= 1e-11

    def test_uniform_codes_give_log_k(self):
        rng = np.random.default_rng(0)
        u = np.full((3, 4), 0.25)
        b = make_bundle([u, u], [random_simplex(rng, 3, 4), random_simplex(rng, 3, 4)], [u, u])
        assert abs(swap_loss(b).item() - math.log(4)) < 1e-12

    def test_multicrop_matches_double_loop(self):
        rng = np.random.default_rng(1)
        codes, targets, posts = random_instance(rng, 4, 2, 3, 2, 5)
        got = swap_loss(make_bundle(codes, targets, posts)).item()
        assert abs(got - naive_swap(codes, targets)) < 1e-12

    def test_two_views_is_mean_of_the_two_swapped_terms(self):
        rng = np.random.default_rng(2)
        codes, targets, posts = random_instance(rng, 2, 2, 6, 3, 5)
        ce = lambda q, u: -np.sum(q * np.log(u)) / len(u)
        expected = 0.5 * (ce(targets[1], codes[0]) + ce(targets[0], codes[1]))
        assert abs(swap_loss(make_bundle(codes, targets, posts)).item() - expected) < 1e-12

    def test_needs_two_high_views(self):
        u = np.full((2, 2), 0.5)
        with pytest.raises(ConfigError):
            swap_loss(make_bundle([u, u], [u], [u, u]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        codes, targets, posts = random_instance(rng, 3, 2, 4, 2, 3)
        assert swap_loss(make_bundle(codes, targets, posts)).item() >= 0


class TestClusterLoss:
    def test_one_hot_case(self):
        y = np.eye(2)[[0, 1, 0, 1]]
        b = make_bundle([y], [y, y], [y])
        assert abs(mi_cluster_loss(b, 4.0).item() - (-4 * math.log(2))) < 1e-12

    def test_uniform_posterior_case(self):
        rng = np.random.default_rng(3)
        b = make_bundle([random_simplex(rng, 5, 3)], [], [np.full((5, 2), 0.5)])
        assert abs(mi_cluster_loss(b, 4.0).item() - (-3 * math.log(2))) < 1e-12

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(4)
        codes, targets, posts = random_instance(rng, 2, 2, 6, 3, 7)
        got = mi_cluster_loss(make_bundle(codes, targets, posts), 4.0).item()
        assert abs(got - naive_mi(codes, posts, 4.0)) < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 8.0))
    def test_lower_bound_and_conditional_non_negative(self, seed, beta):
        rng = np.random.default_rng(seed)
        k = 3
        codes, targets, posts = random_instance(rng, 3, 2, 5, k, 4)
        b = make_bundle(codes, targets, posts)
        assert mi_cluster_loss(b, beta).item() >= -beta * math.log(k) - 1e-12
        assert mi_cluster_loss(b, 0.0).item() >= -1e-12

    def test_prototype_permutation_invariance(self):
        rng = np.random.default_rng(5)
        codes, targets, posts = random_instance(rng, 3, 2, 6, 3, 5)
        perm = rng.permutation(5)
        a = mi_cluster_loss(make_bundle(codes, targets, posts), 4.0).item()
        b = mi_cluster_loss(make_bundle([c[:, perm] for c in codes], targets, posts), 4.0).item()
        assert abs(a - b) < 1e-12

    def test_gradient_reaches_posteriors_only(self):
        rng = np.random.default_rng(6)
        codes, targets, posts = random_instance(rng, 2, 2, 4, 3, 5)
        b = make_bundle(codes, targets, posts, grad=True)
        ad.backward(mi_cluster_loss(b, 4.0))
        assert all(c.u.grad is None for c in b.codes)
        assert all(y.grad is not None for y in b.posteriors)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(7)
        codes, targets, posts = random_instance(rng, 3, 2, 4, 3, 5)
        b = make_bundle(codes, targets, posts, grad=True)
        ad.backward(mi_cluster_loss(b, 4.0))
        for y in b.posteriors:
            f = lambda: mi_cluster_loss(make_bundle(codes, targets, [p.data for p in b.posteriors]), 4.0).item()
            assert rel_err(y.grad, numeric_grad(f, y.data)) < 1e-6

    def test_width_mismatch(self):
        u = np.full((2, 3), 1 / 3)
        with pytest.raises(DimensionError):
            mi_cluster_loss(make_bundle([u, u], [u, u], [np.full((2, 2), 0.5), np.full((2, 3), 1 / 3)]))


class TestPenalty:
    def test_inside_band_is_zero(self):
        assert logit_penalty(Tensor(np.random.default_rng(8).uniform(-5, 5, (4, 3))), 0.01, 5.0).item() == 0

    def test_hand_value(self):
        assert abs(logit_penalty(Tensor([[7.0]]), 0.01, 5.0).item() - 0.02) < 1e-15

    def test_gradient_is_signed_alpha_over_m(self):
        x = np.array([[7.0, -6.0, 1.0], [0.0, 4.9, -9.0]])
        t = Tensor(x, requires_grad=True)
        ad.backward(logit_penalty(t, 0.01, 5.0))
        expected = np.array([[1, -1, 0], [0, 0, -1]]) * 0.01 / 2
        assert np.allclose(t.grad, expected, atol=1e-15)
        f = lambda: logit_penalty(Tensor(x), 0.01, 5.0).item()
        assert rel_err(t.grad, numeric_grad(f, x)) < 1e-8

    def test_threshold_must_be_positive(self):
        with pytest.raises(ParameterError):
            logit_penalty(Tensor([[1.0]]), 0.1, 0.0)


def test_total_is_sum_of_parts():
    rng = np.random.default_rng(9)
    codes, targets, posts = random_instance(rng, 4, 2, 3, 2, 5)
    logits = [rng.normal(0, 6, (3, 2)) for _ in range(4)]
    b = make_bundle(codes, targets, posts, logits)
    r = total_loss(b, 4.0, 0.01)
    assert r.total == r.swap_loss + r.cluster_loss + r.penalty
    assert r.penalty > 0
    assert abs(r.tensor.item() - r.total) < 1e-12


def test_total_without_penalty_composes():
    rng = np.random.default_rng(10)
    codes, targets, posts = random_instance(rng, 2, 2, 4, 2, 3)
    r = total_loss(make_bundle(codes, targets, posts, [np.zeros((4, 2))] * 2), 4.0, 0.0)
    assert abs(r.total - (naive_swap(codes, targets) + naive_mi(codes, posts, 4.0))) < 1e-12


class TestJSD:
    def test_identical_is_zero(self):
        p = np.array([0.2, 0.3, 0.5])
        assert jsd(p, p) == 0.0

    def test_disjoint_is_ln2(self):
        assert abs(jsd([1, 0], [0, 1]) - math.log(2)) < 1e-15

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        p, q = random_simplex(rng, 2, 6, 3.0)
        assert jsd(p, q) == jsd(q, p)
        assert 0 <= jsd(p, q) <= math.log(2) + 1e-12

    def test_rejects_unnormalized(self):
        with pytest.raises(ParameterError):
            jsd([0.5, 0.6], [0.5, 0.5])
