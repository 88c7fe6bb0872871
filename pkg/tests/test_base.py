import numpy as np
import pytest

from mixflow.base import (
    BasePredictor,
    GmmParams,
    predict_base,
    relaxed_sample_graph,
    sample_hard,
    sample_relaxed,
)
from mixflow.nn import Var, init_mlp, log_softmax, mlp_forward, value_and_grads
from mixflow.ot import empirical_wasserstein


def make_predictor(ddim=3, I=4, D=2, seed=0, mode_source="predicted", dropout=0.0):
    rng = np.random.default_rng(seed)
    weight_head = init_mlp([ddim, 8, I], "relu", dropout, rng)
    if mode_source == "predicted":
        mode_head = init_mlp([ddim, 8, I * D], "relu", dropout, rng)
        return BasePredictor(weight_head, 1e-2, "predicted", mode_head, None, I, D)
    table = rng.standard_normal((I, D))
    return BasePredictor(weight_head, 1e-2, "free_parameters", None, table, I, D)


class TestGmmParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            GmmParams(np.zeros((2, 2)), np.array([0.5, 0.6]), 1.0)
        with pytest.raises(ValueError):
            GmmParams(np.zeros((2, 2)), np.array([0.5, 0.5]), 0.0)
        with pytest.raises(ValueError):
            GmmParams(np.array([[np.inf, 0.0]]), np.array([1.0]), 1.0)

    def test_json_round_trip(self):
        g = GmmParams(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.25, 0.75]), 0.5)
        g2 = GmmParams.from_json(g.to_json())
        assert np.array_equal(g.theta, g2.theta) and np.array_equal(g.p, g2.p)


class TestPredictBase:
    def test_zero_heads_give_origin_modes_uniform_weights(self):
        bp = make_predictor(I=3)
        for head in (bp.weight_head, bp.mode_head):
            head.weights = [np.zeros_like(w) for w in head.weights]
            head.biases = [np.zeros_like(b) for b in head.biases]
        g = predict_base(bp, np.array([0.3, -0.7, 1.0]))
        assert np.array_equal(g.theta, np.zeros((3, 2)))
        assert np.allclose(g.p, np.full(3, 1 / 3))

    def test_free_parameters_ignore_descriptor(self):
        bp = make_predictor(mode_source="free_parameters")
        g1 = predict_base(bp, np.array([1.0, 0.0, 0.0]))
        g2 = predict_base(bp, np.array([0.0, 5.0, -2.0]))
        assert np.array_equal(g1.theta, bp.theta_table)
        assert np.array_equal(g1.theta, g2.theta)
        assert not np.array_equal(g1.p, g2.p)

    def test_matches_straight_line_forward_oracle(self):
        bp = make_predictor(seed=3)
        y = np.array([0.5, -1.0, 2.0])
        g = predict_base(bp, y)

        def forward(params, x):
            h = x
            for k, (w, b) in enumerate(zip(params.weights, params.biases)):
                h = h @ w.T + b
                if k < len(params.weights) - 1:
                    h = np.maximum(h, 0.0)
            return h

        logits = forward(bp.weight_head, y)
        want_p = np.exp(logits - logits.max())
        want_p /= want_p.sum()
        assert np.allclose(g.p, want_p, atol=1e-12)
        assert np.allclose(g.theta, forward(bp.mode_head, y).reshape(4, 2), atol=1e-12)

    def test_eval_mode_deterministic_train_mode_not(self):
        bp = make_predictor(dropout=0.5)
        y = np.array([1.0, 2.0, 3.0])
        a = predict_base(bp, y, train_mode=False)
        b = predict_base(bp, y, train_mode=False)
        assert np.array_equal(a.theta, b.theta) and np.array_equal(a.p, b.p)
        c = predict_base(bp, y, train_mode=True, rng=np.random.default_rng(0))
        d = predict_base(bp, y, train_mode=True, rng=np.random.default_rng(99))
        assert not np.array_equal(c.p, d.p)

    def test_weight_simplex_for_any_descriptor(self):
        bp = make_predictor(seed=8)
        rng = np.random.default_rng(0)
        for _ in range(20):
            g = predict_base(bp, rng.standard_normal(3) * 10)
            assert (g.p > 0).all() and abs(g.p.sum() - 1) < 1e-9

    def test_shape_mismatch_rejected(self):
        bp = make_predictor()
        with pytest.raises(Exception):
            predict_base(bp, np.zeros(7))

    def test_json_round_trip(self):
        for source in ("predicted", "free_parameters"):
            bp = make_predictor(mode_source=source)
            bp2 = BasePredictor.from_json(bp.to_json())
            g1 = predict_base(bp, np.array([1.0, 2.0, 3.0]))
            g2 = predict_base(bp2, np.array([1.0, 2.0, 3.0]))
            assert np.array_equal(g1.theta, g2.theta) and np.array_equal(g1.p, g2.p)


class TestSampleHard:
    def test_point_mass_limit(self):
        g = GmmParams(np.array([[2.0, -1.0]]), np.array([1.0]), 1e-20)
        pts = sample_hard(g, 100, np.random.default_rng(0))
        assert np.abs(pts - np.array([2.0, -1.0])).max() < 1e-8

    def test_zero_weight_mode_never_drawn(self):
        g = GmmParams(np.array([[0.0], [100.0]]), np.array([1.0, 0.0]), 1e-6)
        pts = sample_hard(g, 1000, np.random.default_rng(1))
        assert np.abs(pts - 0.0).max() < 1.0

    def test_component_frequencies(self):
        g = GmmParams(np.zeros((3, 1)), np.array([0.2, 0.3, 0.5]), 1e-9)
        g = GmmParams(np.array([[0.0], [10.0], [20.0]]), np.array([0.2, 0.3, 0.5]), 1e-9)
        pts = sample_hard(g, 100_000, np.random.default_rng(2))
        comp = np.argmin(np.abs(pts - np.array([0.0, 10.0, 20.0])[None, :]), axis=1)
        freq = np.bincount(comp, minlength=3) / len(pts)
        assert 0.5 * np.abs(freq - g.p).sum() < 0.01

    def test_needs_positive_count(self):
        g = GmmParams(np.zeros((1, 1)), np.array([1.0]), 1.0)
        with pytest.raises(ValueError):
            sample_hard(g, 0, np.random.default_rng(0))


class TestSampleRelaxed:
    def test_concentrated_weights_match_hard_under_shared_noise(self):
        rng = np.random.default_rng(0)
        theta = np.array([[1.0, 2.0], [5.0, -3.0], [0.0, 0.0]])
        p = np.array([1.0 - 2e-12, 1e-12, 1e-12])
        logp = np.log(p)
        n = 50
        eps = rng.standard_normal((n, 3, 2))
        gumbel = rng.gumbel(size=(n, 3))
        sigma2 = 1e-2
        out = relaxed_sample_graph(theta, logp, sigma2, n, 1e-3, gumbel=gumbel, eps=eps)
        hard = theta[0] + np.sqrt(sigma2) * eps[:, 0, :]
        assert np.abs(out.data - hard).max() < 1e-4

    def test_single_mode_equals_hard_formula(self):
        rng = np.random.default_rng(1)
        theta = np.array([[3.0, 4.0]])
        eps = rng.standard_normal((20, 1, 2))
        for temp in (10.0, 1.0, 0.01):
            out = relaxed_sample_graph(theta, np.zeros(1), 0.04, 20, temp, gumbel=np.zeros((20, 1)), eps=eps)
            assert np.allclose(out.data, theta[0] + 0.2 * eps[:, 0, :], atol=1e-12)

    def test_gradient_wrt_theta_matches_fd(self):
        rng = np.random.default_rng(2)
        theta = rng.standard_normal((3, 2))
        logp = log_softmax(rng.standard_normal(3))
        eps = rng.standard_normal((8, 3, 2))
        gumbel = rng.gumbel(size=(8, 3))

        def loss_of(th):
            out = relaxed_sample_graph(th, logp, 0.01, 8, 0.5, gumbel=gumbel, eps=eps)
            return float((out.data**2).sum(axis=1).mean())

        tv = Var(theta.copy())
        out = relaxed_sample_graph(tv, logp, 0.01, 8, 0.5, gumbel=gumbel, eps=eps)
        _, (g,) = value_and_grads((out * out).sum(axis=1).mean(), [tv])
        h = 1e-5
        fd = np.zeros_like(theta)
        for i in range(3):
            for d in range(2):
                tp = theta.copy(); tp[i, d] += h
                tm = theta.copy(); tm[i, d] -= h
                fd[i, d] = (loss_of(tp) - loss_of(tm)) / (2 * h)
        denom = max(np.abs(fd).max(), 1e-8)
        assert np.abs(g - fd).max() / denom < 1e-4

    def test_w2_convergence_to_hard_sampling(self):
        # relaxed draws at low temperature land within the hard-sampling noise floor
        rng = np.random.default_rng(3)
        g = GmmParams(np.array([[0.0, 0.0], [4.0, 4.0]]), np.array([0.4, 0.6]), 1e-2)
        n = 400
        hard1 = sample_hard(g, n, np.random.default_rng(10))
        hard2 = sample_hard(g, n, np.random.default_rng(11))
        relaxed = sample_relaxed(g, n, 0.01, np.random.default_rng(12))
        floor = empirical_wasserstein(hard1, hard2, 2)
        assert empirical_wasserstein(relaxed, hard1, 2) <= 3.0 * floor
