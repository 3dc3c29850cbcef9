import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_graph
from gcnlab.csbm import TransductiveSplit
from gcnlab.graph import SparseGraph, build_propagator
from gcnlab.linalg import DimensionError, relu, sigmoid
from gcnlab.models import (
    ARCHS,
    DegenerateInputError,
    DivergenceError,
    ModelParams,
    ModelSpec,
    StaleTraceError,
    TrainConfig,
    backward,
    canonical_arch,
    classification_error,
    early_stop_index,
    finite_difference_grads,
    forward,
    gd_step,
    head_loss,
    init_params,
    loss_and_grads,
    margin_loss,
    margin_phi,
    p_margin,
    pairnorm,
    predict,
    squared_loss,
    train,
)

TWO = SparseGraph.from_edges(2, [(0, 1)])
P2 = build_propagator(TWO)


def max_rel_error(a: ModelParams, b: ModelParams) -> float:
    worst = 0.0
    for k, x in a.named().items():
        y = b.named()[k]
        den = np.maximum(np.maximum(np.abs(x), np.abs(y)), max(1e-3 * np.abs(y).max(), 1e-8))
        worst = max(worst, float((np.abs(x - y) / den).max()))
    return worst


class TestSpec:
    def test_weight_shapes(self):
        assert ModelSpec("gcn", 3, 5, 4).weight_shapes() == [(5, 4), (4, 4), (4, 4)]
        assert ModelSpec("ResGCN", 2, 5, 4).weight_shapes() == [(5, 4), (4, 4), (4, 4)]
        assert ModelSpec("APPNP", 9, 5, 4).weight_shapes() == [(5, 4)]
        assert ModelSpec("DGCN", 2, 5, 4).weight_shapes() == [(5, 5), (5, 5)]
        assert ModelSpec("DGCN", 2, 5, 4).repr_dim == 5

    def test_names(self):
        assert canonical_arch("gcnii") == "GCNII"
        with pytest.raises(ValueError):
            canonical_arch("GAT")

    @pytest.mark.parametrize("kw", [dict(depth=0), dict(alpha=1.5), dict(beta=-0.1), dict(hidden_dim=0),
                                    dict(beta_schedule="cosine")])
    def test_invalid(self, kw):
        base = dict(arch="GCN", depth=2, input_dim=3)
        base.update(kw)
        with pytest.raises(ValueError):
            ModelSpec(**base)

    def test_log_betas(self):
        b = ModelSpec("GCNII", 3, 2, 2, beta_schedule="log").betas()
        np.testing.assert_allclose(b, np.log(0.5 / np.arange(1, 4) + 1))

    def test_init_scale(self):
        spec = ModelSpec("GCN", 1, 400, 400)
        w = init_params(spec, 0).weights[0]
        assert w.std() == pytest.approx(math.sqrt(1 / 400), rel=0.01)
        w2 = init_params(spec, 0, gain=2.0).weights[0]
        np.testing.assert_allclose(w2, 2 * w)


class TestForwardExamples:
    def test_gcn_two_node_cancels(self):
        spec = ModelSpec("GCN", 1, 1, 1)
        params = ModelParams((np.eye(1),), np.ones((1, 1)))
        tr = forward(spec, params, P2, np.array([[2.0], [-2.0]]))
        np.testing.assert_array_equal(tr.output, np.zeros((2, 1)))

    def test_appnp_alpha_zero(self, rng):
        g = random_graph(rng, 7, 0.5)
        x = rng.standard_normal((7, 3))
        for depth in (1, 4, 9):
            spec = ModelSpec("APPNP", depth, 3, 2, alpha=0.0)
            params = init_params(spec, 1)
            out = forward(spec, params, build_propagator(g), x).output
            np.testing.assert_allclose(out, x @ params.weights[0], atol=1e-15)

    def test_dgcn_identity_path(self, rng):
        g = random_graph(rng, 5, 0.6)
        p = build_propagator(g)
        x = rng.standard_normal((5, 3))
        spec = ModelSpec("DGCN", 1, 3, 3)
        params = init_params(spec, 0).with_named({"beta_logits": np.array([-1e4])})
        assert params.mixing_alpha[0] == 1.0 and params.mixing_beta[0] == 0.0
        np.testing.assert_allclose(forward(spec, params, p, x).output, p @ x, atol=1e-15)

    def test_gcnii_reduces_to_sgc_with_relu(self, rng):
        g = random_graph(rng, 8, 0.4)
        p = build_propagator(g)
        x = rng.standard_normal((8, 3))
        gcnii = ModelSpec("GCNII", 3, 3, 4, alpha=1.0, beta=0.0)
        params = init_params(gcnii, 2)
        out = forward(gcnii, params, p, x).output
        sgc = ModelSpec("SGC", 1, 4, 4)
        h = x @ params.weights[0]
        for _ in range(3):
            h = relu(forward(sgc, ModelParams((np.eye(4),), np.zeros((4, 1))), p, h).output)
        np.testing.assert_allclose(out, h, atol=1e-14)

    def test_gcnii_beta_one_is_gcn_layer(self, rng):
        g = random_graph(rng, 6, 0.5)
        p = build_propagator(g)
        x = rng.standard_normal((6, 4))
        spec = ModelSpec("GCNII", 1, 4, 4, alpha=1.0, beta=1.0)
        params = init_params(spec, 0)
        expect = relu(p @ (x @ params.weights[0]) @ params.weights[1])
        np.testing.assert_allclose(forward(spec, params, p, x).output, expect, atol=1e-14)

    def test_sgc_closed_form(self, rng):
        g = random_graph(rng, 6, 0.5)
        p = build_propagator(g).toarray()
        x = rng.standard_normal((6, 2))
        spec = ModelSpec("SGC", 3, 2, 2)
        params = init_params(spec, 0)
        out = forward(spec, params, build_propagator(g), x).output
        np.testing.assert_allclose(out, np.linalg.matrix_power(p, 3) @ x @ params.weights[0], atol=1e-14)

    def test_resgcn_skip(self, rng):
        g = random_graph(rng, 5, 0.5)
        p = build_propagator(g)
        x = rng.standard_normal((5, 2))
        spec = ModelSpec("ResGCN", 1, 2, 3)
        w0, w1 = init_params(spec, 0).weights
        h0 = x @ w0
        out = forward(spec, ModelParams((w0, w1), np.zeros((3, 1))), p, x).output
        np.testing.assert_allclose(out, relu(p @ h0 @ w1) + h0, atol=1e-14)

    def test_shape_errors(self):
        spec = ModelSpec("GCN", 1, 2, 2)
        params = init_params(spec, 0)
        with pytest.raises(DimensionError):
            forward(spec, params, P2, np.ones((2, 3)))
        with pytest.raises(DimensionError):
            forward(spec, params, build_propagator(SparseGraph(3, [])), np.ones((2, 2)))
        with pytest.raises(DimensionError):
            forward(ModelSpec("GCN", 2, 2, 2), params, P2, np.ones((2, 2)))


class TestLosses:
    def test_p_margin(self):
        assert p_margin(1.0, 1) == 1.0
        assert p_margin(0.0, 1) == -1.0
        assert p_margin(0.5, 0) == 0.0 and p_margin(0.5, 1) == 0.0

    def test_ramp(self):
        np.testing.assert_array_equal(margin_phi([0.5, 2.0, -1.0], 1.0), [0.5, 0.0, 1.0])
        with pytest.raises(ValueError):
            margin_phi(0.0, 0.0)

    def test_margin_loss_rewards_correct_side(self):
        assert margin_loss(0.9, 1, 1.0) < margin_loss(0.6, 1, 1.0) < margin_loss(0.1, 1, 1.0)
        assert margin_loss(1.0, 1, 1.0) == 0.0

    def test_error_indicator(self):
        assert classification_error(0.4, 1)
        assert not classification_error(0.6, 1)

    def test_predict(self):
        assert predict(np.array([1.0, -1.0]), np.array([2.0, 2.0])) == 0.5

    def test_squared(self, rng):
        y = rng.standard_normal((4, 2))
        assert squared_loss(y, y) == 0.0
        assert squared_loss(np.array([[2.0, 0.0]]), np.zeros((1, 2))) == 2.0
        a = rng.standard_normal((4, 2))
        assert squared_loss(a, y) == pytest.approx(0.5 * sum((a - y).ravel() ** 2), rel=1e-14)

    def test_head_loss_reduction(self, rng):
        out, v = rng.standard_normal((5, 3)), rng.standard_normal((3, 1))
        labels = np.array([0, 1, 1, 0, 1])
        idx = np.array([0, 2, 4])
        lm, gm, _ = head_loss("squared", out, v, labels, idx, reduction="mean")
        ls, gs, _ = head_loss("squared", out, v, labels, idx, reduction="sum")
        assert ls == pytest.approx(3 * lm)
        np.testing.assert_allclose(gs, 3 * gm)
        assert not np.any(gm[[1, 3]])
        with pytest.raises(ValueError):
            head_loss("hinge", out, v, labels, idx)
        with pytest.raises(ValueError):
            head_loss("squared", out, v, labels, np.array([], dtype=int))


class TestPairNorm:
    def test_moments(self, rng):
        h = rng.standard_normal((7, 3)) * 5 + 2
        out = pairnorm(h, 1.7)
        assert np.abs(out.mean(axis=0)).max() <= 1e-12
        assert np.mean(np.sum(out ** 2, axis=1)) == pytest.approx(1.7 ** 2, rel=1e-10)

    def test_fixed_point(self, rng):
        h = rng.standard_normal((6, 2))
        h -= h.mean(axis=0)
        h /= math.sqrt(np.mean(np.sum(h ** 2, axis=1)))
        np.testing.assert_allclose(pairnorm(h, 1.0), h, atol=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            pairnorm(np.ones((4, 2)), 1.0)

    def test_rejected_for_linear_archs(self):
        spec = ModelSpec("APPNP", 2, 2, 2)
        with pytest.raises(ValueError):
            forward(spec, init_params(spec, 0), P2, np.ones((2, 2)), pairnorm_scale=1.0)


def gradient_instance(rng, arch, loss, use_bias=False, pairnorm_scale=None):
    """Small random instance kept away from relu and ramp kinks."""
    while True:
        n = 6
        g = random_graph(rng, n, 0.5)
        p = build_propagator(g)
        spec = ModelSpec(arch, 3, 3, 4, use_bias=use_bias)
        pr = init_params(spec, rng)
        pr = pr.with_named({k: rng.standard_normal(a.shape) for k, a in pr.named().items()})
        x = rng.standard_normal((n, 3))
        y = rng.integers(0, 2, n)
        tr = forward(spec, pr, p, x, pairnorm_scale)
        s = tr.output @ pr.v
        if np.abs(s).max() < 1e-8:
            continue
        pr = pr.with_named({"v": pr.v * 2 / np.abs(s).max()})
        tr = forward(spec, pr, p, x, pairnorm_scale)
        if arch in ("GCN", "ResGCN", "GCNII") and min(np.abs(z).min() for z in tr.z) < 1e-4:
            continue
        pm = p_margin(sigmoid((tr.output @ pr.v)[:, 0]), y)
        if loss == "margin" and min(np.abs(pm).min(), np.abs(pm - 2.0).min()) < 1e-4:
            continue
        return spec, pr, p, x, y


class TestBackward:
    @pytest.mark.parametrize("arch", ARCHS)
    @pytest.mark.parametrize("loss", ["margin", "squared"])
    def test_finite_differences(self, arch, loss):
        rng = np.random.default_rng(hash((arch, loss)) % 2**32)
        for _ in range(3):
            spec, pr, p, x, y = gradient_instance(rng, arch, loss)
            idx = np.arange(6)
            _, analytic = loss_and_grads(spec, pr, p, x, y, idx, loss, 2.0)
            numeric = finite_difference_grads(spec, pr, p, x, y, idx, loss, 2.0)
            assert max_rel_error(analytic, numeric) < 1e-5

    def test_gcn_bias(self, rng):
        spec, pr, p, x, y = gradient_instance(rng, "GCN", "squared", use_bias=True)
        pr = pr.with_named({f"b{i}": rng.standard_normal(4) for i in range(3)})
        idx = np.arange(6)
        _, analytic = loss_and_grads(spec, pr, p, x, y, idx, "squared")
        assert max_rel_error(analytic, finite_difference_grads(spec, pr, p, x, y, idx, "squared")) < 1e-5

    @pytest.mark.parametrize("arch", ["GCN", "ResGCN", "GCNII"])
    def test_pairnorm_gradients(self, arch, rng):
        spec, pr, p, x, y = gradient_instance(rng, arch, "squared", pairnorm_scale=1.3)
        idx = np.arange(6)
        _, analytic = loss_and_grads(spec, pr, p, x, y, idx, "squared", pairnorm_scale=1.3)
        numeric = finite_difference_grads(spec, pr, p, x, y, idx, "squared", pairnorm_scale=1.3)
        assert max_rel_error(analytic, numeric) < 1e-5

    @pytest.mark.parametrize("arch", ARCHS)
    def test_zero_output_gradient(self, arch, rng):
        spec = ModelSpec(arch, 2, 3, 4)
        pr = init_params(spec, 0)
        g = random_graph(rng, 5, 0.5)
        p, x = build_propagator(g), rng.standard_normal((5, 3))
        grads = backward(spec, pr, forward(spec, pr, p, x), p, x, np.zeros((5, 1)))
        assert all(not np.any(a) for a in grads.named().values())

    def test_linear_gcn_layer_closed_form(self, rng):
        g = random_graph(rng, 6, 0.5)
        p = build_propagator(g)
        x = rng.uniform(0.1, 1.0, (6, 3))
        spec = ModelSpec("GCN", 1, 3, 2)
        pr = ModelParams((rng.uniform(0.1, 1.0, (3, 2)),), rng.standard_normal((2, 1)))
        tr = forward(spec, pr, p, x)
        assert np.all(tr.z[0] > 0)
        delta = rng.standard_normal((6, 1))
        grads = backward(spec, pr, tr, p, x, delta)
        np.testing.assert_allclose(grads.weights[0], (p @ x).T @ (delta @ pr.v.T), atol=1e-14)
        np.testing.assert_allclose(grads.v, tr.output.T @ delta, atol=1e-14)

    def test_stale_trace(self, rng):
        spec = ModelSpec("GCN", 2, 3, 4)
        pr = init_params(spec, 0)
        g = random_graph(rng, 5, 0.5)
        p, x = build_propagator(g), rng.standard_normal((5, 3))
        tr = forward(spec, pr, p, x)
        with pytest.raises(StaleTraceError):
            backward(ModelSpec("GCN", 3, 3, 4), init_params(ModelSpec("GCN", 3, 3, 4), 0), tr, p, x,
                     np.ones((5, 1)))
        big = build_propagator(random_graph(rng, 7, 0.5))
        with pytest.raises(StaleTraceError):
            backward(spec, pr, tr, big, rng.standard_normal((7, 3)), np.ones((7, 1)))


class TestGdStep:
    def test_eta_zero_and_zero_grads(self):
        spec = ModelSpec("DGCN", 2, 3, 3)
        pr = init_params(spec, 0)
        zeros = pr.with_named({k: np.zeros_like(a) for k, a in pr.named().items()})
        ones = pr.with_named({k: np.ones_like(a) for k, a in pr.named().items()})
        for new in (gd_step(pr, ones, 0.0), gd_step(pr, zeros, 0.3)):
            assert all(np.array_equal(new.named()[k], a) for k, a in pr.named().items())

    def test_quadratic_toy(self):
        # squared loss on a fixed representation: v1 = v0 - eta * H^T (H v0 - y) / m
        spec = ModelSpec("SGC", 1, 2, 2)
        g = SparseGraph(3, [])  # identity propagator
        p = build_propagator(g)
        x = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
        pr = ModelParams((np.eye(2),), np.array([[0.5], [-0.5]]))
        y = np.array([1, 0, 1])
        _, grads = loss_and_grads(spec, pr, p, x, y, np.arange(3), "squared")
        new = gd_step(pr, grads, 0.1)
        expect = pr.v - 0.1 * x.T @ (x @ pr.v - y[:, None]) / 3
        np.testing.assert_allclose(new.v, expect, atol=1e-15)

    def test_separate_mixing_rate(self):
        spec = ModelSpec("DGCN", 2, 2, 2)
        pr = init_params(spec, 0)
        ones = pr.with_named({k: np.ones_like(a) for k, a in pr.named().items()})
        new = gd_step(pr, ones, 0.1, eta_mix=0.0)
        assert np.array_equal(new.alpha_logits, pr.alpha_logits)
        assert np.allclose(new.v, pr.v - 0.1)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=3, max_size=3),
           st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_mixing_stays_on_simplex(self, logits, grad):
        spec = ModelSpec("DGCN", 3, 2, 2)
        pr = init_params(spec, 0).with_named({"alpha_logits": np.array(logits)})
        g = pr.with_named({k: np.zeros_like(a) for k, a in pr.named().items()})
        new = gd_step(pr, g.with_named({"alpha_logits": np.array(grad)}), 0.5)
        a = new.mixing_alpha
        assert abs(a.sum() - 1.0) < 1e-12 and np.all(a >= 0)
        assert np.all((new.mixing_beta >= 0) & (new.mixing_beta <= 1))


def clique_toy():
    """Two 4-cliques joined by one edge; signed class features."""
    edges = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    edges += [(i, j) for i in range(4, 8) for j in range(i + 1, 8)] + [(3, 4)]
    g = SparseGraph.from_edges(8, edges)
    y = np.array([0] * 4 + [1] * 4)
    rng = np.random.default_rng(0)
    x = (2 * y[:, None] - 1) * np.array([1.0, 0.5]) + 0.1 * rng.standard_normal((8, 2))
    everyone = np.arange(8)
    return g, x, y, TransductiveSplit(everyone, everyone, everyone)


class TestTrain:
    def test_separable_toy_with_margin_loss(self):
        g, x, y, split = clique_toy()
        spec = ModelSpec("GCN", 1, 2, 4)
        w = np.array([[1.0, -1.0, 1.0, -1.0], [0.5, -0.5, -0.5, 0.5]])
        pr = ModelParams((w,), np.zeros((4, 1)))
        hist = train(spec, pr, g, x, y, split, TrainConfig(eta=1.0, epochs=500, loss="margin"))
        assert hist.train_acc.max() == 1.0
        assert hist.train_acc[-1] == 1.0

    def test_margin_toy_random_inits(self):
        # from a zero head the ramp loss separates the toy whenever every node has a live unit
        g, x, y, split = clique_toy()
        p = build_propagator(g)
        spec = ModelSpec("GCN", 1, 2, 4)
        checked = 0
        for seed in range(20):
            pr = init_params(spec, seed, v_std=0.0)
            if not np.all(np.any(relu(p @ x @ pr.weights[0]) > 0, axis=1)):
                continue
            hist = train(spec, pr, g, x, y, split, TrainConfig(eta=1.0, epochs=500, loss="margin"))
            assert hist.train_acc[-1] == 1.0, seed
            checked += 1
        assert checked >= 15

    def test_eta_zero_flat(self):
        g, x, y, split = clique_toy()
        spec = ModelSpec("ResGCN", 2, 2, 3)
        hist = train(spec, init_params(spec, 0), g, x, y, split, TrainConfig(eta=0.0, epochs=5, loss="squared"))
        for s in ("train", "val", "test"):
            assert np.all(hist.loss[s] == hist.loss[s][0])

    @pytest.mark.parametrize("augment", ["none", "dropedge", "pairnorm"])
    def test_deterministic(self, augment):
        g, x, y, split = clique_toy()
        spec = ModelSpec("GCN", 2, 2, 4)
        cfg = TrainConfig(eta=0.2, epochs=20, loss="squared", augment=augment, dropedge_rate=0.3, seed=4)
        a = train(spec, init_params(spec, 1), g, x, y, split, cfg)
        b = train(spec, init_params(spec, 1), g, x, y, split, cfg)
        assert a.to_csv() == b.to_csv()
        assert a.grad_norm.tobytes() == b.grad_norm.tobytes()

    def test_dropedge_rate_zero_matches_baseline(self):
        g, x, y, split = clique_toy()
        spec = ModelSpec("GCN", 2, 2, 4)
        base = train(spec, init_params(spec, 1), g, x, y, split, TrainConfig(eta=0.2, epochs=15, loss="squared"))
        drop = train(spec, init_params(spec, 1), g, x, y, split,
                     TrainConfig(eta=0.2, epochs=15, loss="squared", augment="dropedge", dropedge_rate=0.0))
        assert base.to_csv() == drop.to_csv()

    def test_squared_loss_decreases(self):
        g, x, y, split = clique_toy()
        spec = ModelSpec("GCN", 2, 2, 4)
        hist = train(spec, init_params(spec, 3), g, x, y, split, TrainConfig(eta=0.5, epochs=200, loss="squared"))
        assert hist.train_loss[-1] < 0.5 * hist.train_loss[0]
        assert hist.train_acc[-1] == 1.0

    def test_divergence_raises(self):
        g, x, y, split = clique_toy()
        spec = ModelSpec("SGC", 1, 2, 4)
        with pytest.raises(DivergenceError), np.errstate(all="ignore"):
            train(spec, init_params(spec, 0), g, x, y, split,
                  TrainConfig(eta=1e3, epochs=200, loss="squared", track_sv=False))

    def test_history_shapes_and_csv(self):
        g, x, y, split = clique_toy()
        spec = ModelSpec("DGCN", 2, 2, 2)
        hist = train(spec, init_params(spec, 0), g, x, y, split, TrainConfig(eta=0.1, epochs=4, loss="squared"))
        assert hist.train_loss.shape == (5,)
        assert hist.grad_norm.shape == (5, len(hist.grad_names))
        assert "alpha_logits" in hist.grad_names
        text = hist.to_csv(comment="config_hash=abc")
        lines = text.splitlines()
        assert lines[0] == "# config_hash=abc"
        assert lines[1] == "epoch,split,loss,accuracy,grad_norm,max_sv"
        assert len(lines) == 2 + 5 * 3

    def test_early_stop_ties_pick_earliest(self):
        class H:
            train_acc = np.array([0.5, 0.9, 0.9, 0.7])
        assert early_stop_index(H()) == 1

    def test_empty_split_rejected(self):
        g, x, y, _ = clique_toy()
        spec = ModelSpec("GCN", 1, 2, 2)
        bad = TransductiveSplit(np.arange(8), np.array([], dtype=int), np.arange(8))
        with pytest.raises(ValueError):
            train(spec, init_params(spec, 0), g, x, y, bad, TrainConfig(epochs=1))
