"""Model composition: factors, fixed effects, local scales, prediction."""

import math

import numpy as np
import pytest
from scipy.special import expit

from graphdf import autodiff as ad
from graphdf import params as pm
from graphdf.errors import InvalidValue, NoLag
from graphdf.graph_build import Graph, laplacian_bundle
from graphdf.graphdf_model import (
    GraphDFModel,
    VariantConfig,
    fixed_effect,
    global_factors,
    load_model,
    local_input_signal,
    local_sigma,
    predict_step,
    save_model,
)
from graphdf.panel_io import SynthConfig, synth_panel
from graphdf.recurrent_cells import CellState, DenseLstmParams, init_dense_lstm


def small_model(variant=None, n_nodes=6, n_steps=30, noise=0.05, seed=0,
                lookback=6, synth_seed=4):
    variant = variant or VariantConfig(k_factors=3, q_hidden=4, r_hidden=3)
    panel, graph = synth_panel(SynthConfig(n_nodes=n_nodes, n_steps=n_steps,
                                           n_communities=2, noise_sigma=noise,
                                           seed=synth_seed))
    model = GraphDFModel.initialize(variant, panel, graph, lookback=lookback, seed=seed)
    return model, panel, graph


def randomize(model, seed=1, scale=0.3):
    rng = np.random.default_rng(seed)
    for _, arr in pm.named_arrays(model.params):
        arr[...] = scale * rng.standard_normal(arr.shape)


class TestGlobalFactors:
    def test_zero_params_give_bias_rows(self):
        model, panel, _ = small_model()
        for _, arr in pm.named_arrays(model.params):
            arr[...] = 0.0
        model.params.factor_b[...] = np.array([0.5, -1.0, 2.0])
        state = model.zero_state()
        y = np.random.default_rng(0).random((6, 6))
        _, s_t = global_factors(model.params, model.bundle, state.global_state, y)
        np.testing.assert_allclose(ad.value_of(s_t),
                                   np.tile([0.5, -1.0, 2.0], (6, 1)), atol=1e-12)

    def test_projection_identity_column(self):
        model, panel, _ = small_model(VariantConfig(k_factors=1, q_hidden=3, r_hidden=2))
        randomize(model)
        model.params.factor_w[...] = np.array([[1.0], [0.0], [0.0]])
        model.params.factor_b[...] = 0.0
        state = model.zero_state()
        y = np.random.default_rng(1).random((6, 6))
        new_state, s_t = global_factors(model.params, model.bundle, state.global_state, y)
        np.testing.assert_allclose(ad.value_of(s_t)[:, 0],
                                   ad.value_of(new_state.hidden)[:, 0], atol=1e-12)

    def test_matches_straight_line_reimplementation(self):
        # Re-derive one graph-LSTM step + projection with raw numpy only.
        model, panel, _ = small_model()
        randomize(model, seed=7)
        rng = np.random.default_rng(3)
        y = rng.random((6, 6))
        h0 = 0.2 * rng.standard_normal((6, 4))
        c0 = 0.2 * rng.standard_normal((6, 4))
        state = CellState(hidden=h0.copy(), cell=c0.copy())
        _, s_t = global_factors(model.params, model.bundle, state, y)

        cell = model.params.global_cell
        yh = np.concatenate([y, h0], axis=1)
        conv = lambda theta: yh @ theta[:, :, 0]  # one-term filter: channel mixing
        gate_i = expit(conv(cell.theta_i) + cell.w_i * c0 + cell.b_i)
        gate_f = expit(conv(cell.theta_f) + cell.w_f * c0 + cell.b_f)
        c1 = gate_f * c0 + gate_i * np.tanh(conv(cell.theta_c) + cell.b_c)
        gate_o = expit(conv(cell.theta_o) + cell.w_o * c1 + cell.b_o)
        h1 = gate_o * np.tanh(c1)
        expected = h1 @ model.params.factor_w + model.params.factor_b
        np.testing.assert_allclose(ad.value_of(s_t), expected, atol=1e-12)

    def test_plain_global_pools_before_projection(self):
        variant = VariantConfig(global_kind="plain_rnn", local_kind="plain_rnn",
                                k_factors=2, q_hidden=3, r_hidden=2)
        model, panel, _ = small_model(variant)
        randomize(model, seed=5)
        state = model.zero_state()
        y = np.random.default_rng(2).random((6, 6))
        new_state, s_t = global_factors(model.params, model.bundle, state.global_state, y)
        assert ad.value_of(s_t).shape == (1, 2)
        pooled = y.mean(axis=0, keepdims=True)
        manual = lstm_by_hand(model.params.global_cell, pooled)
        np.testing.assert_allclose(ad.value_of(new_state.hidden), manual, atol=1e-12)


def lstm_by_hand(cell: DenseLstmParams, x, h=None, c=None):
    h = np.zeros((x.shape[0], cell.b_i.shape[0])) if h is None else h
    c = np.zeros_like(h) if c is None else c
    xh = np.concatenate([x, h], axis=1)
    i = expit(xh @ cell.w_i + cell.b_i)
    f = expit(xh @ cell.w_f + cell.b_f)
    c1 = f * c + i * np.tanh(xh @ cell.w_c + cell.b_c)
    o = expit(xh @ cell.w_o + cell.b_o)
    return o * np.tanh(c1)


class TestFixedEffect:
    def test_hand_dot_product(self):
        s = np.array([[1.0, -1.0]])
        emb = np.array([[0.5, 2.0]])
        assert fixed_effect(s, emb, 0) == pytest.approx(-1.5)

    def test_zero_embedding(self):
        s = np.random.default_rng(0).random((3, 4))
        emb = np.zeros((3, 4))
        assert fixed_effect(s, emb, 1) == 0.0

    def test_one_hot_selects(self):
        rng = np.random.default_rng(1)
        s = rng.random((3, 4))
        emb = np.zeros((3, 4))
        emb[2, 3] = 1.0
        assert fixed_effect(s, emb, 2) == pytest.approx(s[2, 3])


class TestLocalInputSignal:
    def test_isolated_node(self):
        panel, _ = synth_panel(SynthConfig(n_nodes=4, n_steps=10, n_communities=2, seed=0))
        sig = local_input_signal(panel, 2, [2], t=3)
        assert sig.values.shape == (1, 6)
        assert sig.values[0, 0] == panel.targets[2, 2]
        np.testing.assert_array_equal(sig.values[0, 1:], panel.covariates[2, :, 3])

    def test_clique_rows(self):
        panel, graph = synth_panel(SynthConfig(n_nodes=4, n_steps=10, n_communities=2, seed=0))
        bundle = laplacian_bundle(graph)
        from graphdf.graph_build import node_neighborhood
        indices, _ = node_neighborhood(bundle, graph, 1)
        sig = local_input_signal(panel, 1, indices, t=5)
        assert sig.values.shape == (len(indices), 6)
        np.testing.assert_array_equal(sig.values[:, 0], panel.targets[indices, 4])

    def test_row_order_matches_neighborhood(self):
        graph = Graph(n=3, edges=((0, 1, 1.0), (0, 2, 1.0), (1, 2, 1.0)))
        bundle = laplacian_bundle(graph)
        from graphdf.graph_build import node_neighborhood
        indices, _ = node_neighborhood(bundle, graph, 1)
        assert indices == [1, 0, 2]
        panel, _ = synth_panel(SynthConfig(n_nodes=3, n_steps=8, n_communities=1, seed=1))
        sig = local_input_signal(panel, 1, indices, t=2)
        np.testing.assert_array_equal(sig.values[0, 0], panel.targets[1, 1])
        np.testing.assert_array_equal(sig.values[1, 0], panel.targets[0, 1])

    def test_no_lag_at_step_zero(self):
        panel, _ = synth_panel(SynthConfig(n_nodes=3, n_steps=8, n_communities=1, seed=1))
        with pytest.raises(NoLag):
            local_input_signal(panel, 0, [0], t=0)


class TestLocalSigma:
    def test_softplus_zero(self):
        model, panel, _ = small_model()
        i = 0
        cell = model.params.local_cells[i]
        for _, arr in pm.named_arrays(cell):
            arr[...] = 0.0
        ctx = model.contexts[i]
        state = CellState.zeros(len(ctx.indices), 3)
        y = np.zeros((len(ctx.indices), 6))
        _, sigma = local_sigma(cell, np.zeros(3), 0.0, ctx.sub_scaled, state, y)
        assert float(ad.value_of(sigma)) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_softplus_asymptotes(self):
        model, _, _ = small_model()
        ctx = model.contexts[0]
        cell = model.params.local_cells[0]
        for _, arr in pm.named_arrays(cell):
            arr[...] = 0.0
        state = CellState.zeros(len(ctx.indices), 3)
        y = np.zeros((len(ctx.indices), 6))
        _, sig_hi = local_sigma(cell, np.zeros(3), 50.0, ctx.sub_scaled, state, y)
        assert float(ad.value_of(sig_hi)) == pytest.approx(50.0, abs=1e-6)
        _, sig_lo = local_sigma(cell, np.zeros(3), -50.0, ctx.sub_scaled, state, y)
        value = float(ad.value_of(sig_lo))
        assert value > 0.0
        assert value == pytest.approx(math.exp(-50.0), rel=1e-6)


class TestPredictStep:
    def test_sigma_zero_sample_equals_mean(self):
        model, panel, _ = small_model()
        randomize(model, seed=11)
        state, z_lag = model.begin(panel)
        x_t = panel.covariates[:, :, -1]
        rng = np.random.default_rng(0)
        _, mean, sigma, sample = predict_step(model, state, z_lag, x_t, rng=rng,
                                              force_sigma_zero=True)
        np.testing.assert_array_equal(sample, mean)
        np.testing.assert_array_equal(sigma, 0.0)

    def test_seeded_samples_reproducible(self):
        model, panel, _ = small_model()
        randomize(model, seed=11)
        state, z_lag = model.begin(panel)
        x_t = panel.covariates[:, :, -1]
        _, _, _, s1 = predict_step(model, state, z_lag, x_t,
                                   rng=np.random.default_rng(42))
        _, _, _, s2 = predict_step(model, state, z_lag, x_t,
                                   rng=np.random.default_rng(42))
        np.testing.assert_array_equal(s1, s2)

    def test_sample_mean_converges_to_mean(self):
        model, panel, _ = small_model(n_nodes=3)
        randomize(model, seed=13)
        state, z_lag = model.begin(panel)
        x_t = panel.covariates[:, :, -1]
        _, mean, sigma, _ = predict_step(model, state, z_lag, x_t)
        draws = 100_000
        rng = np.random.default_rng(7)
        eps = rng.standard_normal((draws, 3))
        samples = mean[None, :] + sigma[None, :] * eps
        tol = 4.0 * sigma / math.sqrt(draws)
        assert np.all(np.abs(samples.mean(axis=0) - mean) <= tol + 1e-12)

    def test_sigma_always_positive(self):
        model, panel, _ = small_model()
        randomize(model, seed=17, scale=1.5)
        state, z_lag = model.begin(panel)
        x_t = panel.covariates[:, :, -1]
        _, _, sigma, _ = predict_step(model, state, z_lag, x_t)
        assert np.all(sigma > 0)


class TestStructuralEquivalence:
    def test_gg_equals_plain_variants_on_edgeless_graph(self):
        """With no edges, one-term filters, zero peepholes and identical node
        series, the graph cells reduce to the plain cells exactly."""
        panel, _ = synth_panel(SynthConfig(n_nodes=5, n_steps=20, n_communities=1,
                                           noise_sigma=0.0, seed=8))
        graph = Graph(n=5, edges=())
        gg = VariantConfig.from_name("gg", k_factors=2, q_hidden=3, r_hidden=2)
        rr = VariantConfig(global_kind="plain_rnn", local_kind="plain_rnn",
                           k_factors=2, q_hidden=3, r_hidden=2)
        m_graph = GraphDFModel.initialize(gg, panel, graph, lookback=6, seed=0)
        m_plain = GraphDFModel.initialize(rr, panel, graph, lookback=6, seed=0)
        randomize(m_graph, seed=21)

        gcell = m_graph.params.global_cell
        gcell.w_i[...] = 0.0
        gcell.w_f[...] = 0.0
        gcell.w_o[...] = 0.0
        m_plain.params.global_cell = DenseLstmParams(
            w_i=gcell.theta_i[:, :, 0].copy(), w_f=gcell.theta_f[:, :, 0].copy(),
            w_c=gcell.theta_c[:, :, 0].copy(), w_o=gcell.theta_o[:, :, 0].copy(),
            b_i=gcell.b_i.copy(), b_f=gcell.b_f.copy(),
            b_c=gcell.b_c.copy(), b_o=gcell.b_o.copy())
        for i in range(5):
            lcell = m_graph.params.local_cells[i]
            lcell.w_i[...] = 0.0
            lcell.w_f[...] = 0.0
            lcell.w_o[...] = 0.0
            m_plain.params.local_cells[i] = DenseLstmParams(
                w_i=lcell.theta_i[:, :, 0].copy(), w_f=lcell.theta_f[:, :, 0].copy(),
                w_c=lcell.theta_c[:, :, 0].copy(), w_o=lcell.theta_o[:, :, 0].copy(),
                b_i=lcell.b_i.copy(), b_f=lcell.b_f.copy(),
                b_c=lcell.b_c.copy(), b_o=lcell.b_o.copy())
        for name in ("factor_w", "factor_b", "embeddings", "head_w", "head_b"):
            getattr(m_plain.params, name)[...] = getattr(m_graph.params, name)
        m_plain.scale_offset[...] = m_graph.scale_offset
        m_plain.scale_width[...] = m_graph.scale_width

        z_scaled = m_graph.scale_targets(panel.targets)
        _, out_g = m_graph.unroll(m_graph.params, z_scaled, panel.covariates, 1, 8)
        _, out_p = m_plain.unroll(m_plain.params, z_scaled, panel.covariates, 1, 8)
        for (t1, c1, s1), (t2, c2, s2) in zip(out_g, out_p):
            np.testing.assert_allclose(ad.value_of(c1), ad.value_of(c2), atol=1e-10)
            np.testing.assert_allclose(ad.value_of(s1), ad.value_of(s2), atol=1e-10)


class TestCheckpoint:
    @pytest.mark.parametrize("name,cell", [("gg", "gcrn"), ("gr", "dcgru"), ("rg", "gcrn")])
    def test_round_trip(self, tmp_path, name, cell):
        variant = VariantConfig.from_name(name, cell=cell, k_factors=2,
                                          q_hidden=3, r_hidden=2)
        model, panel, _ = small_model(variant)
        randomize(model, seed=31)
        path = tmp_path / "model.json"
        save_model(model, str(path))
        loaded = load_model(str(path))
        assert pm.checksum(loaded.params) == pm.checksum(model.params)
        state_a, lag_a = model.begin(panel)
        state_b, lag_b = loaded.begin(panel)
        x_t = panel.covariates[:, :, -1]
        _, mean_a, sig_a = model.advance(state_a, lag_a, x_t)
        _, mean_b, sig_b = loaded.advance(state_b, lag_b, x_t)
        np.testing.assert_array_equal(mean_a, mean_b)
        np.testing.assert_array_equal(sig_a, sig_b)

    def test_checksum_detects_corruption(self, tmp_path):
        model, _, _ = small_model()
        path = tmp_path / "model.json"
        save_model(model, str(path))
        import json
        payload = json.loads(path.read_text())
        payload["params"]["factor_b"][0] += 1.0
        path.write_text(json.dumps(payload))
        with pytest.raises(InvalidValue):
            load_model(str(path))


class TestVariantConfig:
    def test_named_variants(self):
        gg = VariantConfig.from_name("gg")
        assert gg.global_kind == "graph_gcrn" and gg.local_kind == "graph_gcrn"
        gr = VariantConfig.from_name("gr", cell="dcgru")
        assert gr.global_kind == "graph_dcgru" and gr.local_kind == "plain_rnn"
        rg = VariantConfig.from_name("rg")
        assert rg.global_kind == "plain_rnn" and rg.local_kind == "graph_gcrn"

    def test_defaults_match_reference_settings(self):
        v = VariantConfig()
        assert (v.k_factors, v.q_hidden, v.r_hidden, v.hops, v.cheb_order) == \
            (10, 50, 5, 1, 1)

    def test_rejects_unknown(self):
        with pytest.raises(InvalidValue):
            VariantConfig.from_name("xx")
        with pytest.raises(InvalidValue):
            VariantConfig(global_kind="nope")


class TestSharedLocalMode:
    def test_shared_local_trains_and_forecasts(self):
        from graphdf.evaluation import point_forecast
        from graphdf.training import TrainConfig, train
        panel, graph = synth_panel(SynthConfig(n_nodes=6, n_steps=25, n_communities=2,
                                               noise_sigma=0.05, seed=6))
        variant = VariantConfig(k_factors=2, q_hidden=3, r_hidden=2, shared_local=True)
        model, report = train(variant, panel, graph, TrainConfig(epochs=8, seed=6))
        assert len(model.params.local_cells) == 1
        assert all(np.isfinite(report.losses))
        assert point_forecast(model, panel, tau=2).shape == (6, 2)

    def test_shared_local_gradients(self):
        from graphdf.training import finite_diff_check
        panel, graph = synth_panel(SynthConfig(n_nodes=4, n_steps=7, n_communities=2,
                                               noise_sigma=0.05, seed=2))
        variant = VariantConfig(k_factors=2, q_hidden=2, r_hidden=2, shared_local=True)
        model = GraphDFModel.initialize(variant, panel, graph, lookback=5, seed=2)
        randomize(model, seed=41)
        report = finite_diff_check(model, panel)
        assert report.passed, report.worst()

    def test_shared_row_peepholes_gradients(self):
        from graphdf.training import finite_diff_check
        panel, graph = synth_panel(SynthConfig(n_nodes=4, n_steps=7, n_communities=2,
                                               noise_sigma=0.05, seed=9))
        variant = VariantConfig(k_factors=2, q_hidden=2, r_hidden=2,
                                node_indexed_peepholes=False)
        model = GraphDFModel.initialize(variant, panel, graph, lookback=5, seed=9)
        randomize(model, seed=43)
        assert model.params.global_cell.w_i.shape == (1, 2)
        report = finite_diff_check(model, panel)
        assert report.passed, report.worst()
