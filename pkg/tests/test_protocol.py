import numpy as np
import pytest

from colrel.objectives import ensemble_from_parts, gradient, make_quadratic_ensemble
from colrel.protocol import (
    AlgorithmVariant,
    ChannelRealization,
    DivergenceError,
    EtaSchedule,
    SimulationConfig,
    local_round,
    ps_aggregate,
    relay_combine,
    run_simulation,
    sample_channel,
    spawn_streams,
)
from colrel.topology import build_graph, standard_topology
from colrel.weights import RelayWeights, identity_weights, initial_weights, optimize_weights

from conftest import HET_RING_P


def scalar_ensemble(q, b, sigma=0.0):
    return ensemble_from_parts(
        Q=np.array([[[float(q)]]]), b=np.array([[float(b)]]),
        mu=float(q), L=float(q), sigma=sigma,
    )


def channel(bits):
    tau = np.asarray(bits, dtype=np.int64)
    tau.flags.writeable = False
    return ChannelRealization(tau=tau)


class TestLocalRound:
    def test_single_exact_gradient_step(self):
        ens = make_quadratic_ensemble(n=3, d=4, mu=0.5, L=2.0, heterogeneity=1.0, sigma=0.0, seed=1)
        x = np.linspace(0.0, 1.0, ens.d)
        rng = np.random.default_rng(0)
        delta = local_round(ens, 2, x, eta_r=0.1, T=1, rng=rng)
        np.testing.assert_allclose(delta, -0.1 * gradient(ens, 2, x), atol=1e-15)

    def test_stationary_at_local_minimizer(self):
        ens = make_quadratic_ensemble(n=2, d=3, mu=1.0, L=2.0, heterogeneity=1.0, sigma=0.0, seed=2)
        delta = local_round(ens, 0, ens.b[0], eta_r=0.2, T=5, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(delta, 0.0)

    def test_three_step_hand_iteration(self):
        ens = scalar_ensemble(q=1.0, b=0.0)
        delta = local_round(ens, 0, np.array([1.0]), eta_r=0.1, T=3, rng=np.random.default_rng(0))
        assert delta[0] == pytest.approx(0.9**3 - 1.0, abs=1e-15)

    def test_divergence_error_carries_client_and_step(self):
        ens = scalar_ensemble(q=1.0, b=0.0)
        with pytest.raises(DivergenceError) as exc_info:
            local_round(ens, 0, np.array([1e300]), eta_r=1e300, T=4, rng=np.random.default_rng(0))
        assert exc_info.value.client == 0
        assert exc_info.value.local_step >= 0

    def test_invalid_arguments(self):
        ens = scalar_ensemble(q=1.0, b=0.0)
        with pytest.raises(ValueError):
            local_round(ens, 0, np.array([1.0]), eta_r=0.1, T=0, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            local_round(ens, 0, np.array([1.0]), eta_r=0.0, T=1, rng=np.random.default_rng(0))


class TestRelayCombine:
    def test_identity_weights_pass_through(self, rng):
        g = build_graph(4, standard_topology("ring", 4, 1), [0.5] * 4)
        deltas = rng.normal(size=(4, 3))
        for i in range(4):
            np.testing.assert_array_equal(
                relay_combine(g, identity_weights(4), deltas, i), deltas[i]
            )

    def test_two_client_halves(self):
        g = build_graph(2, [(0, 1)], [1.0, 1.0])
        w = RelayWeights(np.full((2, 2), 0.5))
        deltas = np.array([[2.0], [4.0]])
        np.testing.assert_array_equal(relay_combine(g, w, deltas, 0), [3.0])

    def test_matches_dense_matmul_oracle(self, rng):
        g = build_graph(3, standard_topology("ring", 3, 1), [0.1, 0.5, 0.9])
        w = optimize_weights(g).weights
        deltas = rng.normal(size=(3, 5))
        dense = w.matrix @ deltas
        for i in range(3):
            np.testing.assert_allclose(relay_combine(g, w, deltas, i), dense[i], rtol=1e-13)

    def test_only_neighborhood_contributes(self, rng):
        g = build_graph(3, [(0, 1)], [1.0, 1.0, 1.0])
        w = initial_weights(g)
        deltas = rng.normal(size=(3, 2))
        poisoned = deltas.copy()
        poisoned[2] = 1e9  # client 2 is outside the closed neighborhood of 0
        np.testing.assert_array_equal(
            relay_combine(g, w, deltas, 0), relay_combine(g, w, poisoned, 0)
        )


class TestSampleChannel:
    def test_perfect_uplinks(self):
        g = build_graph(3, [], [1.0, 1.0, 1.0])
        tau = sample_channel(g, np.random.default_rng(0))
        np.testing.assert_array_equal(tau.tau, 1)
        assert tau.num_connected == 3

    def test_blocked_uplinks(self):
        g = build_graph(3, [], [0.0, 0.0, 0.0])
        tau = sample_channel(g, np.random.default_rng(0))
        np.testing.assert_array_equal(tau.tau, 0)

    def test_monte_carlo_mean(self):
        g = build_graph(4, [], [0.2, 0.2, 0.2, 0.2])
        rng = np.random.default_rng(99)
        total = np.zeros(4)
        draws = 100_000
        for _ in range(draws):
            total += sample_channel(g, rng).tau
        np.testing.assert_allclose(total / draws, 0.2, atol=0.005)


class TestPsAggregate:
    def test_all_blocked_leaves_model_unchanged(self, rng):
        x = rng.normal(size=4)
        relayed = rng.normal(size=(3, 4))
        for kind in ("fedavg_blind_dropout", "fedavg_nonblind_dropout"):
            out = ps_aggregate(x, relayed, channel([0, 0, 0]), AlgorithmVariant(kind))
            np.testing.assert_array_equal(out, x)

    def test_colrel_with_identity_equals_no_dropout_when_all_connected(self, rng):
        x = rng.normal(size=3)
        relayed = rng.normal(size=(4, 3))
        a = ps_aggregate(
            x, relayed, channel([1, 1, 1, 1]), AlgorithmVariant.colrel(identity_weights(4))
        )
        b = ps_aggregate(x, relayed, channel([1, 1, 1, 1]), AlgorithmVariant.fedavg_no_dropout())
        np.testing.assert_array_equal(a, b)

    def test_two_client_arithmetic(self):
        x = np.array([0.0])
        relayed = np.array([[2.0], [4.0]])
        tau = channel([1, 0])
        blind = ps_aggregate(
            x, relayed, tau, AlgorithmVariant.colrel(identity_weights(2))
        )
        nonblind = ps_aggregate(x, relayed, tau, AlgorithmVariant.fedavg_nonblind_dropout())
        assert blind[0] == pytest.approx(1.0, abs=0.0)
        assert nonblind[0] == pytest.approx(2.0, abs=0.0)

    def test_no_dropout_ignores_channel(self, rng):
        x = rng.normal(size=2)
        relayed = rng.normal(size=(3, 2))
        a = ps_aggregate(x, relayed, channel([0, 0, 0]), AlgorithmVariant.fedavg_no_dropout())
        b = ps_aggregate(x, relayed, channel([1, 1, 1]), AlgorithmVariant.fedavg_no_dropout())
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a, x + relayed.mean(axis=0), rtol=1e-15)

    def test_momentum_recursion(self, rng):
        x = np.zeros(2)
        relayed = rng.normal(size=(3, 2))
        tau = channel([1, 1, 1])
        beta = 0.8
        upd = relayed.sum(axis=0) / 3.0
        x1 = ps_aggregate(x, relayed, tau, AlgorithmVariant.fedavg_no_dropout(),
                          momentum=beta, momentum_buffer=None)
        np.testing.assert_allclose(x1, upd, rtol=1e-15)
        buf = x1 - x
        x2 = ps_aggregate(x1, relayed, tau, AlgorithmVariant.fedavg_no_dropout(),
                          momentum=beta, momentum_buffer=buf)
        np.testing.assert_allclose(x2, x1 + beta * buf + upd, rtol=1e-14)

    def test_blindness_permutation_invariance(self, rng):
        # the blind server must not be able to exploit client identities:
        # permuting (update, channel bit) pairs together cannot change it
        relayed = rng.normal(size=(5, 3))
        bits = np.array([1, 0, 1, 1, 0])
        x = rng.normal(size=3)
        perm = rng.permutation(5)
        for kind in ("fedavg_blind_dropout",):
            base = ps_aggregate(x, relayed, channel(bits), AlgorithmVariant(kind))
            shuffled = ps_aggregate(x, relayed[perm], channel(bits[perm]), AlgorithmVariant(kind))
            np.testing.assert_allclose(base, shuffled, rtol=1e-14)

    def test_degenerate_collaboration_matches_rescaled_partial_participation(self, rng):
        # no edges, homogeneous p, own weight 1/p: the classical rescaled
        # partial-participation update x + (1/n) sum tau_i delta_i / p
        p = 0.5
        n = 4
        g = build_graph(n, [], [p] * n)
        w = RelayWeights(np.diag([1.0 / p] * n))
        deltas = rng.normal(size=(n, 3))
        relayed = np.stack([relay_combine(g, w, deltas, i) for i in range(n)])
        tau = sample_channel(g, np.random.default_rng(5))
        out = ps_aggregate(np.zeros(3), relayed, tau, AlgorithmVariant.colrel(w))
        expected = (tau.tau[:, None] * deltas).sum(axis=0) / (n * p)
        np.testing.assert_allclose(out, expected, rtol=1e-13)


class TestEtaSchedule:
    def test_constant(self):
        sched = EtaSchedule.constant(0.05)
        assert sched.rate(0, 8, 0.5) == 0.05
        assert sched.rate(100, 8, 0.5) == 0.05

    def test_decaying_values(self):
        sched = EtaSchedule.theorem()
        assert sched.rate(0, 8, 0.5) == pytest.approx(8.0)
        assert sched.rate(3, 8, 0.5) == pytest.approx(4.0 / (0.5 * 25.0))

    def test_validation(self):
        with pytest.raises(ValueError):
            EtaSchedule.constant(0.0)
        with pytest.raises(ValueError):
            EtaSchedule("theorem", 0.1)
        with pytest.raises(ValueError):
            EtaSchedule("warmup")


class TestAlgorithmVariant:
    def test_colrel_requires_weights(self):
        with pytest.raises(ValueError):
            AlgorithmVariant("colrel")

    def test_baselines_reject_weights(self):
        with pytest.raises(ValueError):
            AlgorithmVariant("fedavg_no_dropout", identity_weights(2))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            AlgorithmVariant("gossip")


def run_config(T=4, R=6, eta=0.05, **kwargs):
    return SimulationConfig(T=T, R=R, eta=EtaSchedule.constant(eta), **kwargs)


class TestRunSimulation:
    def test_deterministic_traces(self, het_ring_graph):
        ens = make_quadratic_ensemble(n=10, d=6, mu=0.5, L=3.0, heterogeneity=1.0, sigma=0.8, seed=3)
        w = optimize_weights(het_ring_graph).weights
        variant = AlgorithmVariant.colrel(w)
        sim = run_config(record_tau=True)
        a = run_simulation(ens, het_ring_graph, variant, sim, seed=12)
        b = run_simulation(ens, het_ring_graph, variant, sim, seed=12)
        assert [(r.r, r.suboptimality, r.tau, r.eta) for r in a] == [
            (r.r, r.suboptimality, r.tau, r.eta) for r in b
        ]

    def test_geometric_decay_of_exact_descent(self):
        # sigma = 0, perfect uplinks, one local step: plain gradient descent
        n = 4
        g = build_graph(n, [], [1.0] * n)
        ens = make_quadratic_ensemble(n=n, d=5, mu=1.0, L=2.0, heterogeneity=0.0, sigma=0.0, seed=6)
        eta = 0.05
        recs = run_simulation(
            ens, g, AlgorithmVariant.fedavg_no_dropout(), run_config(T=1, R=30, eta=eta), seed=0
        )
        ratio_bound = (1.0 - eta * ens.mu) ** 2 + 1e-12
        subs = [r.suboptimality for r in recs]
        assert all(b <= a * ratio_bound for a, b in zip(subs, subs[1:]))

    def test_colrel_identity_perfect_uplinks_bitwise_equals_no_dropout(self):
        g = build_graph(5, standard_topology("ring", 5, 1), [1.0] * 5)
        ens = make_quadratic_ensemble(n=5, d=4, mu=0.5, L=2.0, heterogeneity=1.0, sigma=0.7, seed=9)
        sim = run_config(R=10)
        a = run_simulation(ens, g, AlgorithmVariant.colrel(identity_weights(5)), sim, seed=4)
        b = run_simulation(ens, g, AlgorithmVariant.fedavg_no_dropout(), sim, seed=4)
        assert [r.suboptimality for r in a] == [r.suboptimality for r in b]

    def test_composition_matches_per_client_operations(self):
        g = build_graph(3, standard_topology("ring", 3, 1), [0.3, 0.7, 0.9])
        ens = make_quadratic_ensemble(n=3, d=4, mu=0.5, L=2.0, heterogeneity=1.0, sigma=0.6, seed=10)
        w = optimize_weights(g).weights
        T, R, eta, seed = 3, 5, 0.05, 21
        recs = run_simulation(
            ens, g, AlgorithmVariant.colrel(w), run_config(T=T, R=R, eta=eta), seed=seed
        )

        client_rngs, channel_rng = spawn_streams(seed, g.n)
        x = np.zeros(ens.d)
        manual = []
        for _ in range(R):
            deltas = np.stack(
                [local_round(ens, i, x, eta, T, client_rngs[i]) for i in range(g.n)]
            )
            relayed = np.stack([relay_combine(g, w, deltas, i) for i in range(g.n)])
            tau = sample_channel(g, channel_rng)
            x = ps_aggregate(x, relayed, tau, AlgorithmVariant.colrel(w))
            manual.append(float(((x - ens.x_star) ** 2).sum()))

        np.testing.assert_allclose([r.suboptimality for r in recs], manual, rtol=1e-9)

    def test_paired_seeds_couple_channel_across_variants(self, het_ring_graph):
        ens = make_quadratic_ensemble(n=10, d=3, mu=0.5, L=2.0, sigma=0.5, seed=0)
        sim = run_config(record_tau=True)
        a = run_simulation(ens, het_ring_graph, AlgorithmVariant.fedavg_blind_dropout(), sim, seed=7)
        b = run_simulation(
            ens, het_ring_graph, AlgorithmVariant.fedavg_nonblind_dropout(), sim, seed=7
        )
        assert [r.tau for r in a] == [r.tau for r in b]

    def test_divergence_error_carries_round(self):
        ens = make_quadratic_ensemble(n=2, d=2, mu=1.0, L=2.0, sigma=0.0, seed=0)
        g = build_graph(2, [], [1.0, 1.0])
        with pytest.raises(DivergenceError) as exc_info:
            run_simulation(
                ens, g, AlgorithmVariant.fedavg_no_dropout(), run_config(T=8, R=400, eta=500.0), seed=0
            )
        assert exc_info.value.round_index is not None

    def test_colrel_rejects_infeasible_weights(self, het_ring_graph):
        ens = make_quadratic_ensemble(n=10, d=3, mu=0.5, L=2.0, seed=0)
        with pytest.raises(ValueError, match="feasible"):
            run_simulation(
                ens,
                het_ring_graph,
                AlgorithmVariant.colrel(identity_weights(10)),  # biased under p < 1
                run_config(),
                seed=0,
            )

    def test_momentum_accelerates_but_stays_finite(self):
        g = build_graph(4, standard_topology("fully_connected", 4), [1.0] * 4)
        ens = make_quadratic_ensemble(n=4, d=5, mu=0.5, L=2.0, heterogeneity=0.5, sigma=0.0, seed=2)
        plain = run_simulation(
            ens, g, AlgorithmVariant.fedavg_no_dropout(), run_config(T=1, R=25, eta=0.05), seed=0
        )
        with_momentum = run_simulation(
            ens,
            g,
            AlgorithmVariant.fedavg_no_dropout(),
            SimulationConfig(T=1, R=25, eta=EtaSchedule.constant(0.05), momentum=0.6),
            seed=0,
        )
        assert with_momentum[-1].suboptimality < plain[-1].suboptimality
        assert np.isfinite(with_momentum[-1].suboptimality)

    def test_records_expose_model_when_requested(self):
        g = build_graph(2, [], [1.0, 1.0])
        ens = make_quadratic_ensemble(n=2, d=3, mu=1.0, L=2.0, sigma=0.0, seed=1)
        recs = run_simulation(
            ens,
            g,
            AlgorithmVariant.fedavg_no_dropout(),
            SimulationConfig(T=1, R=2, eta=EtaSchedule.constant(0.1), record_model=True),
            seed=0,
        )
        assert recs[0].x_global is not None
        assert recs[0].x_global.shape == (ens.d,)


class TestAggregateStatistics:
    def test_unbiased_effective_coefficients(self, het_ring_graph):
        # every client's update must arrive with expected total weight one
        w = optimize_weights(het_ring_graph).weights
        rng = np.random.default_rng(31)
        draws = 20000
        acc = np.zeros(het_ring_graph.n)
        acc_sq = np.zeros(het_ring_graph.n)
        for _ in range(draws):
            tau = sample_channel(het_ring_graph, rng).tau.astype(float)
            c = tau @ w.matrix
            acc += c
            acc_sq += c * c
        mean = acc / draws
        var = acc_sq / draws - mean**2
        stderr = np.sqrt(var / draws)
        assert np.all(np.abs(mean - 1.0) <= 4.0 * np.maximum(stderr, 1e-12))

    def test_aggregate_variance_tracks_objective(self, het_ring_graph):
        # identical unit updates: the aggregate's variance is S / n^2
        from colrel.weights import variance_objective

        w = optimize_weights(het_ring_graph).weights
        n = het_ring_graph.n
        u = np.array([1.0])
        deltas = np.tile(u, (n, 1))
        relayed = np.stack([relay_combine(het_ring_graph, w, deltas, i) for i in range(n)])
        rng = np.random.default_rng(17)
        draws = 200_000
        variant = AlgorithmVariant.colrel(w)
        values = np.empty(draws)
        x0 = np.zeros(1)
        for k in range(draws):
            tau = sample_channel(het_ring_graph, rng)
            values[k] = ps_aggregate(x0, relayed, tau, variant)[0]
        expected = variance_objective(het_ring_graph, w) / n**2
        assert values.var() == pytest.approx(expected, rel=0.05)
