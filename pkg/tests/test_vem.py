import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestor.exceptions import (
    ConfigurationError,
    DegeneracyError,
    InvalidInputError,
    TemperingError,
)
from nestor.pln import CountDataset, PlnFit, fit_pln
from nestor.tree_algebra import (
    LOG_WEIGHT_FLOOR,
    EdgeWeightMatrix,
    edge_marginals,
    log_partition,
)
from nestor.vem import (
    VemConfig,
    VemState,
    alpha_upper_bound,
    compute_ssd,
    elbo,
    elbo_terms,
    expected_precision,
    growth_coefficient,
    run_vem,
    tempered_log_weights,
    update_beta,
    update_beta_tilde,
    update_hidden,
    update_omega,
)


def chain_instance(seed, p, n, rho=0.6, theta=0.7):
    """Counts whose latent layer is a correlation chain 1-2-...-p."""
    rng = np.random.default_rng(seed)
    R = rho ** np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    u = rng.standard_normal((n, p)) @ np.linalg.cholesky(R).T
    y = rng.poisson(np.exp(theta + u))
    fit = fit_pln(CountDataset(y))
    init = SimpleNamespace(
        beta0=EdgeWeightMatrix.from_log_weights(np.zeros((p, p))),
        M_hidden0=np.zeros((n, 0)),
        R0=np.corrcoef(fit.M_obs.T),
    )
    return fit, init, u


class TestVemConfig:
    def test_defaults(self):
        cfg = VemConfig()
        assert cfg.r == 0 and cfg.alpha == 0.1
        assert cfg.eps == 1e-3 and cfg.max_iter == 100

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            VemConfig(r=-1)
        with pytest.raises(ConfigurationError):
            VemConfig(alpha=0.0)
        with pytest.raises(ConfigurationError):
            VemConfig(alpha=1.5)
        with pytest.raises(ConfigurationError):
            VemConfig(eps=-1e-3)
        with pytest.raises(ConfigurationError):
            VemConfig(max_iter=0)


class TestComputeSsd:
    def test_zero_means_unit_variances(self):
        n, q = 12, 4
        ssd = compute_ssd(np.zeros((n, q)), np.ones((n, q)))
        np.testing.assert_allclose(ssd, n * np.eye(q))

    def test_identical_columns_rejected(self, rng):
        m = rng.standard_normal((20, 1))
        M = np.column_stack([m, m, rng.standard_normal((20, 1))])
        with pytest.raises(DegeneracyError, match="collinear"):
            compute_ssd(M, np.full((20, 3), 1e-15))

    def test_diagonal_exactly_n(self, rng):
        M = rng.standard_normal((30, 5)) * 2.0
        S = rng.uniform(0.1, 3.0, (30, 5))
        ssd = compute_ssd(M, S)
        np.testing.assert_array_equal(np.diag(ssd), 30.0)
        np.testing.assert_allclose(ssd, ssd.T)
        assert np.linalg.eigvalsh(ssd).min() > -1e-8

    def test_rescale_preserves_correlations(self, rng):
        M = rng.standard_normal((50, 4))
        S = rng.uniform(0.5, 1.5, (50, 4))
        raw = M.T @ M + np.diag(S.sum(0))
        d = np.sqrt(np.diag(raw))
        want = raw / d[:, None] / d[None, :]
        got = compute_ssd(M, S) / 50.0
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_shape_and_positivity_validation(self):
        with pytest.raises(InvalidInputError):
            compute_ssd(np.zeros((5, 3)), np.ones((5, 2)))
        with pytest.raises(InvalidInputError):
            compute_ssd(np.zeros((5, 3)), np.zeros((5, 3)))


class TestUpdateOmega:
    def test_zero_ratio(self):
        est = update_omega(10.0 * np.eye(4))
        np.testing.assert_allclose(est.omega_offdiag, 0.0)
        np.testing.assert_allclose(est.edge_logdet, 0.0)

    def test_half_ratio_worked_values(self):
        n, q = 10, 3
        ssd = np.full((q, q), 0.5 * n)
        np.fill_diagonal(ssd, n)
        est = update_omega(ssd)
        np.testing.assert_allclose(est.omega_offdiag[0, 1], -2.0 / 3.0, atol=1e-14)
        np.testing.assert_allclose(est.edge_logdet[0, 1], math.log(0.75), atol=1e-14)
        np.testing.assert_allclose(est.r_offdiag[0, 1], 0.5)

    def test_star_tree_center_diagonal(self):
        n, q = 10, 4
        ssd = np.full((q, q), 0.5 * n)
        np.fill_diagonal(ssd, n)
        est = update_omega(ssd)
        adj = np.zeros((q, q), dtype=bool)
        adj[0, 1:] = adj[1:, 0] = True
        diag = est.tree_diagonal(adj)
        np.testing.assert_allclose(diag[0], 2.0, atol=1e-14)
        np.testing.assert_allclose(diag[1:], 1.0 + 1.0 / 3.0, atol=1e-14)

    def test_collinear_pair_rejected(self):
        ssd = np.array([[4.0, 4.0], [4.0, 4.0]])
        with pytest.raises(DegeneracyError):
            update_omega(ssd)

    def test_skip_mask(self):
        ssd = np.array([[4.0, 4.0], [4.0, 4.0]])
        skip = np.array([[False, True], [True, False]])
        est = update_omega(ssd, skip=skip)
        assert est.omega_offdiag[0, 1] == 0.0
        assert est.edge_logdet[0, 1] == 0.0


class TestUpdateBeta:
    def test_uniform_stays_uniform(self):
        q = 5
        beta = EdgeWeightMatrix.from_log_weights(np.zeros((q, q)))
        P = edge_marginals(beta)
        np.testing.assert_allclose(P[0, 1], 2.0 / q, atol=1e-12)
        out = update_beta(P, beta)
        off = ~np.eye(q, dtype=bool)
        np.testing.assert_allclose(out.logw[off], 0.0, atol=1e-10)

    def test_fixed_point_up_to_scale(self, rng):
        q = 5
        logw = rng.uniform(-1.5, 1.5, (q, q))
        beta = EdgeWeightMatrix.from_log_weights((logw + logw.T) / 2)
        P = edge_marginals(beta)
        out = update_beta(P, beta)
        off = ~np.eye(q, dtype=bool)
        shift = beta.logw[off] - out.logw[off]
        np.testing.assert_allclose(shift, shift.mean(), atol=1e-9)

    def test_three_node_maximizer_matches_grid_search(self):
        beta = EdgeWeightMatrix.from_weights(np.array([[1.0, 1, 1], [1, 1.0, 2], [1, 2, 1.0]]))
        P = edge_marginals(beta)
        np.testing.assert_allclose([P[0, 1], P[0, 2], P[1, 2]], [0.6, 0.6, 0.8])
        out = update_beta(P, beta)
        got = np.array([out.logw[0, 1], out.logw[0, 2], out.logw[1, 2]])
        got -= got[0]
        np.testing.assert_allclose(got, [0.0, 0.0, math.log(2.0)], atol=1e-9)

        def objective(b01, b02, b12):
            logb = math.log(b01 * b02 + b01 * b12 + b02 * b12)
            return 0.6 * math.log(b01) + 0.6 * math.log(b02) + 0.8 * math.log(b12) - logb

        best = max(
            ((a, b) for a in np.linspace(0.2, 3.0, 57) for b in np.linspace(0.2, 3.0, 57)),
            key=lambda ab: objective(ab[0], ab[1], 2.0),
        )
        np.testing.assert_allclose(best, [1.0, 1.0], atol=0.06)

    def test_structural_zeros_stay_pinned(self):
        q = 4
        logw = np.zeros((q, q))
        logw[2, 3] = logw[3, 2] = LOG_WEIGHT_FLOOR
        beta = EdgeWeightMatrix.from_log_weights(logw)
        P = edge_marginals(beta)
        out = update_beta(P, beta)
        assert out.logw[2, 3] == LOG_WEIGHT_FLOOR

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20)
    def test_safeguard_never_loses_ground(self, seed):
        rng = np.random.default_rng(seed)
        q = 4
        logw = rng.uniform(-3, 3, (q, q))
        beta = EdgeWeightMatrix.from_log_weights((logw + logw.T) / 2)
        logw2 = rng.uniform(-3, 3, (q, q))
        tilt = EdgeWeightMatrix.from_log_weights((logw2 + logw2.T) / 2)
        P = edge_marginals(tilt)
        out = update_beta(P, beta)
        iu = np.triu_indices(q, 1)

        def f(mat):
            return float(np.sum(P[iu] * mat.logw[iu])) - log_partition(mat)

        assert f(out) >= f(beta) - 1e-9


class TestUpdateBetaTilde:
    def test_zero_exponent_returns_beta(self, rng):
        q = 4
        logw = rng.uniform(-1, 1, (q, q))
        beta = EdgeWeightMatrix.from_log_weights((logw + logw.T) / 2)
        out = update_beta_tilde(beta, np.zeros((q, q)), np.zeros((q, q)), np.zeros((q, q)), 10, 0.5)
        off = ~np.eye(q, dtype=bool)
        shift = beta.logw[off] - out.logw[off]
        np.testing.assert_allclose(shift, shift.mean(), atol=1e-12)

    def test_worked_value(self):
        n, q = 10, 3
        beta = EdgeWeightMatrix.from_weights(np.ones((q, q)))
        ssd = np.full((q, q), 0.5 * n)
        np.fill_diagonal(ssd, n)
        est = update_omega(ssd)
        mtm = np.full((q, q), 2.0)
        raw = tempered_log_weights(beta, est.omega_offdiag, est.edge_logdet, mtm, n, 1.0)
        want = -5.0 * math.log(0.75) + (2.0 / 3.0) * 2.0
        np.testing.assert_allclose(raw[0, 1], want, atol=1e-12)

    def test_small_alpha_limit(self, rng):
        q = 4
        logw = rng.uniform(-1, 1, (q, q))
        beta = EdgeWeightMatrix.from_log_weights((logw + logw.T) / 2)
        ssd = compute_ssd(rng.standard_normal((30, q)), np.ones((30, q)))
        est = update_omega(ssd)
        out = update_beta_tilde(beta, est.omega_offdiag, est.edge_logdet, ssd, 30, 1e-12)
        off = ~np.eye(q, dtype=bool)
        shift = beta.logw[off] - out.logw[off]
        np.testing.assert_allclose(shift, shift.mean(), atol=1e-9)

    def test_renormalized_to_zero_max(self, rng):
        q = 5
        ssd = compute_ssd(rng.standard_normal((40, q)), np.ones((40, q)))
        est = update_omega(ssd)
        beta = EdgeWeightMatrix.from_log_weights(np.zeros((q, q)))
        out = update_beta_tilde(beta, est.omega_offdiag, est.edge_logdet, ssd, 40, 0.2)
        assert out.logw[~np.eye(q, dtype=bool)].max() == pytest.approx(0.0, abs=1e-12)

    def test_oversized_step_raises(self):
        q, n = 3, 100
        x = 0.9999999
        ssd = np.zeros((q, q))
        ssd[0, 1] = ssd[1, 0] = x * n
        np.fill_diagonal(ssd, n)
        est = update_omega(ssd)
        beta = EdgeWeightMatrix.from_log_weights(np.zeros((q, q)))
        mtm = ssd.copy()
        with pytest.raises(TemperingError, match="alpha"):
            update_beta_tilde(beta, est.omega_offdiag, est.edge_logdet, mtm, n, 1.0)


class TestExpectedPrecision:
    def test_no_edges_gives_identity(self):
        q = 4
        ssd = 7.0 * np.eye(q) + 2.0
        np.fill_diagonal(ssd, 7.0)
        out = expected_precision(np.zeros((q, q)), ssd, np.zeros((q, q)))
        np.testing.assert_allclose(out, np.eye(q))

    def test_degenerate_tree_matches_tree_precision(self):
        n, q = 20, 4
        ssd = np.full((q, q), 0.4 * n)
        np.fill_diagonal(ssd, float(n))
        est = update_omega(ssd)
        adj = np.zeros((q, q), dtype=bool)
        adj[0, 1] = adj[1, 0] = adj[1, 2] = adj[2, 1] = adj[2, 3] = adj[3, 2] = True
        P = adj.astype(float)
        out = expected_precision(est.omega_offdiag, ssd, P)
        np.testing.assert_allclose(np.diag(out), est.tree_diagonal(adj), atol=1e-12)
        np.testing.assert_allclose(out[0, 1], est.omega_offdiag[0, 1], atol=1e-14)
        assert out[0, 2] == 0.0

    def test_symmetry(self, rng):
        q = 5
        ssd = compute_ssd(rng.standard_normal((25, q)), np.ones((25, q)))
        est = update_omega(ssd)
        beta = EdgeWeightMatrix.from_log_weights(np.zeros((q, q)))
        P = edge_marginals(beta)
        out = expected_precision(est.omega_offdiag, ssd, P)
        np.testing.assert_allclose(out, out.T)


class TestUpdateHidden:
    def test_decoupled_hidden(self, rng):
        n, p, r = 15, 4, 2
        prec = np.eye(p + r)
        prec[p:, p:] = np.diag([2.0, 5.0])
        M = rng.standard_normal((n, p))
        M_h, S_h = update_hidden(M, prec)
        np.testing.assert_allclose(M_h, 0.0)
        np.testing.assert_allclose(S_h, [0.5, 0.2])

    def test_single_neighbor_worked_value(self, rng):
        n, p = 10, 3
        prec = np.eye(p + 1)
        prec[0, p] = prec[p, 0] = -0.5
        prec[p, p] = 2.0
        M = rng.standard_normal((n, p))
        M_h, S_h = update_hidden(M, prec)
        np.testing.assert_allclose(M_h[:, 0], 0.25 * M[:, 0], atol=1e-14)
        np.testing.assert_allclose(S_h, [0.5])

    def test_matches_block_inversion(self, rng):
        for _ in range(20):
            p = int(rng.integers(3, 8))
            r = int(rng.integers(1, 4))
            n = 12
            q = p + r
            a = rng.standard_normal((q, q))
            prec = a @ a.T + q * np.eye(q)
            prec[p:, p:] = np.diag(rng.uniform(0.5, 4.0, r))
            M = rng.standard_normal((n, p))
            M_h, S_h = update_hidden(M, prec)
            want = -np.linalg.solve(prec[p:, p:], prec[p:, :p] @ M.T).T
            np.testing.assert_allclose(M_h, want, atol=1e-10)
            np.testing.assert_allclose(S_h, 1.0 / np.diag(prec[p:, p:]), atol=1e-14)

    def test_r_zero(self):
        M_h, S_h = update_hidden(np.zeros((5, 3)), np.eye(3))
        assert M_h.shape == (5, 0) and S_h.shape == (0,)

    def test_offdiagonal_hidden_block_rejected(self):
        prec = np.eye(5)
        prec[3, 4] = prec[4, 3] = 0.2
        with pytest.raises(InvalidInputError, match="diagonal"):
            update_hidden(np.zeros((4, 3)), prec)

    def test_singular_hidden_block_rejected(self):
        prec = np.eye(4)
        prec[3, 3] = 0.0
        with pytest.raises(DegeneracyError):
            update_hidden(np.zeros((4, 3)), prec)


def make_state(beta, beta_tilde, ssd, pln, M_hidden=None, S_hidden=None):
    P = edge_marginals(beta_tilde)
    est = update_omega(ssd)
    prec = expected_precision(est.omega_offdiag, ssd, P)
    n = pln.M_obs.shape[0]
    r = 0 if M_hidden is None else M_hidden.shape[1]
    return VemState(
        beta=beta,
        beta_tilde=beta_tilde,
        P=P,
        omega_offdiag=est.omega_offdiag,
        r_offdiag=est.r_offdiag,
        edge_logdet=est.edge_logdet,
        expected_prec=prec,
        ssd=ssd,
        M_hidden=np.zeros((n, 0)) if M_hidden is None else M_hidden,
        S_hidden=np.zeros(0) if S_hidden is None else S_hidden,
        elbo_trace=np.zeros(0),
    )


def synthetic_pln(rng, n, p):
    M = rng.standard_normal((n, p))
    M -= M.mean(axis=0)
    S = rng.uniform(0.2, 0.8, (n, p))
    scale = np.sqrt((M**2 + S).mean(axis=0))
    M /= scale
    S /= scale**2
    return PlnFit(
        theta=np.zeros((1, p)),
        sigma=np.ones(p),
        M_obs=M,
        S_obs=S,
        elbo=0.0,
        recon=-123.4,
        converged=True,
        elbo_trace=np.zeros(1),
    )


class TestElbo:
    def test_fixed_tree_closed_form(self, rng):
        n, q = 25, 3
        pln = synthetic_pln(rng, n, q)
        ssd = compute_ssd(pln.M_obs, pln.S_obs)
        beta = EdgeWeightMatrix.from_log_weights(np.zeros((q, q)))
        logbt = np.full((q, q), -500.0)
        logbt[0, 1] = logbt[1, 0] = 0.0
        logbt[1, 2] = logbt[2, 1] = 0.0
        beta_tilde = EdgeWeightMatrix.from_log_weights(logbt)
        state = make_state(beta, beta_tilde, ssd, pln)
        est = update_omega(ssd)

        got = elbo(state, pln)
        tree_term = 0.0 + 0.0 - log_partition(beta)
        gauss = (
            -0.5 * n * (est.edge_logdet[0, 1] + est.edge_logdet[1, 2])
            - 0.5 * n * q
            - 0.5 * n * q * math.log(2 * math.pi)
        )
        entropy = 0.5 * float(np.log(pln.S_obs).sum()) + 0.5 * n * q * (
            1 + math.log(2 * math.pi)
        )
        want = pln.recon + tree_term + gauss + entropy
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_trace_of_expected_precision_is_nq(self, rng):
        n, q = 30, 5
        pln = synthetic_pln(rng, n, q)
        ssd = compute_ssd(pln.M_obs, pln.S_obs)
        beta = EdgeWeightMatrix.from_log_weights(np.zeros((q, q)))
        state = make_state(beta, beta, ssd, pln)
        np.testing.assert_allclose(np.sum(state.expected_prec * ssd), n * q, atol=1e-8)

    def test_tree_entropy_nonnegative(self, rng):
        n, q = 20, 4
        pln = synthetic_pln(rng, n, q)
        ssd = compute_ssd(pln.M_obs, pln.S_obs)
        for _ in range(10):
            logw = rng.uniform(-4, 0, (q, q))
            bt = EdgeWeightMatrix.from_log_weights((logw + logw.T) / 2)
            state = make_state(bt, bt, ssd, pln)
            assert elbo_terms(state, pln)["tree_entropy"] >= -1e-9


class TestAlphaBound:
    def test_growth_coefficient_worked_value(self):
        np.testing.assert_allclose(
            growth_coefficient(0.8), 4.0 + 0.5 * math.log(5.0), atol=1e-14
        )

    def test_published_setting(self):
        got = alpha_upper_bound(0.8, 200, 15)
        assert abs(got - 1.05e-1) / 1.05e-1 < 0.01

    def test_inverse_in_n(self):
        a = alpha_upper_bound(0.8, 100, 10)
        b = alpha_upper_bound(0.8, 200, 10)
        np.testing.assert_allclose(a, 2.0 * b, rtol=1e-12)

    def test_impossible_size_raises(self):
        with pytest.raises(ConfigurationError):
            alpha_upper_bound(0.8, 100, 50, log_delta=5.0)

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            alpha_upper_bound(1.2, 100, 10)
        with pytest.raises(InvalidInputError):
            alpha_upper_bound(0.8, 100, 2)
        with pytest.raises(InvalidInputError):
            growth_coefficient(0.0)


class TestRunVem:
    def test_chain_recovery_r0(self):
        fit, init, _ = chain_instance(7, 7, 200)
        state = run_vem(fit, init, VemConfig(r=0, alpha=0.1))
        p = 7
        iu = np.triu_indices(p, 1)
        true_edges = {(j, j + 1) for j in range(p - 1)}
        scores = state.P[iu]
        labels = np.array([(a, b) in true_edges for a, b in zip(*iu)])
        order = scores.argsort()
        ranks = np.empty(len(scores))
        ranks[order] = np.arange(1, len(scores) + 1)
        n1, n0 = labels.sum(), (~labels).sum()
        auc = (ranks[labels].sum() - n1 * (n1 + 1) / 2) / (n1 * n0)
        assert auc >= 0.95

    def test_monotone_elbo_alpha_one(self):
        for seed in (7, 11, 23):
            fit, init, _ = chain_instance(seed, 5, 50)
            state = run_vem(fit, init, VemConfig(r=0, alpha=1.0))
            diffs = np.diff(state.elbo_trace)
            assert diffs.min() >= -1e-6

    def test_edge_mass_every_iteration(self):
        fit, init, _ = chain_instance(11, 5, 50)
        state = run_vem(fit, init, VemConfig(r=0, alpha=0.5))
        q = 5
        for rec in state.trace:
            assert abs(rec["edge_mass"] - (q - 1)) <= 1e-8

    def test_hidden_hub_recovery(self):
        rng = np.random.default_rng(19)
        p, n, q = 6, 300, 7
        edges = [(6, 0), (6, 1), (6, 2), (6, 3), (3, 4), (4, 5)]
        x = 0.55
        om = np.eye(q)
        for a, b in edges:
            om[a, b] = om[b, a] = -x / (1 - x * x)
            om[a, a] += x * x / (1 - x * x)
            om[b, b] += x * x / (1 - x * x)
        cov = np.linalg.inv(om)
        d = np.sqrt(np.diag(cov))
        R = cov / d[:, None] / d[None, :]
        u = rng.standard_normal((n, q)) @ np.linalg.cholesky(R).T
        y = rng.poisson(np.exp(0.5 + u[:, :p]))
        fit = fit_pln(CountDataset(y))
        score = fit.M_obs[:, :4].mean(axis=1)
        score = (score - score.mean()) / score.std()
        init = SimpleNamespace(
            beta0=EdgeWeightMatrix.from_log_weights(np.zeros((q, q))),
            M_hidden0=score[:, None],
            R0=np.corrcoef(np.column_stack([fit.M_obs, score]).T),
        )
        state = run_vem(fit, init, VemConfig(r=1, alpha=0.1))
        for j in range(4):
            assert state.P[p, j] > 0.9
        assert state.degenerate == ()
        assert abs(np.corrcoef(state.M_hidden[:, 0], u[:, q - 1])[0, 1]) > 0.5

    def test_hidden_hidden_stays_zero(self):
        fit, init, _ = chain_instance(13, 5, 80)
        n, p, r = 80, 5, 2
        q = p + r
        rng = np.random.default_rng(5)
        m0 = rng.standard_normal((n, r))
        logw = np.zeros((q, q))
        logw[p:, p:] = LOG_WEIGHT_FLOOR
        beta0 = EdgeWeightMatrix.from_log_weights(logw)
        R0 = np.corrcoef(np.column_stack([fit.M_obs, m0]).T)
        init2 = SimpleNamespace(beta0=beta0, M_hidden0=m0, R0=R0)
        state = run_vem(fit, init2, VemConfig(r=2, alpha=0.1, max_iter=30))
        assert state.P[p, p + 1] == 0.0
        assert state.beta.logw[p, p + 1] == LOG_WEIGHT_FLOOR
        assert state.beta_tilde.logw[p, p + 1] == LOG_WEIGHT_FLOOR

    def test_degenerate_actor_flagged(self):
        fit, init, _ = chain_instance(17, 5, 80)
        n, p = 80, 5
        q = p + 1
        R0 = np.eye(q)
        R0[:p, :p] = np.corrcoef(fit.M_obs.T)
        init2 = SimpleNamespace(
            beta0=EdgeWeightMatrix.from_log_weights(np.zeros((q, q))),
            M_hidden0=np.zeros((n, 1)),
            R0=R0,
        )
        state = run_vem(fit, init2, VemConfig(r=1, alpha=0.1, max_iter=15))
        assert state.degenerate == (0,)

    def test_dimension_mismatch_rejected(self):
        fit, init, _ = chain_instance(7, 5, 50)
        with pytest.raises(InvalidInputError):
            run_vem(fit, init, VemConfig(r=1, alpha=0.1))
