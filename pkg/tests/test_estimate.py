import numpy as np
import pytest
import statsmodels.api as sm
from scipy import stats

import netform.estimate as est
from netform.equilibrium import ShockBank, solve_equilibrium_finite, solve_equilibrium_limit
from netform.estimate import (
    Cells, EstimationConfig, FiniteProvider, LimitProvider, SingularJacobianError, build_providers, first_step,
    moment, qmle_instrument, sandwich_variance, solve_gmm,
)
from netform.model import CoefficientSet, Game, Population, TypeSpace
from netform.rng import stream
from netform.simulate import DataError, NetworkData, draw_population, generate_network

TS2 = TypeSpace([[0.0], [1.0]], [0.5, 0.5])
TS3 = TypeSpace([[0.0], [1.0], [2.0]], [1 / 3, 1 / 3, 1 / 3])
FREE5 = ("beta1", "beta2[0]", "beta3[0]", "beta5", "gamma1")
PROBIT = Game(TS2, CoefficientSet(beta1=-0.3, beta2=[0.8], beta3=[-1.1], free=("beta1", "beta2[0]", "beta3[0]")))


def probit_data(n, seed):
    pop = draw_population(n, TS2, stream(seed, 0, "population"))
    return generate_network(PROBIT, np.full((2, 2), 0.5), pop, seed)


def pair_design(data):
    """Individual-pair probit design for the separable model."""
    x = data.pop.type_of.astype(float)
    i, j = np.nonzero(~np.eye(data.n, dtype=bool))
    X = np.column_stack([np.ones(i.size), x[i], np.abs(x[i] - x[j])])
    return data.adjacency[i, j].astype(float), X


class TestFirstStep:
    def test_hand_example(self):
        adj = np.zeros((3, 3), dtype=int)
        adj[0, 1] = adj[0, 2] = adj[2, 1] = 1
        data = NetworkData(adj, Population(np.array([0, 0, 1]), 2))
        with pytest.raises(DataError, match=r"\(1, 1\)"):
            first_step(data)
        cells = Cells.from_data(data)
        np.testing.assert_allclose((cells.links / np.maximum(cells.pairs, 1))[[0, 0, 1], [0, 1, 0]], 0.5)

    def test_empty_and_complete(self):
        pop = Population.from_counts([3, 3])
        np.testing.assert_array_equal(first_step(NetworkData(np.zeros((6, 6)), pop)), 0.0)
        np.testing.assert_array_equal(first_step(NetworkData(1 - np.eye(6), pop)), 1.0)


class TestMoment:
    def test_exact_fit(self):
        data = probit_data(40, 1)
        cells = Cells.from_data(data)
        W = np.random.default_rng(0).normal(size=(2, 2, 3))
        np.testing.assert_allclose(moment(cells.links / cells.pairs, cells, W), 0.0, atol=1e-15)

    def test_constant_instrument_by_hand(self):
        data = probit_data(10, 2)
        P = np.array([[0.2, 0.3], [0.4, 0.5]])
        ty = data.pop.type_of
        by_hand = np.mean([data.adjacency[i, j] - P[ty[i], ty[j]] for i in range(10) for j in range(10) if i != j])
        got = moment(P, Cells.from_data(data), np.ones((2, 2, 1)))
        assert got[0] == pytest.approx(by_hand, abs=1e-14)

    def test_qmle_moment_is_probit_score(self):
        data = probit_data(60, 3)
        cells = Cells.from_data(data)
        p_hat = first_step(data)
        theta = np.array([-0.2, 0.5, -0.9])
        W, P = qmle_instrument(LimitProvider(PROBIT), theta, p_hat)
        y, X = pair_design(data)
        score = sm.Probit(y, X).score(theta) / (data.n * (data.n - 1))
        np.testing.assert_allclose(moment(P, cells, W), score, atol=1e-8)

    def test_qmle_instrument_analytic(self):
        theta = np.array([-0.2, 0.5, -0.9])
        W, _ = qmle_instrument(LimitProvider(PROBIT), theta, np.full((2, 2), 0.4))
        for s in range(2):
            for t in range(2):
                x = np.array([1.0, s, abs(s - t)])
                z = x @ theta
                ref = stats.norm.pdf(z) * x / (stats.norm.cdf(z) * stats.norm.sf(z))
                np.testing.assert_allclose(W[s, t], ref, atol=1e-5)

    def test_crn_bit_identical(self):
        data = probit_data(30, 4)
        game = Game(TS2, CoefficientSet(beta1=-1, beta2=[1], beta3=[-2], beta5=1.0, gamma1=1.0, free=FREE5))
        prov = FiniteProvider(game, data, ShockBank(data.pop.counts, 100, game.shock, stream(4, 0, "moment")))
        theta = game.coef.free_vector()
        a, _ = qmle_instrument(prov, theta, first_step(data))
        b, _ = qmle_instrument(prov, theta, first_step(data))
        assert a.tobytes() == b.tobytes()


class TestGMM:
    def test_limit_limit_equals_probit_mle(self):
        data = probit_data(80, 5)
        res = solve_gmm(data, PROBIT, "limit_limit", EstimationConfig(variance=False))
        y, X = pair_design(data)
        mle = sm.Probit(y, X).fit(disp=0, method="newton", tol=1e-12).params
        np.testing.assert_allclose(res.theta_hat, mle, atol=1e-4)

    def test_instrument_scaling_invariance(self, monkeypatch):
        data = probit_data(60, 6)
        cfg = EstimationConfig(variance=False)
        base = solve_gmm(data, PROBIT, "limit_limit", cfg).theta_hat
        orig = est.qmle_instrument
        monkeypatch.setattr(est, "qmle_instrument", lambda *a, **k: (lambda w, p: (7.0 * w, p))(*orig(*a, **k)))
        scaled = solve_gmm(data, PROBIT, "limit_limit", cfg).theta_hat
        np.testing.assert_allclose(scaled, base, atol=1e-5)

    def test_deterministic(self):
        game = Game(TS2, CoefficientSet(beta1=-1, beta2=[1], beta3=[-2], beta5=1.0, gamma1=1.0,
                                        free=("beta1", "beta2[0]", "beta3[0]")))
        data = probit_data(24, 7)
        cfg = EstimationConfig(R=50, variance=False)
        a = solve_gmm(data, game, "finite_finite", cfg, base_seed=3)
        b = solve_gmm(data, game, "finite_finite", cfg, base_seed=3)
        assert a.theta_hat.tobytes() == b.theta_hat.tobytes()

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            build_providers("bogus", PROBIT, probit_data(10, 1), 10, 0)

    def test_modes_agree_at_scale(self):
        # beta5 and gamma1 fixed at their true values so the three betas are identified
        game = Game(TS2, CoefficientSet(beta1=-1, beta2=[1], beta3=[-2], beta5=1.0, gamma1=1.0,
                                        free=("beta1", "beta2[0]", "beta3[0]")))
        lim = solve_equilibrium_limit(game)
        pop = draw_population(100, TS2, stream(8, 0, "population"))
        fin = solve_equilibrium_finite(game, pop, ShockBank(pop.counts, 200, game.shock, stream(8, 0, "equilibrium")),
                                       lim.p_star)
        data = generate_network(game, fin.p_star, pop, 8)
        cfg = EstimationConfig(R=200)
        ff = solve_gmm(data, game, "finite_finite", cfg, base_seed=8)
        fl = solve_gmm(data, game, "finite_limit", cfg, base_seed=8)
        assert ff.std_errors is not None and fl.std_errors is not None
        assert np.all(np.abs(ff.theta_hat - fl.theta_hat) <= np.maximum(ff.std_errors, fl.std_errors))


def sandwich_by_hand(data, theta, beta5):
    """Separable model with a fixed indirect-friends term, derivatives in closed form."""
    n, pop = data.n, data.pop
    counts, N = pop.counts, pop.pair_counts()
    nn = n * (n - 1)
    p = first_step(data)
    pi = TS2.limit_probs
    d = theta.size
    W, dP, Pn = np.zeros((2, 2, d)), np.zeros((2, 2, d)), np.zeros((2, 2))
    dPp = np.zeros((2, 2, 4))
    for s in range(2):
        for t in range(2):
            x = np.array([1.0, s, abs(s - t)])
            z = x @ theta + beta5 * pi @ p[t]
            F, f = stats.norm.cdf(z), stats.norm.pdf(z)
            W[s, t] = f * x / (F * (1 - F))
            dP[s, t] = f * x
            for b in range(2):
                dPp[s, t, 2 * t + b] = f * beta5 * pi[b]
            rest = counts - np.eye(2)[s] - np.eye(2)[t]
            Pn[s, t] = stats.norm.cdf(x @ theta + beta5 * rest @ p[t] / (n - 2))
    J = np.einsum("st,stk,stl->kl", N, W, dP) / nn
    A = np.einsum("st,stk,stq->kq", N, W, dPp) / nn
    meat = np.zeros((d, d))
    for s in range(2):
        for t in range(2):
            wt = W[s, t] - A[:, 2 * s + t] * nn / N[s, t]
            meat += N[s, t] * Pn[s, t] * (1 - Pn[s, t]) * np.outer(wt, wt) / nn
    Ji = np.linalg.inv(J)
    return Ji @ meat @ Ji.T


@pytest.fixture(scope="module")
def three_type_data():
    game = Game(TS3, CoefficientSet(beta1=-1, beta2=[0.5], beta3=[-1], beta5=1.0, gamma1=1.0, free=FREE5))
    lim = solve_equilibrium_limit(game)
    pop = draw_population(30, TS3, stream(10, 0, "population"))
    fin = solve_equilibrium_finite(game, pop, ShockBank(pop.counts, 100, game.shock,
                                                        stream(10, 0, "equilibrium")), lim.p_star)
    return game, generate_network(game, fin.p_star, pop, 10)


class TestSandwich:
    def test_probit_with_generated_regressor(self):
        game = Game(TS2, CoefficientSet(beta1=-0.3, beta2=[0.8], beta3=[-1.1], beta5=0.7,
                                        free=("beta1", "beta2[0]", "beta3[0]")))
        pop = draw_population(60, TS2, stream(9, 0, "population"))
        data = generate_network(game, np.full((2, 2), 0.3), pop, 9)
        theta = np.array([-0.25, 0.7, -1.0])
        lim = LimitProvider(game)
        sigma, se = sandwich_variance(theta, first_step(data), data, game, lim, lim, "limit_limit")
        ref = sandwich_by_hand(data, theta, 0.7)
        np.testing.assert_allclose(sigma, ref, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(se, np.sqrt(np.diag(ref) / (60 * 59)), rtol=1e-6)

    def test_psd_and_inflation(self, three_type_data):
        game, data = three_type_data
        R = 60
        mp, ip = build_providers("finite_finite", game, data, R, 10)
        theta = game.coef.free_vector()
        p_hat = first_step(data)
        cfg = EstimationConfig(R=R)
        sig_ff, se = sandwich_variance(theta, p_hat, data, game, mp, ip, "finite_finite", cfg)
        np.testing.assert_array_equal(sig_ff, sig_ff.T)
        assert np.linalg.eigvalsh(sig_ff).min() >= -1e-10
        assert np.all(se >= 0)
        sig_plain, _ = sandwich_variance(theta, p_hat, data, game, mp, ip, "limit_limit", cfg)
        np.testing.assert_allclose(sig_ff, sig_plain * (1 + 1 / R), rtol=1e-12)

    def test_singular_jacobian(self):
        game = Game(TS2, CoefficientSet(beta1=-1, beta2=[1], beta3=[-2], beta5=1.0, gamma1=1.0, free=FREE5))
        pop = Population.from_counts([10, 10])
        data = generate_network(game, np.full((2, 2), 0.3), pop, 11)
        lim = LimitProvider(game)
        with pytest.raises(SingularJacobianError, match="rank 4 of 5"):
            sandwich_variance(game.coef.free_vector(), first_step(data), data, game, lim, lim, "limit_limit")

    def test_result_reports_rank(self):
        game = Game(TS2, CoefficientSet(beta1=-1, beta2=[1], beta3=[-2], beta5=1.0, gamma1=1.0, free=FREE5))
        data = generate_network(game, np.full((2, 2), 0.3), Population.from_counts([10, 10]), 12)
        res = solve_gmm(data, game, "limit_limit", EstimationConfig())
        assert res.j_rank < 5 and res.std_errors is None
        assert any("singular" in note for note in res.notes)
        rec = res.as_record()
        assert rec["mode"] == "limit_limit" and "theta[gamma1]" in rec
