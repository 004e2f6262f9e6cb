import numpy as np
import pytest
from scipy import optimize

from netform.bestresponse import AgentProblem, best_response
from netform.equilibrium import (
    ShockBank, ccp_simulated, limiting_ccp, limiting_ccp_matrix, limiting_omega, omega_star_finite, pi_star,
    pi_star_gradient, solve_equilibrium_finite, solve_equilibrium_limit,
)
from netform.model import (
    CoefficientSet, Game, Population, ShockDistribution, TypeSpace, VMatrix, limit_utility_table, limit_v,
    utility_table,
)
from netform.rng import stream
from instances import random_problem

TS2 = TypeSpace([[0.0], [1.0]], [0.5, 0.5])
DESIGN = Game(TS2, CoefficientSet(beta1=-1, beta2=[1], beta3=[-2], beta5=1.0, gamma1=1.0))
PROBIT = Game(TS2, CoefficientSet(beta1=-0.3, beta2=[0.8], beta3=[-1.1]))


@pytest.fixture(scope="module")
def design_limit():
    return solve_equilibrium_limit(DESIGN)


class TestSimulatedCCP:
    def test_probit_reduction(self):
        pop = Population.from_counts([12, 9])
        p = np.array([[0.3, 0.2], [0.4, 0.6]])
        R = 4000
        bank = ShockBank(pop.counts, R, PROBIT.shock, stream(1, 0, "equilibrium"))
        target = PROBIT.shock.cdf(utility_table(pop.counts, p, PROBIT))
        np.testing.assert_allclose(ccp_simulated(PROBIT, p, pop, bank), target, atol=1e-14)
        tally = ccp_simulated(PROBIT, p, pop, bank, "tally")
        assert np.max(np.abs(tally - target)) < 3 / np.sqrt(R)

    def test_smooth_and_tally_estimate_the_same_probability(self, design_limit):
        pop = Population.from_counts([8, 7])
        bank = ShockBank(pop.counts, 20000, DESIGN.shock, stream(2, 0, "equilibrium"))
        smooth = ccp_simulated(DESIGN, design_limit.p_star, pop, bank)
        tally = ccp_simulated(DESIGN, design_limit.p_star, pop, bank, "tally")
        # tally is a mean of per-draw shares; 4 binomial SEs per row draw is generous
        se = np.sqrt(tally * (1 - tally) / 20000)
        assert np.all(np.abs(smooth - tally) < 4 * se + 1e-3)

    def test_matches_direct_best_responses(self, design_limit):
        # independent simulation: full best responses of real agents with fresh draws
        pop = Population(np.array([0, 1, 0, 1, 1, 0, 0, 1, 0]), 2)
        p = design_limit.p_star
        rng = np.random.default_rng(9)
        hits = np.zeros((2, 2))
        draws = 6000
        for s in range(2):
            prob = AgentProblem.for_type(s, pop, p, DESIGN)
            for _ in range(draws):
                g = best_response(prob, rng.standard_normal(pop.n - 1)).links
                hits[s] += np.bincount(prob.target_types, weights=g, minlength=2)
            hits[s] /= draws * prob.caps
        bank = ShockBank(pop.counts, 20000, DESIGN.shock, stream(3, 0, "equilibrium"))
        smooth = ccp_simulated(DESIGN, p, pop, bank)
        assert np.max(np.abs(smooth - hits)) < 0.015

    def test_deterministic(self, design_limit):
        pop = Population.from_counts([10, 10])
        a = ccp_simulated(DESIGN, design_limit.p_star, pop,
                          ShockBank(pop.counts, 300, DESIGN.shock, stream(4, 1, "moment")))
        b = ccp_simulated(DESIGN, design_limit.p_star, pop,
                          ShockBank(pop.counts, 300, DESIGN.shock, stream(4, 1, "moment")))
        assert a.tobytes() == b.tobytes()

    def test_blocked_table_matches_cached(self, design_limit, monkeypatch):
        import netform.equilibrium as eq
        pop = Population.from_counts([9, 11])
        p = design_limit.p_star
        full = ccp_simulated(DESIGN, p, pop, ShockBank(pop.counts, 500, DESIGN.shock, stream(5, 0, "moment")))
        monkeypatch.setattr(eq, "BLOCK_ELEMENTS", 1000)
        blocked = ccp_simulated(DESIGN, p, pop, ShockBank(pop.counts, 500, DESIGN.shock, stream(5, 0, "moment")))
        np.testing.assert_allclose(blocked, full, atol=1e-15)

    def test_rejects_mismatched_bank(self):
        bank = ShockBank([5, 5], 10, DESIGN.shock, stream(0, 0, "moment"))
        with pytest.raises(ValueError):
            ccp_simulated(DESIGN, np.full((2, 2), 0.3), Population.from_counts([4, 6]), bank)


class TestFiniteEquilibrium:
    def test_probit_one_step(self):
        pop = Population.from_counts([10, 12])
        bank = ShockBank(pop.counts, 50, PROBIT.shock, stream(0, 0, "equilibrium"))
        rep = solve_equilibrium_finite(PROBIT, pop, bank, np.full((2, 2), 0.5), tol=1e-12)
        assert rep.converged
        np.testing.assert_allclose(rep.p_star, PROBIT.shock.cdf(utility_table(pop.counts, rep.p_star, PROBIT)),
                                   atol=1e-12)

    def test_design_self_consistent(self, design_limit):
        pop = Population.from_counts([26, 24])
        R = 500
        bank = ShockBank(pop.counts, R, DESIGN.shock, stream(6, 0, "equilibrium"))
        rep = solve_equilibrium_finite(DESIGN, pop, bank, design_limit.p_star)
        assert rep.converged and rep.residual < 2 / np.sqrt(R)
        again = ccp_simulated(DESIGN, rep.p_star, pop, bank)
        assert np.max(np.abs(again - rep.p_star)) <= rep.tolerance

    def test_nonconvergence_flagged(self, design_limit):
        pop = Population.from_counts([6, 6])
        bank = ShockBank(pop.counts, 50, DESIGN.shock, stream(6, 1, "equilibrium"))
        rep = solve_equilibrium_finite(DESIGN, pop, bank, np.full((2, 2), 0.9), tol=0.0, max_iter=3)
        assert not rep.converged and rep.iterations == 3


class TestLimitingGame:
    def test_zero_interaction(self):
        w = limiting_omega(0, PROBIT, np.full((2, 2), 0.4))
        np.testing.assert_array_equal(w.omega, 0.0)
        np.testing.assert_allclose(limiting_ccp_matrix(PROBIT, np.full((2, 2), 0.4)),
                                   PROBIT.shock.cdf(limit_utility_table(np.full((2, 2), 0.4), PROBIT)), atol=1e-15)

    def test_half_everywhere(self):
        rep = solve_equilibrium_limit(Game(TS2, CoefficientSet()))
        np.testing.assert_allclose(rep.p_star, 0.5, atol=1e-12)

    def test_design_residual_and_damping_invariance(self, design_limit):
        assert design_limit.converged and design_limit.residual <= 1e-10
        other = solve_equilibrium_limit(DESIGN, damping=0.8)
        np.testing.assert_allclose(other.p_star, design_limit.p_star, atol=1e-8)
        again = limiting_ccp_matrix(DESIGN, design_limit.p_star)
        assert np.max(np.abs(again - design_limit.p_star)) <= 1e-10

    def test_omega_against_grid_search(self, design_limit):
        p = design_limit.p_star
        u = limit_utility_table(p, DESIGN)
        pi = TS2.limit_probs
        grid = np.arange(0, 1.0005, 1e-3)
        a, b = np.meshgrid(grid, grid, indexing="ij")
        pts = np.stack([a.ravel(), b.ravel()], axis=1)
        for s in range(2):
            v = limit_v(s, p, DESIGN).v
            resid = pi * DESIGN.shock.cdf(u[s] + 2.0 * pts @ v) - pts
            # V is nonsingular here, so the first-order condition is the unweighted fixed point
            assert abs(np.linalg.det(v)) > 1e-8
            best = pts[np.argmin(np.max(np.abs(resid), axis=1))]
            w = limiting_omega(s, DESIGN, p)
            assert w.converged and w.residual <= 1e-10
            np.testing.assert_allclose(w.omega, best, atol=1e-3)

    def test_label_symmetry(self):
        # with no own-covariate effect and equal shares, relabelling types permutes the matrix
        coef = CoefficientSet(beta1=-0.5, beta3=[-1.0], beta5=0.8, gamma1=0.7)
        a = solve_equilibrium_limit(Game(TS2, coef)).p_star
        b = solve_equilibrium_limit(Game(TypeSpace([[1.0], [0.0]], [0.5, 0.5]), coef)).p_star
        np.testing.assert_allclose(a, b[::-1, ::-1], atol=1e-9)
        np.testing.assert_allclose(a, a[::-1, ::-1], atol=1e-9)

    def test_scalar_ccp_matches_matrix(self, design_limit):
        m = limiting_ccp_matrix(DESIGN, design_limit.p_star)
        assert limiting_ccp(1, 0, DESIGN, design_limit.p_star) == pytest.approx(m[1, 0], abs=1e-14)

    def test_finite_gap_shrinks(self, design_limit):
        p = design_limit.p_star
        gaps = []
        for n in (20, 80, 320):
            pop = Population.from_counts([n // 2, n // 2])
            bank = ShockBank(pop.counts, 2000, DESIGN.shock, stream(n, 0, "equilibrium"))
            gaps.append(np.max(np.abs(ccp_simulated(DESIGN, p, pop, bank) - p)))
        assert gaps[0] > gaps[2] and gaps[2] < 0.03


class TestOmegaStar:
    def test_zero_v(self):
        prob = AgentProblem(6, 0, [0, 1, 0, 1, 1], [0.2, -0.4], VMatrix.from_matrix(np.zeros((2, 2))))
        g, _, _ = pi_star_gradient(prob, np.zeros(2), ShockDistribution())
        np.testing.assert_array_equal(g, 0.0)
        np.testing.assert_array_equal(omega_star_finite(prob, ShockDistribution()).omega, 0.0)

    @pytest.mark.parametrize("family", ["standard_normal", "logistic"])
    def test_gradients_by_finite_differences(self, family):
        sh = ShockDistribution(family)
        rng = np.random.default_rng(12)
        h = 1e-5
        for k in range(40):
            prob = random_problem(rng, ("psd", "singular", "indefinite")[k % 3])
            n = prob.n
            w = rng.normal(scale=0.3, size=prob.T)
            w[prob.vm.zero] = 0.0
            gam, jac, _ = pi_star_gradient(prob, w, sh)
            fd_pi = np.array([(pi_star(prob, w + h * e, sh) - pi_star(prob, w - h * e, sh)) / (2 * h)
                              for e in np.eye(prob.T)])
            np.testing.assert_allclose(fd_pi * (n - 2) / (2 * (n - 1) ** 2), gam, atol=1e-6)
            fd_g = np.column_stack([(pi_star_gradient(prob, w + h * e, sh)[0]
                                     - pi_star_gradient(prob, w - h * e, sh)[0]) / (2 * h) for e in np.eye(prob.T)])
            np.testing.assert_allclose(fd_g, jac, atol=1e-5)

    def test_design_solution(self, design_limit):
        pop = Population.from_counts([25, 25])
        for s in range(2):
            prob = AgentProblem.for_type(s, pop, design_limit.p_star, DESIGN)
            os = omega_star_finite(prob, DESIGN.shock)
            assert os.converged and os.gradient_residual <= 1e-8
            assert np.isfinite(os.inner_condition) and abs(np.linalg.det(os.inner)) > 1e-6
            # maximize the expected objective directly: coarse grid, then local refinement
            grid = np.linspace(-0.2, 1.0, 61)
            pts = np.array([[a, b] for a in grid for b in grid])
            start = pts[np.argmax([pi_star(prob, q, DESIGN.shock) for q in pts])]
            res = optimize.minimize(lambda q: -pi_star(prob, q, DESIGN.shock), start, method="Nelder-Mead",
                                    options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 5000})
            np.testing.assert_allclose(os.omega, res.x, atol=1e-5)

    def test_concentration(self, design_limit):
        # sqrt(n) * mean |omega_i(eps) - omega*| stays of the same order as n grows
        rng = np.random.default_rng(13)
        scaled = []
        for n in (25, 50, 100, 250):
            pop = Population.from_counts([n // 2, n - n // 2])
            prob = AgentProblem.for_type(0, pop, design_limit.p_star, DESIGN)
            ws = omega_star_finite(prob, DESIGN.shock).omega
            dev = [np.linalg.norm(best_response(prob, rng.standard_normal(n - 1)).omega - ws) for _ in range(200)]
            scaled.append(np.sqrt(n) * np.mean(dev))
        assert max(scaled) < 3 * min(scaled)
