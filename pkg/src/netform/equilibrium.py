"""Symmetric equilibrium link probabilities, finite-n (simulated) and limiting.

Simulated choice probabilities use a bank of common random numbers.  Because
every target of a given type has the same expected utility, an agent's
optimum depends on the shocks only through the per-type prefix sums of the
sorted draws, so the shock part of the objective over the whole count grid,
``A[r, m]``, can be formed once per bank and reused for every parameter value.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .bestresponse import AgentProblem, count_grid
from .model import Game, Population, ShockDistribution, friends_matrix, limit_utility_table, limit_v, utility_table

log = logging.getLogger(__name__)

# largest R x C block of the shock table materialized at once
BLOCK_ELEMENTS = 4_000_000


@dataclass(frozen=True)
class EquilibriumSolveReport:
    p_star: np.ndarray
    residual: float
    iterations: int
    damping: float
    converged: bool
    tolerance: float


@dataclass(frozen=True)
class OmegaStar:
    omega: np.ndarray
    gradient_residual: float
    jacobian: np.ndarray
    inner: np.ndarray
    inner_condition: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class LimitingOmega:
    omega: np.ndarray
    residual: float
    converged: bool
    iterations: int


class _Grid:
    """Count grid for one agent type with some targets possibly removed."""

    def __init__(self, draws: list[np.ndarray]):
        self.caps = np.array([d.shape[1] for d in draws], dtype=np.int64)
        self.R = draws[0].shape[0]
        self.m = count_grid(self.caps)
        self.shape = tuple(self.caps + 1)
        # prefix sums of the sorted shocks, one (R, cap + 1) array per type
        self.prefix = [np.concatenate((np.zeros((self.R, 1)), np.cumsum(np.sort(d, axis=1), axis=1)), axis=1)
                       for d in draws]
        self.size = self.m.shape[0]
        self.rows = max(1, BLOCK_ELEMENTS // self.size)
        self._table = self._block(0, self.R) if self.R * self.size <= BLOCK_ELEMENTS else None

    def _block(self, lo, hi):
        T = len(self.prefix)
        out = np.zeros((hi - lo,) + self.shape)
        for t, ce in enumerate(self.prefix):
            shape = [hi - lo] + [1] * T
            shape[t + 1] = ce.shape[1]
            out += ce[lo:hi].reshape(shape)
        return out.reshape(hi - lo, self.size)

    def blocks(self):
        if self._table is not None:
            yield 0, self.R, self._table
            return
        for lo in range(0, self.R, self.rows):
            hi = min(self.R, lo + self.rows)
            yield lo, hi, self._block(lo, hi)

    def max_values(self, *bs):
        """``max_m (b(m) - A[r, m])`` for each row ``r`` and each ``b``."""
        out = [np.empty(self.R) for _ in bs]
        for lo, hi, a in self.blocks():
            for o, b in zip(out, bs):
                o[lo:hi] = (b[None, :] - a).max(axis=1)
        return out

    def argmax(self, b):
        out = np.empty(self.R, dtype=np.int64)
        for lo, hi, a in self.blocks():
            out[lo:hi] = (b[None, :] - a).argmax(axis=1)
        return out


class ShockBank:
    """Fixed shock draws for a representative agent of each type.

    ``draws[s][t]`` has shape ``(R, cap_st)`` where ``cap_st`` is the number
    of type-``t`` targets available to a type-``s`` agent.
    """

    def __init__(self, counts, R: int, shock: ShockDistribution, rng: np.random.Generator):
        if R < 1:
            raise ValueError("R must be at least 1")
        self.counts = np.asarray(counts, dtype=np.int64)
        self.n = int(self.counts.sum())
        self.R = int(R)
        self.shock = shock
        T = self.counts.size
        self.draws = []
        for s in range(T):
            caps = self.counts - (np.arange(T) == s)
            caps = np.maximum(caps, 0)
            self.draws.append([shock.sample(rng, (self.R, int(c))) for c in caps])
        self._grids = {}

    @property
    def T(self) -> int:
        return self.counts.size

    def grid(self, s: int, removed: int | None = None) -> _Grid:
        key = (s, removed)
        if key not in self._grids:
            draws = list(self.draws[s])
            if removed is not None:
                draws[removed] = draws[removed][:, :-1]
            self._grids[key] = _Grid(draws)
        return self._grids[key]


def _base_values(m, u, v, n):
    mf = m.astype(float)
    mv = mf @ v
    return mf @ u + np.einsum("ct,ct->c", mv, mf) / (n - 2), mv


def ccp_simulated(game: Game, p, pop: Population, bank: ShockBank, method: str = "smooth") -> np.ndarray:
    """Simulated finite-n choice probabilities ``P[s, t]``.

    ``method="tally"`` averages the chosen share of type-``t`` targets over
    the best responses for each draw.  ``method="smooth"`` removes one
    type-``t`` target, solves the agent's problem with and without a link to
    it for every draw of the remaining shocks, and integrates the removed
    target's shock analytically; it estimates the same probability without
    the step-function discontinuity in the parameters.
    """
    if method not in ("smooth", "tally"):
        raise ValueError(f"unknown method {method!r}")
    if not np.array_equal(pop.counts, bank.counts):
        raise ValueError("shock bank was built for different type counts")
    T, n = pop.T, pop.n
    U = utility_table(pop.counts, p, game)
    P = np.empty((T, T))
    for s in range(T):
        v = friends_matrix(s, pop.counts, p, game.coef)
        if method == "tally":
            grid = bank.grid(s)
            b, _ = _base_values(grid.m, U[s], v, n)
            chosen = grid.m[grid.argmax(b)]
        for t in range(T):
            if method == "tally" and grid.caps[t] > 0:
                P[s, t] = chosen[:, t].mean() / grid.caps[t]
                continue
            grid_t = bank.grid(s, t if bank.draws[s][t].shape[1] > 0 else None)
            b0, mv = _base_values(grid_t.m, U[s], v, n)
            b1 = b0 + U[s, t] + (2.0 * mv[:, t] + v[t, t]) / (n - 2)
            with_j, without_j = grid_t.max_values(b1, b0)
            P[s, t] = game.shock.cdf(with_j - without_j).mean()
    return P


def solve_equilibrium_finite(game: Game, pop: Population, bank: ShockBank, init, damping: float = 0.5,
                             tol: float | None = None, max_iter: int = 1000,
                             method: str = "smooth") -> EquilibriumSolveReport:
    """Damped fixed-point iteration on the simulated map with fixed draws."""
    if tol is None:
        tol = max(1e-4, 1.0 / math.sqrt(bank.R * pop.n))
    p = np.clip(np.asarray(init, dtype=float), 0.0, 1.0)
    resid = np.inf
    for it in range(1, max_iter + 1):
        new = ccp_simulated(game, p, pop, bank, method)
        resid = float(np.max(np.abs(new - p)))
        if resid <= tol:
            return EquilibriumSolveReport(p, resid, it, damping, True, tol)
        p = (1.0 - damping) * p + damping * new
    log.warning("finite equilibrium did not converge: residual %.3g", resid)
    return EquilibriumSolveReport(p, resid, max_iter, damping, False, tol)


def limiting_omega(s: int, game: Game, p, damping: float = 0.5, tol: float = 1e-10,
                   max_iter: int = 10000) -> LimitingOmega:
    """Limiting auxiliary variable on the transformed scale (``Phi omega``).

    Solves ``V E[Z F(U + 2 Z'V w)] = V w`` starting from zero and keeping
    ``w`` in the range of ``V``.
    """
    vm = limit_v(s, p, game)
    v = vm.v
    basis = vm.eigenvectors[:, vm.active]
    proj = basis @ basis.T
    u = limit_utility_table(p, game)[s]
    pi = game.ts.limit_probs

    def target(w):
        return pi * game.shock.cdf(u + 2.0 * v @ w)

    def resid(w):
        return float(np.max(np.abs(v @ (target(w) - w)), initial=0.0))

    # Newton steps on the projected fixed point, falling back to damped iteration
    w = np.zeros(game.T)
    eye = np.eye(game.T)
    r = resid(w)
    it = 0
    while r > tol and it < 50:
        h = proj @ target(w) - w
        jac = proj @ (2.0 * (pi * game.shock.pdf(u + 2.0 * v @ w))[:, None] * v) - eye
        try:
            step = np.linalg.solve(jac, -h)
        except np.linalg.LinAlgError:
            break
        cand = proj @ (w + step)
        rc = resid(cand)
        if not rc < r:
            break
        w, r = cand, rc
        it += 1
    while r > tol and it < max_iter:
        w = proj @ ((1.0 - damping) * w + damping * target(w))
        r = resid(w)
        it += 1
    if r > tol:
        log.warning("limiting omega did not converge for type %d: residual %.3g", s, r)
    return LimitingOmega(w, r, r <= tol, it)


def limiting_ccp_matrix(game: Game, p) -> np.ndarray:
    """``F(U_lim(s, t) + 2 (V_s w_s)_t)`` for all type pairs."""
    T = game.T
    u = limit_utility_table(p, game)
    out = np.empty((T, T))
    for s in range(T):
        w = limiting_omega(s, game, p).omega
        out[s] = game.shock.cdf(u[s] + 2.0 * limit_v(s, p, game).v @ w)
    return out


def limiting_ccp(s: int, t: int, game: Game, p) -> float:
    w = limiting_omega(s, game, p).omega
    u = limit_utility_table(p, game)[s, t]
    return float(game.shock.cdf(u + 2.0 * (limit_v(s, p, game).v @ w)[t]))


def solve_equilibrium_limit(game: Game, init=None, damping: float = 0.5, tol: float = 1e-10,
                            max_iter: int = 1000) -> EquilibriumSolveReport:
    p = np.full((game.T, game.T), 0.5) if init is None else np.asarray(init, dtype=float)
    resid = np.inf
    for it in range(1, max_iter + 1):
        new = limiting_ccp_matrix(game, p)
        resid = float(np.max(np.abs(new - p)))
        if resid <= tol:
            return EquilibriumSolveReport(p, resid, it, damping, True, tol)
        p = (1.0 - damping) * p + damping * new
    log.warning("limiting equilibrium did not converge: residual %.3g", resid)
    return EquilibriumSolveReport(p, resid, max_iter, damping, False, tol)


def _index(problem: AgentProblem, omega):
    lam = problem.vm.effective_eigenvalues()
    phi = problem.vm.eigenvectors
    a = problem.u + problem.scale * (phi @ (lam * np.asarray(omega, dtype=float)))
    return a, lam, phi


def pi_star(problem: AgentProblem, omega, shock: ShockDistribution) -> float:
    """Expected Legendre objective over the agent's shocks."""
    a, lam, _ = _index(problem, omega)
    n = problem.n
    omega = np.asarray(omega, dtype=float)
    return float(problem.caps @ shock.partial_expectation(a) - (n - 1) ** 2 / (n - 2) * omega @ (lam * omega))


def pi_star_gradient(problem: AgentProblem, omega, shock: ShockDistribution):
    """``(Gamma*, grad Gamma*)``; the gradient of ``pi_star`` is ``2 (n-1)^2 / (n-2) Gamma*``."""
    a, lam, phi = _index(problem, omega)
    n, caps = problem.n, problem.caps
    k = lam[:, None] * phi.T  # column t is Lambda Phi' e_t
    gamma = k @ (caps * shock.cdf(a)) / (n - 1) - lam * np.asarray(omega, dtype=float)
    inner = 2.0 / (n - 2) * (k * (caps * shock.pdf(a))) @ phi - np.eye(problem.T)
    return gamma, inner * lam[None, :], inner


def omega_star_finite(problem: AgentProblem, shock: ShockDistribution, tol: float = 1e-8,
                      damping: float = 0.5, max_iter: int = 100000) -> OmegaStar:
    """Maximizer of the expected objective via ``w <- Phi' E[sum_j F Z_j] / (n-1)``."""
    phi, zero = problem.vm.eigenvectors, problem.vm.zero
    n, caps = problem.n, problem.caps
    w = np.zeros(problem.T)
    gamma, _, _ = pi_star_gradient(problem, w, shock)
    it = 0
    while np.max(np.abs(gamma)) > tol and it < max_iter:
        a, _, _ = _index(problem, w)
        new = phi.T @ (caps * shock.cdf(a)) / (n - 1)
        new[zero] = 0.0
        w = (1.0 - damping) * w + damping * new
        gamma, _, _ = pi_star_gradient(problem, w, shock)
        it += 1
    res = float(np.max(np.abs(gamma)))
    _, jac, inner = pi_star_gradient(problem, w, shock)
    if res > tol:
        log.warning("omega* did not converge: residual %.3g", res)
    return OmegaStar(w, res, jac, inner, float(np.linalg.cond(inner)), res <= tol, it)
