"""Exact optimal link choice for a single agent.

All link thresholds depend on the agent's choices only through the count
vector ``m`` (number of chosen partners of each type).  Given ``m``, the best
link vector picks, within every type, the ``m_t`` targets with the smallest
``eps_ij - U_ij``.  Scanning every admissible ``m`` is therefore an exact,
exhaustive search over link vectors, and it also yields every fixed point of
the threshold system.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .model import Game, Population, VMatrix, friends_matrix, utility_table

TIE_RTOL = 1e-12
MAX_ORACLE_TARGETS = 20


@dataclass(frozen=True)
class AgentProblem:
    """Deterministic inputs of one agent's choice problem.

    ``target_types`` lists the type of each potential partner ``j != i`` in
    agent-index order and ``u`` is the expected utility ``U[s, t]`` towards a
    target of type ``t``.
    """

    n: int
    s: int
    target_types: np.ndarray
    u: np.ndarray
    vm: VMatrix

    def __post_init__(self):
        tt = np.asarray(self.target_types, dtype=np.int64)
        if tt.size != self.n - 1:
            raise ValueError("need n - 1 targets")
        if self.n < 3:
            raise ValueError("agent problems need n >= 3")
        object.__setattr__(self, "target_types", tt)
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))

    @classmethod
    def build(cls, i: int, pop: Population, p, game: Game) -> "AgentProblem":
        s = int(pop.type_of[i])
        v = friends_matrix(s, pop.counts, p, game.coef)
        vs = [v if k == s else np.zeros((pop.T, pop.T)) for k in range(pop.T)]
        u = utility_table(pop.counts, p, game, vs)[s]
        targets = np.delete(pop.type_of, i)
        return cls(pop.n, s, targets, u, VMatrix.from_matrix(v))

    @classmethod
    def for_type(cls, s: int, pop: Population, p, game: Game) -> "AgentProblem":
        """Problem of a representative agent of type ``s`` (need not be present)."""
        counts = pop.counts.copy()
        if counts[s] == 0:
            counts[s] = 1
            pop = Population.from_counts(counts)
        i = int(np.flatnonzero(pop.type_of == s)[0])
        return cls.build(i, pop, p, game)

    @property
    def T(self) -> int:
        return self.u.size

    @property
    def caps(self) -> np.ndarray:
        return np.bincount(self.target_types, minlength=self.T)

    @property
    def u_targets(self) -> np.ndarray:
        return self.u[self.target_types]

    @property
    def scale(self) -> float:
        return 2.0 * (self.n - 1) / (self.n - 2)


@dataclass(frozen=True)
class BestResponse:
    links: np.ndarray
    counts: np.ndarray
    omega: np.ndarray
    realized_eu: float
    num_fixed_points: int
    is_fixed_point: bool
    ties: int


def count_grid(caps) -> np.ndarray:
    """All count vectors ``0 <= m <= caps`` in lexicographic order, shape ``(C, T)``."""
    caps = np.asarray(caps, dtype=np.int64)
    axes = [np.arange(c + 1) for c in caps]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in mesh], axis=1)


def thresholds(problem: AgentProblem, m) -> np.ndarray:
    """Cut values ``U_ij + 2/(n-2) (V m)_{t_j}`` for every target."""
    m = np.asarray(m, dtype=float)
    vm = problem.vm.v @ m
    return problem.u_targets + 2.0 / (problem.n - 2) * vm[problem.target_types]


def implied_links(problem: AgentProblem, m, eps) -> np.ndarray:
    return (thresholds(problem, m) >= np.asarray(eps)).astype(np.int8)


def link_counts(problem: AgentProblem, g) -> np.ndarray:
    return np.bincount(problem.target_types, weights=np.asarray(g, dtype=float),
                       minlength=problem.T).astype(np.int64)


def realized_expected_utility(problem: AgentProblem, g, eps) -> float:
    g = np.asarray(g, dtype=float)
    m = link_counts(problem, g)
    return float(g @ (problem.u_targets - eps) + m @ problem.vm.v @ m / (problem.n - 2))


def omega_from_counts(problem: AgentProblem, m) -> np.ndarray:
    w = problem.vm.eigenvectors.T @ np.asarray(m, dtype=float) / (problem.n - 1)
    w[problem.vm.zero] = 0.0
    return w


class _SortedShocks:
    """Per-type ordering of targets by ``eps - U`` with prefix sums."""

    def __init__(self, problem: AgentProblem, eps):
        eps = np.asarray(eps, dtype=float)
        if eps.shape != (problem.n - 1,):
            raise ValueError(f"expected {problem.n - 1} shocks")
        d = eps - problem.u_targets
        self.order, self.sorted_d, self.prefix = [], [], []
        for t in range(problem.T):
            idx = np.flatnonzero(problem.target_types == t)
            # equal d: prefer later targets so the link vector is lexicographically smallest
            o = idx[np.lexsort((-idx, d[idx]))]
            self.order.append(o)
            self.sorted_d.append(d[o])
            self.prefix.append(np.concatenate(([0.0], np.cumsum(d[o]))))

    def links(self, m, size):
        g = np.zeros(size, dtype=np.int8)
        for t, o in enumerate(self.order):
            g[o[: m[t]]] = 1
        return g


def _grid_values(problem: AgentProblem, sh: _SortedShocks, grid: np.ndarray) -> np.ndarray:
    quad = np.einsum("ct,tu,cu->c", grid, problem.vm.v, grid) / (problem.n - 2)
    cost = sum(sh.prefix[t][grid[:, t]] for t in range(problem.T))
    return quad - cost


def _fixed_point_mask(problem: AgentProblem, sh: _SortedShocks, grid: np.ndarray) -> np.ndarray:
    h = 2.0 / (problem.n - 2) * grid @ problem.vm.v
    ok = np.ones(grid.shape[0], dtype=bool)
    for t in range(problem.T):
        # number of type-t targets with d <= h_t must equal m_t
        implied = np.searchsorted(sh.sorted_d[t], h[:, t], side="right")
        ok &= implied == grid[:, t]
    return ok


def enumerate_fixed_points(problem: AgentProblem, eps) -> list[tuple[np.ndarray, np.ndarray]]:
    """Every self-consistent ``(g, m)`` of the threshold system.

    The set can be empty only when ``V`` has a negative diagonal entry.
    """
    sh = _SortedShocks(problem, eps)
    grid = count_grid(problem.caps)
    out = []
    for m in grid[_fixed_point_mask(problem, sh, grid)]:
        out.append((sh.links(m, problem.n - 1), m.copy()))
    return out


def best_response(problem: AgentProblem, eps) -> BestResponse:
    """Expected-utility maximizing link vector.

    The maximum over count vectors is the global maximum over all link
    vectors.  When ``diag(V) >= 0`` it is always a fixed point of the
    threshold system, hence the max-EU fixed point; ``is_fixed_point`` reports
    whether that holds for the returned choice.
    """
    sh = _SortedShocks(problem, eps)
    grid = count_grid(problem.caps)
    vals = _grid_values(problem, sh, grid)
    best = vals.max()
    tol = TIE_RTOL * max(1.0, abs(best))
    cand = np.flatnonzero(vals >= best - tol)
    size = problem.n - 1
    options = [(tuple(sh.links(grid[c], size)), c) for c in cand]
    g, c = min(options)
    m = grid[c].copy()
    fp = _fixed_point_mask(problem, sh, grid)
    return BestResponse(
        links=np.array(g, dtype=np.int8),
        counts=m,
        omega=omega_from_counts(problem, m),
        realized_eu=float(vals[c]),
        num_fixed_points=int(fp.sum()),
        is_fixed_point=bool(fp[c]),
        ties=len(cand) - 1,
    )


def all_link_vectors(k: int) -> np.ndarray:
    return np.array(list(itertools.product((0, 1), repeat=k)), dtype=np.int8)


def brute_force_oracle(problem: AgentProblem, eps) -> np.ndarray:
    """Argmax of realized expected utility over all ``2^(n-1)`` link vectors."""
    k = problem.n - 1
    if k > MAX_ORACLE_TARGETS:
        raise ValueError(f"brute force limited to n - 1 <= {MAX_ORACLE_TARGETS}")
    G = all_link_vectors(k).astype(float)
    Z = np.eye(problem.T)[problem.target_types]
    M = G @ Z
    eu = G @ (problem.u_targets - np.asarray(eps, dtype=float))
    eu += np.einsum("ct,tu,cu->c", M, problem.vm.v, M) / (problem.n - 2)
    best = eu.max()
    # product() enumerates in lexicographic order, so the first tie is the smallest vector
    first = np.flatnonzero(eu >= best - TIE_RTOL * max(1.0, abs(best)))[0]
    return G[first].astype(np.int8)


def pi_objective(problem: AgentProblem, omega, eps) -> float:
    """Legendre-transformed objective evaluated at ``omega``."""
    omega = np.asarray(omega, dtype=float)
    lam = problem.vm.effective_eigenvalues()
    phi = problem.vm.eigenvectors
    shift = problem.scale * (phi @ (lam * omega))
    a = problem.u_targets + shift[problem.target_types] - np.asarray(eps, dtype=float)
    n = problem.n
    return float(np.maximum(a, 0.0).sum() - (n - 1) ** 2 / (n - 2) * omega @ (lam * omega))
