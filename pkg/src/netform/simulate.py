"""Synthetic networks drawn from the model at a given equilibrium."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bestresponse import AgentProblem, best_response, brute_force_oracle
from .model import Game, Population, TypeSpace, friends_matrix, VMatrix, utility_table
from .rng import stream


class DataError(ValueError):
    """Malformed or inadmissible network data."""


@dataclass
class NetworkData:
    adjacency: np.ndarray
    pop: Population
    seed_record: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.adjacency)
        if a.shape != (self.pop.n, self.pop.n):
            raise DataError("adjacency must be n x n")
        if np.any(np.diag(a) != 0) or not np.isin(a, (0, 1)).all():
            raise DataError("adjacency must be binary with a zero diagonal")
        self.adjacency = a.astype(np.int8)

    @property
    def n(self) -> int:
        return self.pop.n

    def link_counts(self) -> np.ndarray:
        """Number of links between ordered type pairs ``(s, t)``."""
        z = np.eye(self.pop.T)[self.pop.type_of]
        return (z.T @ self.adjacency @ z).round().astype(np.int64)


def draw_population(n: int, ts: TypeSpace, rng: np.random.Generator) -> Population:
    if n < 4:
        raise ValueError("populations need n >= 4")
    return Population(rng.choice(ts.T, size=n, p=ts.limit_probs), ts.T)


def agent_problems(pop: Population, p, game: Game) -> dict[int, tuple]:
    """Per-type utilities and friends matrices shared by all agents of a type."""
    T = pop.T
    vs = [friends_matrix(s, pop.counts, p, game.coef) for s in range(T)]
    U = utility_table(pop.counts, p, game, vs)
    return {s: (U[s], VMatrix.from_matrix(vs[s])) for s in range(T)}


def generate_network(game: Game, p_star, pop: Population, base_seed: int, rep: int = 0,
                     oracle_check: bool = False) -> NetworkData:
    """Draw each agent's shocks from its own stream and record its best response.

    With ``oracle_check`` every row is replayed through the brute-force
    maximizer and a mismatch raises ``AssertionError``.
    """
    n = pop.n
    shared = agent_problems(pop, p_star, game)
    adj = np.zeros((n, n), dtype=np.int8)
    for i in range(n):
        s = int(pop.type_of[i])
        u, vm = shared[s]
        prob = AgentProblem(n, s, np.delete(pop.type_of, i), u, vm)
        eps = game.shock.sample(stream(base_seed, rep, "data", i), n - 1)
        g = best_response(prob, eps).links
        if oracle_check and not np.array_equal(g, brute_force_oracle(prob, eps)):
            raise AssertionError(f"row {i} differs from the brute-force optimum")
        adj[i, np.arange(n) != i] = g
    return NetworkData(adj, pop, {"base_seed": int(base_seed), "rep": int(rep)})


def write_edge_list(data: NetworkData, path) -> None:
    lines = [f"{data.n} {data.pop.T}"]
    lines += [f"{i} {t}" for i, t in enumerate(data.pop.type_of)]
    lines += [f"{i} {j}" for i, j in zip(*np.nonzero(data.adjacency))]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path) -> NetworkData:
    try:
        rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    try:
        n, T = (int(v) for v in rows[0])
        types = np.empty(n, dtype=np.int64)
        for k in range(n):
            i, t = (int(v) for v in rows[1 + k])
            if i != k:
                raise DataError(f"agent lines must be in order; expected {k}, got {i}")
            types[k] = t
        adj = np.zeros((n, n), dtype=np.int8)
        for r in rows[1 + n:]:
            i, j = (int(v) for v in r)
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise DataError(f"invalid edge {i} {j}")
            adj[i, j] = 1
    except (ValueError, IndexError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed edge list {path}: {exc}") from exc
    try:
        pop = Population(types, T)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    return NetworkData(adj, pop)
