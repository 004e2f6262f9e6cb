"""Type space, utility parameters, shocks and expected-utility building blocks.

All equilibrium objects are indexed by types: ``p[s, t]`` is the probability
that an agent of type ``s`` links to an agent of type ``t``.  Type indices are
0-based throughout.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import special, stats

ZERO_EIG_RTOL = 1e-12


@dataclass(frozen=True)
class TypeSpace:
    """The ``T`` distinct covariate values and their population frequencies."""

    values: np.ndarray
    limit_probs: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        probs = np.asarray(self.limit_probs, dtype=float)
        if values.shape[0] < 1:
            raise ValueError("type space needs at least one type")
        if probs.shape != (values.shape[0],):
            raise ValueError("limit_probs must have one entry per type")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("limit_probs must be nonnegative and sum to 1")
        if len({tuple(v) for v in values}) != values.shape[0]:
            raise ValueError("type values must be distinct")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "limit_probs", probs)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Population:
    """A fixed characteristic profile: the type of every agent."""

    type_of: np.ndarray
    T: int

    def __post_init__(self):
        type_of = np.asarray(self.type_of, dtype=np.int64)
        if type_of.ndim != 1:
            raise ValueError("type_of must be one-dimensional")
        if type_of.size and (type_of.min() < 0 or type_of.max() >= self.T):
            raise ValueError(f"type indices must lie in 0..{self.T - 1}")
        object.__setattr__(self, "type_of", type_of)

    @property
    def n(self) -> int:
        return int(self.type_of.size)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.type_of, minlength=self.T)

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "Population":
        counts = np.asarray(counts, dtype=np.int64)
        return cls(np.repeat(np.arange(counts.size), counts), counts.size)

    def pair_counts(self) -> np.ndarray:
        """Number of ordered pairs ``(i, j)``, ``i != j``, of each type pair."""
        c = self.counts
        return np.outer(c, c) - np.diag(c)


class ShockDistribution:
    """Distribution of the private link shocks; its parameters are never estimated."""

    FAMILIES = ("standard_normal", "logistic")

    def __init__(self, family: str = "standard_normal", scale: float = 1.0):
        if family not in self.FAMILIES:
            raise ValueError(f"unknown shock family {family!r}; expected one of {self.FAMILIES}")
        if not scale > 0:
            raise ValueError("shock scale must be positive")
        self.family = family
        self.scale = float(scale)

    def __repr__(self):
        return f"ShockDistribution({self.family!r}, scale={self.scale})"

    def __eq__(self, other):
        return isinstance(other, ShockDistribution) and (self.family, self.scale) == (other.family, other.scale)

    def __hash__(self):
        return hash((self.family, self.scale))

    def cdf(self, c):
        z = np.asarray(c, dtype=float) / self.scale
        if self.family == "standard_normal":
            return special.ndtr(z)
        return special.expit(z)

    def pdf(self, c):
        z = np.asarray(c, dtype=float) / self.scale
        if self.family == "standard_normal":
            return np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) / self.scale
        e = special.expit(z)
        return e * (1.0 - e) / self.scale

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.family == "standard_normal":
            return self.scale * rng.standard_normal(size)
        return self.scale * rng.logistic(size=size)

    def partial_expectation(self, c):
        """``E[(c - eps)_+]``; its derivative in ``c`` is ``cdf(c)``."""
        z = np.asarray(c, dtype=float) / self.scale
        if self.family == "standard_normal":
            out = z * special.ndtr(z) + np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        else:
            out = np.logaddexp(0.0, z)
        return self.scale * out

    def dist(self):
        if self.family == "standard_normal":
            return stats.norm(scale=self.scale)
        return stats.logistic(scale=self.scale)


def partial_expectation(c, shock: ShockDistribution):
    return shock.partial_expectation(c)


_TABLES = ("beta5", "gamma1", "gamma2")
_SLOT = re.compile(r"^(?P<name>[a-z0-9_]+)(\[(?P<idx>[0-9, ]+)\])?$")


@dataclass(frozen=True)
class CoefficientSet:
    """Utility parameters.

    ``beta5``, ``gamma1`` and ``gamma2`` are either a scalar (a constant
    broadcast over all type triples) or a full ``T x T x T`` table indexed by
    the types of ``(i, j, k)``.  ``free`` names the scalar slots that are
    estimated; see :meth:`slot_names`.
    """

    beta1: float = 0.0
    beta2: np.ndarray = field(default_factory=lambda: np.zeros(1))
    beta3: np.ndarray = field(default_factory=lambda: np.zeros(1))
    beta4_recip: float = 0.0
    beta5: float | np.ndarray = 0.0
    gamma1: float | np.ndarray = 0.0
    gamma2: float | np.ndarray = 0.0
    free: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "beta1", float(self.beta1))
        object.__setattr__(self, "beta4_recip", float(self.beta4_recip))
        object.__setattr__(self, "beta2", np.atleast_1d(np.asarray(self.beta2, dtype=float)))
        object.__setattr__(self, "beta3", np.atleast_1d(np.asarray(self.beta3, dtype=float)))
        if self.beta2.shape != self.beta3.shape:
            raise ValueError("beta2 and beta3 must have the covariate dimension")
        for name in _TABLES:
            val = getattr(self, name)
            if np.ndim(val) == 0:
                object.__setattr__(self, name, float(val))
                continue
            arr = np.asarray(val, dtype=float)
            if arr.ndim != 3 or len(set(arr.shape)) != 1:
                raise ValueError(f"{name} must be a scalar or a T x T x T table")
            if name != "beta5" and not np.array_equal(arr, arr.transpose(0, 2, 1)):
                raise ValueError(f"{name} must be symmetric in its last two indices")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "free", tuple(self.free))
        names = set(self.slot_names())
        unknown = [s for s in self.free if s not in names]
        if unknown:
            raise ValueError(f"unknown free parameter(s) {unknown}; available: {sorted(names)}")

    def table(self, name: str, T: int) -> np.ndarray:
        val = getattr(self, name)
        if np.ndim(val) == 0:
            return np.full((T, T, T), val)
        if val.shape[0] != T:
            raise ValueError(f"{name} table has {val.shape[0]} types, expected {T}")
        return val

    def slot_names(self) -> list[str]:
        names = ["beta1"]
        names += [f"beta2[{k}]" for k in range(self.beta2.size)]
        names += [f"beta3[{k}]" for k in range(self.beta3.size)]
        names.append("beta4_recip")
        for name in _TABLES:
            val = getattr(self, name)
            if np.ndim(val) == 0:
                names.append(name)
                continue
            T = val.shape[0]
            for a in range(T):
                for b in range(T):
                    for c in range(T):
                        if name == "beta5" or b <= c:
                            names.append(f"{name}[{a},{b},{c}]")
        return names

    @property
    def free_mask(self) -> np.ndarray:
        free = set(self.free)
        return np.array([s in free for s in self.slot_names()])

    def get(self, slot: str) -> float:
        name, idx = _parse_slot(slot)
        val = getattr(self, name)
        return float(val if idx is None else np.asarray(val)[idx])

    def set(self, slot: str, value: float) -> "CoefficientSet":
        name, idx = _parse_slot(slot)
        if idx is None:
            return replace(self, **{name: float(value)})
        arr = np.array(getattr(self, name), dtype=float)
        arr[idx] = value
        if name in ("gamma1", "gamma2"):
            a, b, c = idx
            arr[a, c, b] = value
        return replace(self, **{name: arr})

    def free_vector(self) -> np.ndarray:
        return np.array([self.get(s) for s in self.free])

    def with_free_vector(self, vec) -> "CoefficientSet":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (len(self.free),):
            raise ValueError(f"expected {len(self.free)} free values, got shape {vec.shape}")
        out = self
        for slot, v in zip(self.free, vec):
            out = out.set(slot, v)
        return out

    def with_free(self, free: Sequence[str]) -> "CoefficientSet":
        return replace(self, free=tuple(free))


def _parse_slot(slot: str):
    m = _SLOT.match(slot.strip())
    if not m:
        raise ValueError(f"malformed parameter name {slot!r}")
    idx = m.group("idx")
    if idx is None:
        return m.group("name"), None
    return m.group("name"), tuple(int(k) for k in idx.split(","))


@dataclass(frozen=True)
class Game:
    """Everything that defines the payoff structure, bundled for convenience."""

    ts: TypeSpace
    coef: CoefficientSet
    shock: ShockDistribution = field(default_factory=ShockDistribution)

    @property
    def T(self) -> int:
        return self.ts.T

    def with_coef(self, coef: CoefficientSet) -> "Game":
        return replace(self, coef=coef)


@dataclass(frozen=True)
class VMatrix:
    """Friends-in-common matrix with its spectral decomposition."""

    v: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    zero: np.ndarray

    @classmethod
    def from_matrix(cls, v) -> "VMatrix":
        v = np.asarray(v, dtype=float)
        lam, phi, zero = eigendecompose_sym(v)
        return cls(v, lam, phi, zero)

    @property
    def T(self) -> int:
        return self.v.shape[0]

    @property
    def active(self) -> np.ndarray:
        return ~self.zero

    def effective_eigenvalues(self) -> np.ndarray:
        """Eigenvalues with flagged-zero entries set exactly to zero."""
        return np.where(self.zero, 0.0, self.eigenvalues)


def eigendecompose_sym(m, sym_tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a small real symmetric matrix.

    Returns ``(lam, phi, zero)``: eigenvalues sorted descending, orthonormal
    eigenvectors as columns (each normalised so its largest-magnitude entry is
    positive), and a mask flagging eigenvalues that are zero relative to the
    largest one.
    """
    a = np.array(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    if np.max(np.abs(a - a.T), initial=0.0) > sym_tol:
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    T = a.shape[0]
    phi = np.eye(T)
    scale = np.max(np.abs(a), initial=0.0)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= 1e-300 or off <= 1e-17 * scale:
            break
        for p in range(T - 1):
            for q in range(p + 1, T):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.hypot(t, 1.0)
                s = t * c
                rot = np.eye(T)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
                phi = phi @ rot
    lam = np.diag(a).copy()
    order = np.argsort(-lam, kind="stable")
    lam, phi = lam[order], phi[:, order]
    for k in range(T):
        col = phi[:, k]
        if col[np.argmax(np.abs(col))] < 0:
            phi[:, k] = -col
    biggest = np.max(np.abs(lam), initial=0.0)
    zero = np.abs(lam) <= ZERO_EIG_RTOL * biggest if biggest > 0 else np.ones(T, dtype=bool)
    return lam, phi, zero


def _check_p(p, T):
    p = np.asarray(p, dtype=float)
    if p.shape != (T, T):
        raise ValueError(f"link probability matrix must be {T} x {T}")
    return p


def friends_matrix(s_i: int, counts, p, coef: CoefficientSet) -> np.ndarray:
    """``V`` for an agent of type ``s_i`` in a network with the given type counts.

    The indirect term averages over agents other than ``i`` and one
    representative of each of the two types ``s`` and ``t``.
    """
    counts = np.asarray(counts, dtype=np.int64)
    T = counts.size
    p = _check_p(p, T)
    n = int(counts.sum())
    g1 = coef.table("gamma1", T)[s_i]
    g2 = coef.table("gamma2", T)[s_i]
    v = p * p.T * g1
    if np.any(g2 != 0):
        if n < 4:
            raise ValueError("friends-in-common utility with gamma2 needs n >= 4")
        base = counts.copy()
        base[s_i] -= 1
        ind = np.empty((T, T))
        for s in range(T):
            for t in range(T):
                rest = base.copy()
                rest[s] -= 1
                rest[t] -= 1
                rest = np.maximum(rest, 0)
                ind[s, t] = np.sum(rest * p[s] * p[t]) / (n - 3)
        v = v + ind * g2
    return 0.5 * (v + v.T)


def v_matrix(i: int, pop: Population, p, coef: CoefficientSet) -> VMatrix:
    return VMatrix.from_matrix(friends_matrix(int(pop.type_of[i]), pop.counts, p, coef))


def utility_table(counts, p, game: Game, vs: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """``U[s, t]``: expected link utility of a type-``s`` agent towards a type-``t`` target.

    Includes the ``-V[t, t] / (n - 2)`` correction that turns the double sum
    over partners into a full quadratic form.
    """
    counts = np.asarray(counts, dtype=np.int64)
    T = counts.size
    p = _check_p(p, T)
    n = int(counts.sum())
    if n < 3:
        raise ValueError("expected utilities need n >= 3")
    coef, x = game.coef, game.ts.values
    b5 = coef.table("beta5", T)
    U = np.empty((T, T))
    for s in range(T):
        v = friends_matrix(s, counts, p, coef) if vs is None else vs[s]
        for t in range(T):
            rest = counts.copy()
            rest[s] -= 1
            rest[t] -= 1
            rest = np.maximum(rest, 0)
            indirect = np.sum(rest * p[t] * b5[s, t]) / (n - 2)
            U[s, t] = (coef.beta1 + x[s] @ coef.beta2 + np.abs(x[s] - x[t]) @ coef.beta3
                       + p[t, s] * coef.beta4_recip + indirect - v[t, t] / (n - 2))
    return U


def base_utility_exp(i: int, j: int, pop: Population, p, game: Game, v: VMatrix | None = None) -> float:
    """Expected utility index of the link ``i -> j`` (type counts exclude ``i`` and ``j``)."""
    if i == j:
        raise ValueError("i and j must differ")
    if pop.n < 3:
        raise ValueError("expected utilities need n >= 3")
    s, t = int(pop.type_of[i]), int(pop.type_of[j])
    vmat = (v.v if v is not None else friends_matrix(s, pop.counts, p, game.coef))
    vs = [vmat if k == s else np.zeros((pop.T, pop.T)) for k in range(pop.T)]
    return float(utility_table(pop.counts, p, game, vs)[s, t])


def limit_utility(s: int, t: int, p, game: Game) -> float:
    """Large-network limit of the link utility; no finite-n correction term."""
    T = game.T
    p = _check_p(p, T)
    coef, x, pi = game.coef, game.ts.values, game.ts.limit_probs
    b5 = coef.table("beta5", T)[s, t]
    return float(coef.beta1 + x[s] @ coef.beta2 + np.abs(x[s] - x[t]) @ coef.beta3
                 + p[t, s] * coef.beta4_recip + np.sum(pi * p[t] * b5))


def limit_utility_table(p, game: Game) -> np.ndarray:
    T = game.T
    return np.array([[limit_utility(s, t, p, game) for t in range(T)] for s in range(T)])


def limit_v(s_i: int, p, game: Game) -> VMatrix:
    T = game.T
    p = _check_p(p, T)
    pi = game.ts.limit_probs
    g1 = game.coef.table("gamma1", T)[s_i]
    g2 = game.coef.table("gamma2", T)[s_i]
    ind = (p * pi) @ p.T
    v = p * p.T * g1 + ind * g2
    return VMatrix.from_matrix(0.5 * (v + v.T))
