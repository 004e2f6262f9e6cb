"""Two-step estimation: type-pair link frequencies, then simulated GMM.

Every choice probability depends on the pair only through the types, so the
moment and all variance ingredients are assembled over the ``T x T`` cells
with the pair counts as weights.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, special

from .bestresponse import AgentProblem
from .equilibrium import ShockBank, ccp_simulated, limiting_ccp_matrix, omega_star_finite
from .model import Game, limit_utility_table
from .rng import stream
from .simulate import DataError, NetworkData

log = logging.getLogger(__name__)

MODES = ("finite_finite", "finite_limit", "limit_limit")


class SingularJacobianError(np.linalg.LinAlgError):
    """The moment Jacobian with respect to the parameters is not invertible."""


@dataclass
class EstimationConfig:
    R: int = 500
    p_floor: float = 1e-6
    step: float = 1e-4
    xatol: float = 1e-6
    fatol: float = 1e-10
    maxiter: int = 2000
    simplex_scale: float = 0.1
    starts: tuple = ()
    variance: bool = True


@dataclass
class EstimationResult:
    names: tuple
    theta_hat: np.ndarray
    p_hat: np.ndarray
    sigma: np.ndarray | None
    std_errors: np.ndarray | None
    moment_norm: float
    mode: str
    n: int
    R: int
    converged: bool
    iterations: int
    evaluations: int
    start: np.ndarray
    j_rank: int
    j_condition: float
    notes: list = field(default_factory=list)

    def as_record(self) -> dict:
        rec = {"mode": self.mode, "n": self.n, "R": self.R, "converged": int(self.converged),
               "iterations": self.iterations, "evaluations": self.evaluations,
               "moment_norm": f"{self.moment_norm:.12g}", "j_rank": self.j_rank,
               "j_condition": f"{self.j_condition:.6g}"}
        for k, name in enumerate(self.names):
            rec[f"theta[{name}]"] = f"{self.theta_hat[k]:.12g}"
            se = self.std_errors[k] if self.std_errors is not None else float("nan")
            rec[f"se[{name}]"] = f"{se:.12g}"
        T = self.p_hat.shape[0]
        for s in range(T):
            for t in range(T):
                rec[f"p_hat[{s},{t}]"] = f"{self.p_hat[s, t]:.12g}"
        if self.notes:
            rec["notes"] = "; ".join(self.notes)
        return rec


@dataclass(frozen=True)
class Cells:
    """Sufficient statistics of the data: pair counts and link counts per cell."""

    pairs: np.ndarray
    links: np.ndarray
    n: int

    @classmethod
    def from_data(cls, data: NetworkData) -> "Cells":
        return cls(data.pop.pair_counts(), data.link_counts(), data.n)

    @property
    def weight(self) -> float:
        return float(self.n * (self.n - 1))


def first_step(data: NetworkData) -> np.ndarray:
    cells = Cells.from_data(data)
    missing = np.argwhere(cells.pairs == 0)
    if missing.size:
        s, t = missing[0]
        raise DataError(f"no ordered pairs of types ({s}, {t}); link frequency undefined")
    return cells.links / cells.pairs


class LimitProvider:
    """Closed-form limiting choice probabilities at fixed beliefs."""

    finite = False

    def __init__(self, game: Game):
        self.game = game

    def __call__(self, theta, p) -> np.ndarray:
        return limiting_ccp_matrix(self.game.with_coef(self.game.coef.with_free_vector(theta)), p)


class FiniteProvider:
    """Simulated finite-n choice probabilities with draws held fixed."""

    finite = True

    def __init__(self, game: Game, data: NetworkData, bank: ShockBank, method: str = "smooth"):
        self.game, self.pop, self.bank, self.method = game, data.pop, bank, method

    def __call__(self, theta, p) -> np.ndarray:
        game = self.game.with_coef(self.game.coef.with_free_vector(theta))
        return ccp_simulated(game, p, self.pop, self.bank, self.method)


def _steps(x, step):
    return step * np.maximum(1.0, np.abs(x))


def ccp_theta_jacobian(provider, theta, p, step: float = 1e-4):
    """``P`` and its central-difference derivative, shape ``(T, T, d)``."""
    theta = np.asarray(theta, dtype=float)
    P = provider(theta, p)
    h = _steps(theta, step)
    d = np.empty(P.shape + (theta.size,))
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h[k]
        d[..., k] = (provider(theta + e, p) - provider(theta - e, p)) / (2 * h[k])
    return P, d


def ccp_p_jacobian(provider, theta, p, step: float = 1e-4) -> np.ndarray:
    """Derivative of ``P`` with respect to the beliefs, shape ``(T, T, T*T)``."""
    p = np.asarray(p, dtype=float)
    T = p.shape[0]
    d = np.empty((T, T, T * T))
    for k in range(T * T):
        e = np.zeros(T * T)
        e[k] = step
        e = e.reshape(T, T)
        d[..., k] = (provider(theta, p + e) - provider(theta, p - e)) / (2 * step)
    return d


def qmle_instrument(provider, theta, p, step: float = 1e-4, p_floor: float = 1e-6):
    """Quasi-likelihood weight ``grad P / (P (1 - P))`` per cell, with ``P``."""
    P, d = ccp_theta_jacobian(provider, theta, p, step)
    pc = np.clip(P, p_floor, 1.0 - p_floor)
    return d / (pc * (1.0 - pc))[..., None], P


def moment(P, cells: Cells, W) -> np.ndarray:
    """``sum_ij W_ij (G_ij - P_ij) / (n (n-1))`` aggregated over cells."""
    resid = cells.links - cells.pairs * P
    return np.einsum("stk,st->k", W, resid) / cells.weight


def probit_mle(X, offset, successes, trials, start=None):
    """Grouped-data probit maximum likelihood."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y, m = np.asarray(successes, dtype=float), np.asarray(trials, dtype=float)

    def nll(b):
        z = offset + X @ b
        lp, lq = special.log_ndtr(z), special.log_ndtr(-z)
        # Mills ratios from log-space to stay finite in the tails
        phi = -0.5 * z * z - 0.5 * math.log(2 * math.pi)
        r1, r0 = np.exp(phi - lp), np.exp(phi - lq)
        val = -(y @ lp + (m - y) @ lq)
        grad = -X.T @ (y * r1 - (m - y) * r0)
        return val, grad

    b0 = np.zeros(X.shape[1]) if start is None else np.asarray(start, dtype=float)
    res = optimize.minimize(nll, b0, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 1000})
    return res.x


def preliminary_estimate(game: Game, cells: Cells, p_hat) -> np.ndarray:
    """Probit on the limiting model with the friends-in-common terms switched off.

    With those terms off the limiting index is linear in the remaining
    coefficients, so it is an ordinary grouped probit.  Free
    friends-in-common coefficients start at zero.
    """
    coef = replace(game.coef, gamma1=_zeros_like(game.coef.gamma1), gamma2=_zeros_like(game.coef.gamma2))
    free = list(coef.free)
    lin = [k for k, s in enumerate(free) if not s.startswith("gamma")]
    theta = np.zeros(len(free))
    base = coef.with_free_vector(theta)

    def index(c):
        return limit_utility_table(p_hat, game.with_coef(c)).ravel()

    offset = index(base)
    X = np.column_stack([index(base.set(free[k], 1.0)) - offset for k in lin]) if lin else np.zeros((offset.size, 0))
    if lin:
        theta[lin] = probit_mle(X, offset, cells.links.ravel(), cells.pairs.ravel())
    return theta


def _zeros_like(val):
    return 0.0 if np.ndim(val) == 0 else np.zeros_like(val)


class GMMObjective:
    """Continuously updated GMM criterion ``|Psi(theta)|^2``."""

    def __init__(self, cells: Cells, p_hat, moment_provider, instrument_provider, config: EstimationConfig):
        self.cells, self.p_hat, self.cfg = cells, p_hat, config
        self.mp, self.ip = moment_provider, instrument_provider
        self.evaluations = 0

    def psi(self, theta):
        W, P_inst = qmle_instrument(self.ip, theta, self.p_hat, self.cfg.step, self.cfg.p_floor)
        P = P_inst if self.mp is self.ip else self.mp(theta, self.p_hat)
        return moment(P, self.cells, W)

    def __call__(self, theta):
        self.evaluations += 1
        try:
            val = float(np.sum(self.psi(theta) ** 2))
        except (FloatingPointError, np.linalg.LinAlgError, ValueError):
            return np.inf
        return val if np.isfinite(val) else np.inf


def _simplex(x0, scale):
    x0 = np.asarray(x0, dtype=float)
    pts = [x0]
    for k in range(x0.size):
        x = x0.copy()
        x[k] += scale * max(1.0, abs(x0[k]))
        pts.append(x)
    return np.array(pts)


def build_providers(mode: str, game: Game, data: NetworkData, R: int, base_seed: int, rep: int = 0,
                    method: str = "smooth"):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    counts = data.pop.counts
    lim = LimitProvider(game)
    if mode == "limit_limit":
        return lim, lim
    mbank = ShockBank(counts, R, game.shock, stream(base_seed, rep, "moment"))
    mp = FiniteProvider(game, data, mbank, method)
    if mode == "finite_limit":
        return mp, lim
    ibank = ShockBank(counts, R, game.shock, stream(base_seed, rep, "instrument"))
    return mp, FiniteProvider(game, data, ibank, method)


def solve_gmm(data: NetworkData, game: Game, mode: str, config: EstimationConfig | None = None,
              base_seed: int = 0, rep: int = 0) -> EstimationResult:
    """Simulated GMM with quasi-likelihood instruments and a Nelder-Mead search."""
    cfg = config or EstimationConfig()
    if not game.coef.free:
        raise ValueError("no free parameters to estimate")
    cells = Cells.from_data(data)
    p_hat = first_step(data)
    mp, ip = build_providers(mode, game, data, cfg.R, base_seed, rep)
    obj = GMMObjective(cells, p_hat, mp, ip, cfg)
    starts = [preliminary_estimate(game, cells, p_hat)] + [np.asarray(s, dtype=float) for s in cfg.starts]
    best, its = None, 0
    for x0 in starts:
        res = optimize.minimize(obj, x0, method="Nelder-Mead", options={
            "xatol": cfg.xatol, "fatol": cfg.fatol, "maxiter": cfg.maxiter,
            "initial_simplex": _simplex(x0, cfg.simplex_scale)})
        its += res.nit
        if best is None or res.fun < best[0].fun:
            best = (res, x0)
    res, x0 = best
    theta = res.x
    notes = [] if res.success else [f"simplex stopped: {res.message}"]
    result = EstimationResult(
        names=tuple(game.coef.free), theta_hat=theta, p_hat=p_hat, sigma=None, std_errors=None,
        moment_norm=float(np.linalg.norm(obj.psi(theta))), mode=mode, n=data.n,
        R=cfg.R if mode != "limit_limit" else 0, converged=bool(res.success), iterations=its,
        evaluations=obj.evaluations, start=x0, j_rank=0, j_condition=float("inf"), notes=notes)
    J = jacobian_theta(theta, p_hat, cells, mp, ip, cfg)
    result.j_rank, result.j_condition = int(np.linalg.matrix_rank(J)), float(np.linalg.cond(J))
    if cfg.variance:
        try:
            sigma, se = sandwich_variance(theta, p_hat, data, game, mp, ip, mode, cfg)
            result.sigma, result.std_errors = sigma, se
        except SingularJacobianError as exc:
            result.notes.append(str(exc))
    return result


def jacobian_theta(theta, p_hat, cells: Cells, mp, ip, cfg: EstimationConfig) -> np.ndarray:
    W, _ = qmle_instrument(ip, theta, p_hat, cfg.step, cfg.p_floor)
    _, dP = ccp_theta_jacobian(mp, theta, p_hat, cfg.step)
    return np.einsum("st,stk,stl->kl", cells.pairs, W, dP) / cells.weight


def sandwich_variance(theta, p_hat, data: NetworkData, game: Game, mp, ip, mode: str,
                      config: EstimationConfig | None = None):
    """Asymptotic covariance of the estimator and the implied standard errors.

    Combines the link-choice noise, the influence of each agent's auxiliary
    variable and the first-step correction through augmented instruments.
    Expectations over the pair shock are exact: at the limiting auxiliary value
    the link indicator is a single threshold event.
    """
    cfg = config or EstimationConfig()
    cells = Cells.from_data(data)
    pop, n, T = data.pop, data.n, data.pop.T
    W, _ = qmle_instrument(ip, theta, p_hat, cfg.step, cfg.p_floor)
    _, dP = ccp_theta_jacobian(mp, theta, p_hat, cfg.step)
    dPp = ccp_p_jacobian(mp, theta, p_hat, cfg.step)
    N, nn = cells.pairs, cells.weight
    d = W.shape[-1]
    J = np.einsum("st,stk,stl->kl", N, W, dP) / nn
    sv = np.linalg.svd(J, compute_uv=False)
    rank = int(np.sum(sv > sv[0] * 1e-10)) if sv[0] > 0 else 0
    if rank < d:
        raise SingularJacobianError(
            f"moment Jacobian J_theta is singular (rank {rank} of {d}); "
            "the moments do not locally identify the free parameters")
    A = np.einsum("st,stk,stq->kq", N, W, dPp) / nn
    # Q_st has a single nonzero entry nn / N_st at position (s, t)
    Wt = W - (A.reshape(d, T, T) * (nn / N)[None]).transpose(1, 2, 0)
    gm = game.with_coef(game.coef.with_free_vector(theta))
    shock = gm.shock
    meat = np.zeros((d, d))
    for s in range(T):
        prob = AgentProblem.for_type(s, pop, p_hat, gm)
        ws = omega_star_finite(prob, shock)
        lam, phi = prob.vm.effective_eigenvalues(), prob.vm.eigenvectors
        K = lam[:, None] * phi.T
        a = prob.u + prob.scale * (phi @ (lam * ws.omega))
        Pstar, f = shock.cdf(a), shock.pdf(a)
        caps = prob.caps
        Jw = np.einsum("t,kt,ut->ku", caps * f * prob.scale, Wt[s].T, K) / (n - 1)
        lam_plus = np.where(lam != 0, 1.0 / np.where(lam != 0, lam, 1.0), 0.0)
        ginv = lam_plus[:, None] * np.linalg.inv(ws.inner)
        B = -Jw @ ginv
        lw = lam * ws.omega
        for t in range(T):
            alpha = Wt[s, t] + B @ K[:, t]
            beta = -Wt[s, t] * Pstar[t] - B @ lw
            ab = alpha + beta
            E = Pstar[t] * np.outer(ab, ab) + (1.0 - Pstar[t]) * np.outer(beta, beta)
            meat += N[s, t] * E / nn
    Jinv = np.linalg.inv(J)
    sigma = Jinv @ meat @ Jinv.T
    if mode != "limit_limit":
        # simulated moments add R^-1 of the sampling variance
        sigma *= 1.0 + 1.0 / cfg.R
    sigma = 0.5 * (sigma + sigma.T)
    se = np.sqrt(np.clip(np.diag(sigma), 0.0, None) / nn)
    return sigma, se
