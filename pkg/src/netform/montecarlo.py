"""Replicated experiments: equilibrium, data generation and estimation per replication."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .equilibrium import ShockBank, solve_equilibrium_finite, solve_equilibrium_limit
from .estimate import MODES, EstimationConfig, solve_gmm
from .model import Game
from .rng import stream
from .simulate import draw_population, generate_network

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("mode", "n", "parameter", "mean", "sd", "reps_used")
RAW_COLUMNS = ("rep", "mode", "n", "parameter", "estimate", "se", "converged", "j_rank")


@dataclass
class ExperimentConfig:
    n: int
    reps: int
    R: int
    game: Game
    modes: tuple = ("finite_finite",)
    base_seed: int = 0
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    eq_damping: float = 0.5
    eq_tol_limit: float = 1e-10
    eq_tol_finite: float | None = None
    eq_max_iter: int = 1000
    eq_method: str = "smooth"
    oracle_check_max_n: int = 0
    fault_reps: tuple = ()

    def __post_init__(self):
        if self.reps < 1 or self.R < 1:
            raise ValueError("reps and R must be at least 1")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ValueError(f"unknown modes {bad}")


@dataclass
class RepResult:
    rep: int
    estimates: dict
    std_errors: dict
    converged: dict
    j_rank: dict
    errors: dict
    p_star: np.ndarray | None = None


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    names: tuple
    reps: list

    def summary(self) -> list[tuple]:
        rows = []
        for mode in self.config.modes:
            est = np.array([r.estimates[mode] for r in self.reps if mode in r.estimates])
            used = est.shape[0]
            for k, name in enumerate(self.names):
                mean = float(est[:, k].mean()) if used else float("nan")
                sd = float(est[:, k].std(ddof=1)) if used > 1 else float("nan")
                rows.append((mode, self.config.n, name, mean, sd, used))
        return rows

    def failures(self) -> dict:
        return {m: [r.rep for r in self.reps if m in r.errors] for m in self.config.modes}

    def mean_std_errors(self, mode: str) -> np.ndarray:
        se = [r.std_errors[mode] for r in self.reps if r.std_errors.get(mode) is not None]
        return np.mean(se, axis=0) if se else np.full(len(self.names), np.nan)

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(SUMMARY_COLUMNS)
        for mode, n, name, mean, sd, used in self.summary():
            w.writerow((mode, n, name, f"{mean:.10g}", f"{sd:.10g}", used))
        return buf.getvalue()

    def raw_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(RAW_COLUMNS)
        for r in self.reps:
            for mode in self.config.modes:
                if mode not in r.estimates:
                    continue
                se = r.std_errors.get(mode)
                for k, name in enumerate(self.names):
                    w.writerow((r.rep, mode, self.config.n, name, f"{r.estimates[mode][k]:.10g}",
                                f"{se[k]:.10g}" if se is not None else "nan",
                                int(r.converged[mode]), r.j_rank[mode]))
        return buf.getvalue()

    def table(self, truth=None) -> str:
        """Plain-text table: one row per mode, mean with the SD in parentheses below."""
        width = max(12, *(len(nm) + 2 for nm in self.names))
        head = f"{'mode':<14}{'n':>6}  " + "".join(f"{nm:>{width}}" for nm in self.names)
        lines = [head]
        if truth is not None:
            lines.append(f"{'truth':<14}{'':>6}  " + "".join(f"{v:>{width}.3f}" for v in truth))
        rows = self.summary()
        for mode in self.config.modes:
            sel = [r for r in rows if r[0] == mode]
            lines.append(f"{mode:<14}{self.config.n:>6}  " + "".join(f"{r[3]:>{width}.3f}" for r in sel))
            lines.append(f"{'':<14}{'':>6}  " + "".join(f"{'(' + format(r[4], '.3f') + ')':>{width}}" for r in sel))
        fails = self.failures()
        lines.append("reps used: " + ", ".join(
            f"{m}={self.config.reps - len(fails[m])}/{self.config.reps}" for m in self.config.modes))
        return "\n".join(lines) + "\n"


def _limit_start(cfg: ExperimentConfig):
    return solve_equilibrium_limit(cfg.game, damping=cfg.eq_damping, tol=cfg.eq_tol_limit,
                                   max_iter=cfg.eq_max_iter)


def run_rep(cfg: ExperimentConfig, rep: int, p_limit=None) -> RepResult:
    """One replication.  Failures are recorded per mode rather than raised."""
    out = RepResult(rep, {}, {}, {}, {}, {})
    game = cfg.game
    try:
        if p_limit is None:
            lim = _limit_start(cfg)
            if not lim.converged:
                raise RuntimeError(f"limiting equilibrium residual {lim.residual:.3g}")
            p_limit = lim.p_star
        pop = draw_population(cfg.n, game.ts, stream(cfg.base_seed, rep, "population"))
        bank = ShockBank(pop.counts, cfg.R, game.shock, stream(cfg.base_seed, rep, "equilibrium"))
        # an injected fault asks for an unattainable tolerance, so the solver reports non-convergence
        fault = rep in cfg.fault_reps
        tol = -1.0 if fault else cfg.eq_tol_finite
        fin = solve_equilibrium_finite(game, pop, bank, p_limit, cfg.eq_damping, tol,
                                       min(cfg.eq_max_iter, 20) if fault else cfg.eq_max_iter, cfg.eq_method)
        if not fin.converged:
            raise RuntimeError(f"finite equilibrium residual {fin.residual:.3g} above {fin.tolerance:.3g}")
        out.p_star = fin.p_star
        check = 0 < cfg.n <= cfg.oracle_check_max_n
        data = generate_network(game, fin.p_star, pop, cfg.base_seed, rep, oracle_check=check)
    except Exception as exc:  # noqa: BLE001 - any failure excludes the replication
        log.warning("rep %d failed before estimation: %s", rep, exc)
        for mode in cfg.modes:
            out.errors[mode] = str(exc)
        return out
    for mode in cfg.modes:
        try:
            res = solve_gmm(data, game, mode, cfg.estimation, cfg.base_seed, rep)
        except Exception as exc:  # noqa: BLE001
            log.warning("rep %d mode %s failed: %s", rep, mode, exc)
            out.errors[mode] = str(exc)
            continue
        out.estimates[mode] = res.theta_hat
        out.std_errors[mode] = res.std_errors
        out.converged[mode] = res.converged
        out.j_rank[mode] = res.j_rank
    return out


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> ExperimentReport:
    """All replications; the report is a fold over rep index, whatever the scheduling."""
    lim = _limit_start(cfg)
    p_limit = lim.p_star if lim.converged else None
    reps = range(cfg.reps)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_rep, [cfg] * cfg.reps, reps, [p_limit] * cfg.reps))
    else:
        results = [run_rep(cfg, r, p_limit) for r in reps]
    results.sort(key=lambda r: r.rep)
    return ExperimentReport(cfg, tuple(cfg.game.coef.free), results)


def with_size(cfg: ExperimentConfig, n: int) -> ExperimentConfig:
    return replace(cfg, n=n)
