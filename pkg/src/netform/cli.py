"""Command-line entry point: ``netform {simulate,estimate,mc,equilibrium}``."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .equilibrium import ShockBank, solve_equilibrium_finite, solve_equilibrium_limit
from .estimate import solve_gmm
from .montecarlo import ExperimentConfig, run_experiment
from .rng import stream
from .simulate import DataError, draw_population, generate_network, read_edge_list, write_edge_list

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 2, 3, 4

log = logging.getLogger("netform")


def write_manifest(path: Path, command: str, args, seed: int, artifacts: list, started: float) -> None:
    lines = [
        f"command = {command}",
        f"config = {args.config}",
        f"seed = {seed}",
        f"artifacts = {', '.join(str(a) for a in artifacts)}",
        f"wall_clock_seconds = {time.time() - started:.3f}",
        f"version = {__version__}",
    ]
    path.write_text("\n".join(lines) + "\n")


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg: RunConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


def _mode(args, cfg: RunConfig) -> str:
    return args.mode.replace("-", "_") if args.mode else cfg.mode


def _format_matrix(p) -> str:
    return "\n".join(" ".join(f"{v:.10f}" for v in row) for row in p)


def cmd_simulate(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    out = _out(args, "network.txt")
    game = cfg.game
    lim = solve_equilibrium_limit(game, damping=cfg.eq_damping, tol=cfg.eq_tol_limit, max_iter=cfg.eq_max_iter)
    pop = draw_population(cfg.n, game.ts, stream(seed, 0, "population"))
    missing = [t for t in range(pop.T) if pop.counts[t] == 0]
    if missing:
        log.warning("types %s absent from the drawn population; their link frequencies are undefined", missing)
    bank = ShockBank(pop.counts, cfg.eq_R, game.shock, stream(seed, 0, "equilibrium"))
    fin = solve_equilibrium_finite(game, pop, bank, lim.p_star, cfg.eq_damping, cfg.eq_tol_finite,
                                   cfg.eq_max_iter, cfg.eq_method)
    data = generate_network(game, fin.p_star, pop, seed, 0, oracle_check=args.oracle_check and cfg.n <= 21)
    write_edge_list(data, out)
    manifest = out.with_suffix(out.suffix + ".manifest")
    write_manifest(manifest, "simulate", args, seed, [out], started)
    print(f"wrote {out} (n={data.n}, links={int(data.adjacency.sum())})")
    return EXIT_OK if lim.converged and fin.converged else EXIT_SOLVER


def cmd_estimate(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    if not args.data:
        raise ConfigError("--data: an edge-list file is required for estimate")
    data = read_edge_list(args.data)
    if data.pop.T != cfg.game.T:
        raise DataError(f"data has {data.pop.T} types but the config defines {cfg.game.T}")
    seed, mode = _seed(args, cfg), _mode(args, cfg)
    res = solve_gmm(data, cfg.game, mode, cfg.estimation, seed, 0)
    out = _out(args, "estimate.csv")
    rec = res.as_record()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(rec.keys())
    w.writerow(rec.values())
    out.write_text(buf.getvalue())
    record = out.with_suffix(".txt")
    record.write_text("".join(f"{k} = {v}\n" for k, v in rec.items()))
    write_manifest(out.with_suffix(out.suffix + ".manifest"), "estimate", args, seed, [out, record], started)
    for name, val, se in zip(res.names, res.theta_hat, res.std_errors if res.std_errors is not None
                             else [float("nan")] * len(res.names)):
        print(f"{name:>14} {val: .6f} ({se:.6f})")
    for note in res.notes:
        print(f"note: {note}")
    return EXIT_OK if res.converged else EXIT_SOLVER


def cmd_mc(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    modes = (_mode(args, cfg),) if args.mode else cfg.modes
    out = _out(args, "mc.csv")
    threads = args.threads or os.cpu_count() or 1
    summary, raw, tables = [], [], []
    failed = False
    for k, n in enumerate(cfg.sizes):
        ec = ExperimentConfig(n=n, reps=cfg.reps, R=cfg.eq_R, game=cfg.game, modes=modes, base_seed=seed,
                              estimation=replace(cfg.estimation), eq_damping=cfg.eq_damping,
                              eq_tol_limit=cfg.eq_tol_limit, eq_tol_finite=cfg.eq_tol_finite,
                              eq_max_iter=cfg.eq_max_iter, eq_method=cfg.eq_method,
                              oracle_check_max_n=cfg.oracle_check_max_n or (21 if args.oracle_check else 0),
                              fault_reps=cfg.fault_reps)
        report = run_experiment(ec, workers=threads)
        summary.append(report.to_csv(header=k == 0))
        raw.append(report.raw_csv(header=k == 0))
        tables.append(report.table(truth=cfg.game.coef.free_vector()))
        failed |= any(report.failures().values())
    out.write_text("".join(summary))
    raw_path = out.with_name(out.stem + "_reps.csv")
    raw_path.write_text("".join(raw))
    table_path = out.with_suffix(".table.txt")
    table_path.write_text("\n".join(tables))
    write_manifest(out.with_suffix(out.suffix + ".manifest"), "mc", args, seed, [out, raw_path, table_path], started)
    print("\n".join(tables))
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_equilibrium(args) -> int:
    cfg = load_config(args.config)
    game = cfg.game
    lim = solve_equilibrium_limit(game, damping=cfg.eq_damping, tol=cfg.eq_tol_limit, max_iter=cfg.eq_max_iter)
    rep = lim
    if args.finite:
        seed = _seed(args, cfg)
        pop = draw_population(cfg.n, game.ts, stream(seed, 0, "population"))
        bank = ShockBank(pop.counts, cfg.eq_R, game.shock, stream(seed, 0, "equilibrium"))
        rep = solve_equilibrium_finite(game, pop, bank, lim.p_star, cfg.eq_damping, cfg.eq_tol_finite,
                                       cfg.eq_max_iter, cfg.eq_method)
    kind = "finite" if args.finite else "limit"
    text = (f"# {kind} equilibrium link probabilities (row = proposer type)\n{_format_matrix(rep.p_star)}\n"
            f"residual = {rep.residual:.3e}\ntolerance = {rep.tolerance:.3e}\n"
            f"iterations = {rep.iterations}\nconverged = {int(rep.converged)}\n")
    if args.out:
        _out(args, "").write_text(text)
    print(text, end="")
    return EXIT_OK if rep.converged else EXIT_SOLVER


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="configuration file")
    common.add_argument("--out", help="output path")
    common.add_argument("--seed", type=int, help="base seed (overrides montecarlo.seed)")
    common.add_argument("--mode", choices=("finite-finite", "finite-limit", "limit-limit"))
    common.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
    common.add_argument("--oracle-check", action="store_true", help="verify rows against brute force (small n)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="netform", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate a network").set_defaults(func=cmd_simulate)
    e = sub.add_parser("estimate", parents=[common], help="estimate from an edge list")
    e.add_argument("--data", help="edge-list file")
    e.set_defaults(func=cmd_estimate)
    sub.add_parser("mc", parents=[common], help="run a Monte Carlo experiment").set_defaults(func=cmd_mc)
    q = sub.add_parser("equilibrium", parents=[common], help="solve for equilibrium link probabilities")
    g = q.add_mutually_exclusive_group()
    g.add_argument("--limit", dest="finite", action="store_false", help="limiting game (default)")
    g.add_argument("--finite", dest="finite", action="store_true", help="finite-n game")
    q.set_defaults(func=cmd_equilibrium, finite=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
