"""Reproducible, order-independent random streams.

Every stream is a Philox generator keyed by ``(base_seed, rep, purpose, *extra)``
so results never depend on the order in which replications or agents run.
"""
from __future__ import annotations

import numpy as np

PURPOSES = {
    "population": 0,
    "equilibrium": 1,
    "data": 2,
    "moment": 3,
    "instrument": 4,
}


def stream(base_seed: int, rep: int, purpose: str, *extra: int) -> np.random.Generator:
    if purpose not in PURPOSES:
        raise KeyError(f"unknown stream purpose {purpose!r}")
    key = (int(rep), PURPOSES[purpose]) + tuple(int(e) for e in extra)
    ss = np.random.SeedSequence(int(base_seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
