"""Counter-based random streams for reproducible parallel sampling.

Every shot i of a batch owns an independent stream derived from the master
seed by the splitmix64 construction: the shot seed is the i-th output of
the splitmix64 stream seeded with the master seed, and draw j of that shot
is the j-th output of a splitmix64 stream seeded with the shot seed.  All
draws are pure functions of (master_seed, shot_index, draw_index), so any
partition of a batch across workers produces identical results, and a
single shot can be replayed from its recorded seed alone.
"""
from __future__ import annotations

import numpy as np

__all__ = ["shot_seed", "shot_seeds", "uniform", "uniforms",
           "poisson_from_uniform", "geometric_from_uniform"]

_U64 = np.uint64
_GAMMA = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_INV_2_53 = 2.0 ** -53


def _finalize(z):
    # splitmix64 output mixing
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def _to_unit(z):
    return (z >> _U64(11)).astype(np.float64) * _INV_2_53


def shot_seeds(master_seed: int, shot_index: np.ndarray) -> np.ndarray:
    """Per-shot stream seeds for a vector of shot indices."""
    idx = np.asarray(shot_index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _finalize(_U64(master_seed & 0xFFFFFFFFFFFFFFFF)
                         + (idx + _U64(1)) * _GAMMA)


def shot_seed(master_seed: int, shot_index: int) -> int:
    return int(shot_seeds(master_seed, np.array([shot_index]))[0])


def uniforms(seeds: np.ndarray, draw_index: int) -> np.ndarray:
    """Uniform [0, 1) draw number `draw_index` for each stream in `seeds`."""
    with np.errstate(over="ignore"):
        z = _finalize(np.asarray(seeds, dtype=np.uint64)
                      + _U64((draw_index + 1) & 0xFFFFFFFFFFFFFFFF) * _GAMMA)
    return _to_unit(z)


def uniform(seed: int, draw_index: int) -> float:
    return float(uniforms(np.array([seed], dtype=np.uint64), draw_index)[0])


def poisson_from_uniform(u: np.ndarray, lam: np.ndarray,
                         kmax: int | None = None) -> np.ndarray:
    """Poisson counts by inverse CDF, one uniform per count.

    Works elementwise for arrays of matching shape.  Counts beyond `kmax`
    (by default the 1e-14 upper quantile of the largest rate) are clamped;
    for the per-window rates used here that tail is negligible.
    """
    u = np.asarray(u, dtype=np.float64)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), u.shape)
    if kmax is None:
        m = float(lam.max(initial=0.0))
        kmax = int(m + 10.0 * np.sqrt(m) + 20.0)
    out = np.zeros(u.shape, dtype=np.int64)
    cdf0 = np.exp(-lam)
    pending = np.flatnonzero((u >= cdf0).ravel())
    if pending.size == 0:
        return out
    uf = u.ravel()[pending]
    lf = lam.ravel()[pending]
    p = cdf0.ravel()[pending].copy()
    cdf = p.copy()
    result = np.full(pending.size, kmax, dtype=np.int64)
    active = np.arange(pending.size)
    for k in range(1, kmax + 1):
        p = p * lf / k
        cdf = cdf + p
        done = uf < cdf
        if done.any():
            result[active[done]] = k
            keep = ~done
            active = active[keep]
            uf, lf, p, cdf = uf[keep], lf[keep], p[keep], cdf[keep]
            if active.size == 0:
                break
    out.ravel()[pending] = result
    return out


def geometric_from_uniform(u, rate):
    """First-success trial index (>= 1) for per-trial probability `rate`.

    rate == 0 yields +inf (the event never occurs).
    """
    u = np.asarray(u, dtype=np.float64)
    rate = np.broadcast_to(np.asarray(rate, dtype=np.float64), u.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.floor(np.log1p(-u) / np.log1p(-np.minimum(rate, 1 - 1e-15))) + 1.0
    return np.where(rate > 0, k, np.inf)
