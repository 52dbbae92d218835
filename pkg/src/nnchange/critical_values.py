"""Critical values for the weighted score statistic.

For ``(eta, gamma) != (0, 1/2)`` the null limit is the supremum of the
weighted Euclidean norm of a ``rank``-dimensional standard Brownian bridge.
Its quantiles are simulated once per key and cached as text tables.  The
``(0, 1/2)`` corner is calibrated by a parametric bootstrap instead.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nnchange.errors import CacheWarning, FitNotConverged, UseFiniteSampleCalibration
from nnchange.fitting import FitConfig, embed_series, residuals
from nnchange.nn_model import eval_network
from nnchange.score_stats import WeightConfig, weight

logger = logging.getLogger(__name__)

TABLE_VERSION = 1
DEFAULT_GRID = 5000
DEFAULT_REPS = 100_000
#: Expected overshoot of a continuous Brownian maximum over its discrete
#: maximum, in units of sqrt(step): -zeta(1/2) / sqrt(2 pi).
DISCRETE_MONITORING_SHIFT = 0.5825971579390106
TABLE_LEVELS = tuple(np.round(np.arange(1, 1000) / 1000.0, 3).tolist()) + (0.9995, 0.9999)
_CHUNK_ELEMENTS = 2_500_000

_memo: dict[tuple, "QuantileTable"] = {}


@dataclass(frozen=True, eq=False)
class QuantileTable:
    rank: int
    eta: float
    gamma: float
    grid_n: int
    reps: int
    seed: int
    quantiles: dict[float, float] = field(repr=False)
    continuity_correction: bool = True

    @property
    def key(self) -> tuple:
        return (self.rank, self.eta, self.gamma, self.grid_n, self.reps, self.seed, self.continuity_correction)

    def value(self, level: float) -> float:
        """Quantile at probability ``level``, interpolating between table levels."""
        if not 0.0 < level < 1.0:
            raise ValueError(f"level must lie in (0, 1), got {level}")
        levels = np.fromiter(self.quantiles.keys(), float)
        values = np.fromiter(self.quantiles.values(), float)
        hit = np.flatnonzero(np.abs(levels - level) < 1e-12)
        if hit.size:
            return float(values[hit[0]])
        return float(np.interp(level, levels, values))

    def __eq__(self, other):
        if not isinstance(other, QuantileTable):
            return NotImplemented
        return self.key == other.key and self.quantiles == other.quantiles

    def to_text(self) -> str:
        lines = [
            "# nnchange weighted Brownian-bridge supremum quantiles",
            f"version: {TABLE_VERSION}",
            f"rank: {self.rank}",
            f"eta: {self.eta!r}",
            f"gamma: {self.gamma!r}",
            f"grid_n: {self.grid_n}",
            f"reps: {self.reps}",
            f"seed: {self.seed}",
            f"continuity_correction: {str(self.continuity_correction).lower()}",
            "---",
        ]
        lines += [f"{lev!r} {val!r}" for lev, val in self.quantiles.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "QuantileTable":
        header, _, body = text.partition("---\n")
        meta = {}
        for line in header.splitlines():
            if line.startswith("#") or not line.strip():
                continue
            name, _, val = line.partition(":")
            meta[name.strip()] = val.strip()
        if int(meta["version"]) != TABLE_VERSION:
            raise ValueError(f"unsupported table version {meta['version']}")
        quantiles = {}
        for line in body.splitlines():
            if line.strip():
                lev, val = line.split()
                quantiles[float(lev)] = float(val)
        return cls(
            rank=int(meta["rank"]),
            eta=float(meta["eta"]),
            gamma=float(meta["gamma"]),
            grid_n=int(meta["grid_n"]),
            reps=int(meta["reps"]),
            seed=int(meta["seed"]),
            quantiles=quantiles,
            continuity_correction=meta.get("continuity_correction", "true") == "true",
        )


def bridge_sup_draws(
    rank: int,
    cfg: WeightConfig,
    grid_n: int = DEFAULT_GRID,
    reps: int = DEFAULT_REPS,
    seed: int = 0,
    continuity_correction: bool = True,
) -> np.ndarray:
    """Replications of ``sup_{eta<s<1-eta} ||B(s)|| / (s(1-s))^gamma``.

    ``B`` is a standard ``rank``-dimensional Brownian bridge observed on the
    grid ``j / grid_n``.  With ``continuity_correction`` each replication's
    grid maximum is shifted up by ``0.5826 * w(s*) / sqrt(grid_n)``, the
    leading-order gap between a discretely and a continuously monitored
    Brownian maximum, evaluated at the weight ``w(s*)`` of the maximizer.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if cfg.is_darling_erdos_corner:
        raise UseFiniteSampleCalibration("(eta, gamma) = (0, 1/2) has no bridge limit; use finite-sample calibration")
    s = np.arange(1, grid_n) / grid_n
    w = weight(s, cfg)
    active = np.flatnonzero(w > 0)
    if active.size == 0:
        raise ValueError(f"grid_n={grid_n} leaves no grid point inside ({cfg.eta}, {1 - cfg.eta})")
    s_act, w_act = s[active], w[active]
    chunk = max(1, _CHUNK_ELEMENTS // (grid_n * rank))
    n_chunks = math.ceil(reps / chunk)
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    out = np.empty(reps)
    step = 1.0 / np.sqrt(grid_n)
    for c, ss in enumerate(streams):
        m = min(chunk, reps - c * chunk)
        rng = np.random.default_rng(ss)
        z = rng.standard_normal((m, grid_n, rank))
        z *= step
        walk = np.cumsum(z, axis=1)
        end = walk[:, -1:, :]
        bridge = walk[:, active, :] - s_act[None, :, None] * end
        norms = np.sqrt(np.einsum("mjr,mjr->mj", bridge, bridge)) * w_act
        arg = np.argmax(norms, axis=1)
        sup = norms[np.arange(m), arg]
        if continuity_correction:
            sup = sup + DISCRETE_MONITORING_SHIFT * step * w_act[arg]
        out[c * chunk : c * chunk + m] = sup
    return out


def simulate_bridge_sup(
    rank: int,
    cfg: WeightConfig,
    grid_n: int = DEFAULT_GRID,
    reps: int = DEFAULT_REPS,
    seed: int = 0,
    continuity_correction: bool = True,
) -> QuantileTable:
    """Empirical quantile table of the weighted bridge supremum."""
    if grid_n < 1000:
        raise ValueError("grid_n must be >= 1000")
    draws = bridge_sup_draws(rank, cfg, grid_n, reps, seed, continuity_correction)
    values = np.quantile(draws, TABLE_LEVELS)
    values = np.maximum.accumulate(values)
    quantiles = {lev: float(v) for lev, v in zip(TABLE_LEVELS, values)}
    return QuantileTable(rank, float(cfg.eta), float(cfg.gamma), grid_n, reps, seed, quantiles, continuity_correction)


def default_cache_dir() -> Path:
    env = os.environ.get("NNCHANGE_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "nnchange"


def _cache_name(rank, cfg, grid_n, reps, seed, cc) -> str:
    return f"bridge_r{rank}_eta{cfg.eta:g}_gamma{cfg.gamma:g}_g{grid_n}_n{reps}_s{seed}_cc{int(cc)}.txt"


def quantile_table(
    rank: int,
    cfg: WeightConfig,
    cache_dir=None,
    grid_n: int = DEFAULT_GRID,
    reps: int = DEFAULT_REPS,
    seed: int = 0,
    continuity_correction: bool = True,
) -> QuantileTable:
    """Load the table for this key from the cache, simulating and storing it if absent."""
    key = (rank, float(cfg.eta), float(cfg.gamma), grid_n, reps, seed, continuity_correction)
    cache_dir = default_cache_dir() if cache_dir is None else Path(cache_dir)
    memo_key = key + (str(cache_dir),)
    if memo_key in _memo:
        return _memo[memo_key]
    path = cache_dir / _cache_name(rank, cfg, grid_n, reps, seed, continuity_correction)
    table = None
    if path.exists():
        try:
            table = QuantileTable.from_text(path.read_text())
            if table.key != key:
                logger.warning("cache file %s does not match its key; recomputing", path)
                table = None
        except (OSError, ValueError, KeyError) as exc:
            logger.warning("unreadable cache file %s (%s); recomputing", path, exc)
            table = None
    if table is None:
        table = simulate_bridge_sup(rank, cfg, grid_n, reps, seed, continuity_correction)
        try:
            cache_dir.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".tmp{os.getpid()}")
            tmp.write_text(table.to_text())
            os.replace(tmp, path)
        except OSError as exc:
            warnings.warn(f"could not write critical-value cache {path}: {exc}", CacheWarning, stacklevel=2)
    _memo[memo_key] = table
    return table


def critical_value(
    rank: int,
    cfg: WeightConfig,
    level: float = 0.95,
    cache_dir=None,
    grid_n: int = DEFAULT_GRID,
    reps: int = DEFAULT_REPS,
    seed: int = 0,
) -> float:
    """``level``-quantile (e.g. 0.95 for a 5% test) of the null limit."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    return quantile_table(rank, cfg, cache_dir, grid_n, reps, seed).value(level)


def clear_memo():
    _memo.clear()


def kolmogorov_cdf(x, terms: int = 100):
    """``P(sup |B| <= x) = 1 - 2 sum_k (-1)^(k-1) exp(-2 k^2 x^2)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    k = np.arange(1, terms + 1)
    sign = np.where(k % 2 == 1, 1.0, -1.0)
    out = 1.0 - 2.0 * (sign * np.exp(-2.0 * np.outer(x, k) ** 2)).sum(axis=1)
    out[x <= 0] = 0.0
    return np.clip(out, 0.0, 1.0)


def simulate_network_series(theta, data, innovations: np.ndarray) -> np.ndarray:
    """Raw series ``X*`` driven by the fitted network and the given innovations.

    The first ``p`` values are the observed initial lags; exogenous regressors
    are kept as observed.
    """
    p, d = data.shape.p, data.shape.d
    n = data.n
    if p == 0:
        return eval_network(theta, data.y) + innovations
    init = data.y[0, :p][::-1]  # X_{1-p}, ..., X_0
    raw = np.empty(n + p)
    raw[:p] = init
    exo = data.y[:, p:]
    reg = np.empty(p + d)
    nu0, nu, a, b = theta.nu0, theta.nu, theta.a, theta.b
    h = theta.shape.h
    for t in range(n):
        reg[:p] = raw[t : t + p][::-1]
        if d:
            reg[p:] = exo[t]
        val = nu0
        if h:
            val += float(nu @ (1.0 / (1.0 + np.exp(-(a @ reg + b)))))
        raw[t + p] = val + innovations[t]
    return raw


def finite_sample_null_quantile(
    fitted,
    data,
    cfg: WeightConfig,
    a_rule: str = "residual",
    reps: int = 200,
    seed: int = 0,
    level: float = 0.95,
    fit_cfg=None,
    return_draws: bool = False,
):
    """Parametric-bootstrap ``level``-quantile of ``T_n`` under no change.

    Each replication simulates a series from the fitted network with
    innovations drawn i.i.d. from the centered fit residuals, refits it, and
    recomputes the statistic with the same weight-matrix rule.
    """
    from nnchange.procedure import compute_statistics  # procedure depends on this module

    if reps < 200:
        raise ValueError("reps must be >= 200")
    if not fitted.converged:
        raise FitNotConverged("the fitted network did not converge; bootstrap calibration needs a converged fit")
    fit_cfg = fit_cfg or FitConfig()
    theta = fitted.theta_hat
    sub = data.with_h(theta.shape.h)
    res = residuals(theta, sub)
    res = res - res.mean()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    draws = np.empty(reps)
    for r in range(reps):
        eps = rng.choice(res, size=sub.n, replace=True)
        raw = simulate_network_series(theta, sub, eps)
        exo = sub.y[:, sub.shape.p :] if sub.shape.d else None
        boot = embed_series(raw, exo, sub.shape) if sub.shape.p else type(sub)(raw, sub.y, sub.shape)
        stats = compute_statistics(boot, [a_rule], cfg, fit_cfg, warm_start=[theta])
        draws[r] = stats[a_rule][0]
    q = float(np.quantile(draws, level))
    return (q, draws) if return_draws else q
