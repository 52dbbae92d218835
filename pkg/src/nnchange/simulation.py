"""Simulation families, power studies and estimator-distribution studies.

Families (all first order, ``X_t = g(X_{t-1}) + eps_t`` with standard
normal errors):

* ``GAR1``..``GAR4``: network-type regression functions, before the change
  ``0.5 + 1 / (1 + exp(0.5 (1 + 0.7 x)))`` and after it
  ``mu + alpha / (1 + exp(0.5 (1 + beta x)))``;
* ``AR1``, ``AR2``: linear functions;
* ``TAR1``, ``TAR2``: threshold functions;
* ``NULL``: the GAR pre-change function throughout.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from nnchange.changepoint import (
    ChangeMagnitude,
    LimitLawSpec,
    change_magnitude_D,
    model_xi_sampler,
    simulate_limit_argmax,
)
from nnchange.critical_values import DEFAULT_REPS
from nnchange.errors import InvalidFamily
from nnchange.fitting import FitConfig, embed_series, fit_network
from nnchange.nn_model import NetworkParams, NetworkShape, eval_network
from nnchange.procedure import compute_statistics, null_critical_value
from nnchange.score_stats import WeightConfig, residual_matrix_A, selection_matrix_A

logger = logging.getLogger(__name__)


def _gar(mu, alpha, beta):
    def g(x):
        return mu + alpha / (1.0 + np.exp(0.5 * (1.0 + beta * x)))

    return g


_gar_pre = _gar(0.5, 1.0, 0.7)


def _tar1_pre(x):
    return np.where(x >= 0, 0.3 * x, -0.1 * x)


def _tar1_post(x):
    return np.where(x >= 0, 0.5 + 0.5 * x, -0.3 * x)


def _tar2_post(x):
    return np.where(x >= 0, 1.0 - 0.1 * x, 0.5 + 0.1 * x)


@dataclass(frozen=True)
class Family:
    name: str
    pre: Callable
    post: Callable
    hidden: int
    p: int = 1


FAMILIES: dict[str, Family] = {
    "GAR1": Family("GAR1", _gar_pre, _gar(0.1, 1.0, 0.7), 1),
    "GAR2": Family("GAR2", _gar_pre, _gar(0.5, -1.0, 0.7), 1),
    "GAR3": Family("GAR3", _gar_pre, _gar(0.5, 1.0, -0.7), 1),
    "GAR4": Family("GAR4", _gar_pre, _gar(0.5, -1.0, -0.7), 1),
    "AR1": Family("AR1", lambda x: 0.3 * x, lambda x: 0.5 + 0.1 * x, 2),
    "AR2": Family("AR2", lambda x: 0.3 * x, lambda x: 1.0 - 0.1 * x, 2),
    "TAR1": Family("TAR1", _tar1_pre, _tar1_post, 2),
    "TAR2": Family("TAR2", _tar1_pre, _tar2_post, 2),
    "NULL": Family("NULL", _gar_pre, _gar_pre, 1),
}

#: Network parameters exactly reproducing the GAR pre-change function.
GAR_PRE_THETA = NetworkParams.from_parts(0.5, [1.0], [[-0.35]], [-0.5])


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name.upper()]
    except KeyError:
        raise InvalidFamily(f"unknown family {name!r}; choose from {sorted(FAMILIES)}") from None


COUPLINGS = ("independent_segments", "continuous_path")


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulated scenario; the change is after observation ``m = floor(tau n)``."""

    family: str
    n: int
    tau: float = 0.5
    burn_in: int = 500
    coupling: str = "independent_segments"
    seed: int = 0
    noise_sd: float = 1.0

    def __post_init__(self):
        get_family(self.family)
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.burn_in < 100:
            raise ValueError("burn_in must be >= 100")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS}")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")

    @property
    def m(self) -> int:
        if self.family.upper() == "NULL":
            return self.n
        return int(np.floor(self.tau * self.n))

    @property
    def has_change(self) -> bool:
        return self.m < self.n

    @property
    def p(self) -> int:
        return get_family(self.family).p

    def to_dict(self) -> dict:
        return asdict(self)


def simulate_regime(
    g: Callable, n_obs: int, rng: np.random.Generator, size=None, burn_in: int = 500, p: int = 1, noise_sd: float = 1.0
) -> np.ndarray:
    """Stationary path(s) of ``X_t = g(X_{t-1}) + eps_t`` of length ``n_obs + p``.

    With ``size=None`` a 1-d array is returned, otherwise ``(size, n_obs + p)``.
    """
    sz = 1 if size is None else int(size)
    total = burn_in + n_obs + p
    eps = noise_sd * rng.standard_normal((total, sz))
    x = np.zeros(sz)
    out = np.empty((n_obs + p, sz))
    for t in range(total):
        x = g(x) + eps[t]
        if t >= burn_in:
            out[t - burn_in] = x
    out = out.T
    return out[0] if size is None else out


def regime_sampler(family: str, regime: str, burn_in: int = 500) -> Callable:
    """``sampler(n_obs, rng, size)`` drawing stationary paths of one regime."""
    fam = get_family(family)
    g = fam.pre if regime == "pre" else fam.post

    def sample(n_obs, rng, size=None):
        return simulate_regime(g, n_obs, rng, size, burn_in, fam.p)

    return sample


def generate(spec: ScenarioSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Raw series ``X_{1-p}, ..., X_n`` for the scenario (length ``n + p``)."""
    fam = get_family(spec.family)
    rng = rng if rng is not None else np.random.default_rng(np.random.SeedSequence(spec.seed))
    p, n, m, sd = fam.p, spec.n, spec.m, spec.noise_sd
    if not spec.has_change:
        return simulate_regime(fam.pre, n, rng, None, spec.burn_in, p, sd)
    if spec.coupling == "independent_segments":
        pre = simulate_regime(fam.pre, m, rng, None, spec.burn_in, p, sd)
        post = simulate_regime(fam.post, n - m, rng, None, spec.burn_in, 0, sd)
        return np.concatenate([pre, post])
    # continuous path: the post-change regime starts from the pre-change state
    eps = sd * rng.standard_normal(spec.burn_in + n + p)
    x = 0.0
    raw = np.empty(n + p)
    for t in range(spec.burn_in + n + p):
        obs = t - spec.burn_in - p + 1  # observation index of the value produced now
        g = fam.pre if obs <= m else fam.post
        x = float(g(x)) + eps[t]
        if t >= spec.burn_in:
            raw[t - spec.burn_in] = x
    return raw


# --------------------------------------------------------------------------
# replication harness


def _map(fn, items, threads: int):
    if threads is None or threads <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * threads))))


def replicate_seeds(seed: int, reps: int) -> list[int]:
    """Independent per-replication seeds derived from one study seed."""
    return [int(ss.generate_state(1)[0]) for ss in np.random.SeedSequence(seed).spawn(reps)]


@dataclass(frozen=True)
class ReplicationRecord:
    seed: int
    ok: bool
    stats: dict = field(default_factory=dict)  # rule -> (statistic, k, rank)
    converged: bool = True
    error: str = ""


@dataclass(frozen=True)
class _ReplicationJob:
    spec: ScenarioSpec
    rules: tuple
    h: int
    weight: WeightConfig
    fit_cfg: FitConfig
    need_cov: bool


def _run_one(job: _ReplicationJob) -> ReplicationRecord:
    spec = job.spec
    try:
        raw = generate(spec)
        data = embed_series(raw, None, NetworkShape(spec.p, 0, job.h))
        fit_cfg = replace(job.fit_cfg, seed=spec.seed)
        fit = fit_network(data, fit_cfg)
        if job.need_cov:
            res, fit, _ = compute_statistics(data, list(job.rules), job.weight, fit_cfg, fit=fit, return_details=True)
            stats_ = {r: (v.statistic, v.k_argmax, v.rank) for r, v in res.items()}
        else:
            # argmax-only runs: the residual estimator is invariant to scaling its matrix
            theta = fit.theta_hat
            rules = [residual_matrix_A(theta.q) if r == "residual" else r for r in job.rules]
            res, fit, _ = compute_statistics(data, rules, job.weight, fit_cfg, fit=fit, return_details=True)
            stats_ = {}
            for r, v in zip(job.rules, res.values()):
                stats_[r] = (v.statistic, v.k_argmax, v.rank)
        return ReplicationRecord(spec.seed, True, stats_, fit.converged)
    except Exception as exc:  # counted and reported, never silently dropped
        logger.debug("replication %d failed: %s", spec.seed, exc)
        return ReplicationRecord(spec.seed, False, {}, False, f"{type(exc).__name__}: {exc}")


def run_replications(
    spec: ScenarioSpec,
    reps: int,
    rules: Sequence[str] = ("residual", "a"),
    h: int | None = None,
    weight: WeightConfig | None = None,
    fit_cfg: FitConfig | None = None,
    need_cov: bool = True,
    threads: int = 1,
) -> list[ReplicationRecord]:
    """Generate, fit and evaluate ``reps`` independent copies of ``spec``.

    Replication ``r`` uses the ``r``-th seed spawned from ``spec.seed`` for
    both data and optimizer, so results do not depend on ``threads``.
    """
    h = get_family(spec.family).hidden if h is None else h
    weight = weight or WeightConfig()
    fit_cfg = fit_cfg or FitConfig()
    if not need_cov and any(r not in ("residual",) for r in rules):
        raise ValueError("argmax-only runs support the residual rule only")
    jobs = [
        _ReplicationJob(replace(spec, seed=s), tuple(rules), h, weight, fit_cfg, need_cov)
        for s in replicate_seeds(spec.seed, reps)
    ]
    return _map(_run_one, jobs, threads)


TEST_KINDS = {"residual": "T_residual", "a": "T_a", "omnibus": "T_omnibus"}


@dataclass(frozen=True)
class PowerRow:
    scenario: str
    test_kind: str
    n: int
    tau: float
    level: float
    rejections: int
    reps: int
    rate: float
    failures: int = 0
    h: int = 1
    critical_value: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def power_study(
    spec: ScenarioSpec,
    M: int = 1000,
    level: float = 0.05,
    rules: Sequence[str] = ("residual", "a"),
    h: int | None = None,
    weight: WeightConfig | None = None,
    fit_cfg: FitConfig | None = None,
    cache_dir=None,
    threads: int = 1,
    records: list[ReplicationRecord] | None = None,
    cv_reps: int = DEFAULT_REPS,
) -> list[PowerRow]:
    """Rejection rates of each test rule at significance ``level``.

    Failed replications are excluded from ``reps`` and counted in ``failures``.
    """
    if M < 100:
        raise ValueError("M must be >= 100")
    weight = weight or WeightConfig()
    h = get_family(spec.family).hidden if h is None else h
    if records is None:
        records = run_replications(spec, M, rules, h, weight, fit_cfg, True, threads)
    ok = [r for r in records if r.ok]
    rows = []
    for rule in rules:
        rej = 0
        cvs = {}
        for rec in ok:
            stat, _, rank = rec.stats[rule]
            if rank not in cvs:
                cvs[rank] = null_critical_value(rank, weight, level, cache_dir, reps=cv_reps)
            rej += int(stat > cvs[rank])
        nominal_rank = max(cvs, key=lambda r: sum(rec.stats[rule][2] == r for rec in ok)) if cvs else 0
        rows.append(
            PowerRow(
                scenario=spec.family,
                test_kind=TEST_KINDS.get(rule, rule),
                n=spec.n,
                tau=spec.tau if spec.has_change else 1.0,
                level=level,
                rejections=rej,
                reps=len(ok),
                rate=rej / len(ok) if ok else float("nan"),
                failures=len(records) - len(ok),
                h=h,
                critical_value=cvs.get(nominal_rank, float("nan")),
            )
        )
    return rows


def write_power_csv(rows: Sequence[PowerRow], path_or_file) -> None:
    """Write power rows as CSV to a path or an open text stream."""
    if hasattr(path_or_file, "write"):
        _write_rows(rows, path_or_file)
        return
    with open(path_or_file, "w", newline="") as fh:
        _write_rows(rows, fh)


def _write_rows(rows, fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=list(PowerRow.__dataclass_fields__))
    writer.writeheader()
    for row in rows:
        writer.writerow(row.to_dict())


def estimator_errors(
    spec: ScenarioSpec,
    M: int,
    h: int | None = None,
    weight: WeightConfig | None = None,
    fit_cfg: FitConfig | None = None,
    threads: int = 1,
) -> np.ndarray:
    """``m_hat - m`` over ``M`` replications (residual weight matrix)."""
    if not spec.has_change:
        raise ValueError("estimator studies need a change (tau < 1)")
    recs = run_replications(spec, M, ("residual",), h, weight, fit_cfg, need_cov=False, threads=threads)
    ks = np.array([r.stats["residual"][1] for r in recs if r.ok], dtype=np.int64)
    return ks - spec.m


# --------------------------------------------------------------------------
# best approximating parameter


@dataclass(frozen=True, eq=False)
class RepresentativeResult:
    theta_tilde: NetworkParams
    n_used: int
    v_hat: float
    sse: np.ndarray = field(default=None, repr=False)
    failures: int = 0


def v_hat_statistic(thetas: Sequence[NetworkParams], regressors: Sequence[np.ndarray]) -> float:
    """U-statistic estimate of the variability of fitted network functions.

    Averages, over pairs of fits ``r < s`` and held-out paths ``i`` not in
    ``{r, s}``, the mean squared difference of the two fitted functions along
    path ``i``.  Needs at least three fits.
    """
    M = len(thetas)
    if M < 3:
        raise ValueError("need at least three fits")
    total = 0.0
    for i in range(M):
        y = regressors[i]
        F = np.stack([eval_network(thetas[r], y) for r in range(M) if r != i])
        F -= F.mean(axis=0)
        m = F.shape[0]
        # sum over pairs of ||F_r - F_s||^2 equals m * sum_r ||F_r - mean||^2
        total += m * float(np.einsum("rt,rt->", F, F)) / y.shape[0]
    return 2.0 * total / (M * (M - 1) * (M - 2))


def estimate_theta_representative(
    spec: ScenarioSpec,
    N: int,
    M: int = 100,
    h: int | None = None,
    fit_cfg: FitConfig | None = None,
    threads: int = 1,
) -> RepresentativeResult:
    """Fit ``M`` independent length-``N`` copies of ``spec``.

    The representative is the fit with the median SSE (lower median for even
    ``M``); ``v_hat`` is :func:`v_hat_statistic` over all successful fits.
    """
    if M < 10:
        raise ValueError("M must be >= 10")
    h = get_family(spec.family).hidden if h is None else h
    fit_cfg = fit_cfg or FitConfig()
    shape = NetworkShape(spec.p, 0, h)
    specs = [replace(spec, n=N, seed=s) for s in replicate_seeds(spec.seed, M)]
    fits, ys = [], []
    failures = 0
    for sp in specs:
        data = embed_series(generate(sp), None, shape)
        try:
            fit = fit_network(data, replace(fit_cfg, seed=sp.seed))
        except Exception as exc:
            logger.debug("representative fit failed: %s", exc)
            failures += 1
            continue
        fits.append(fit)
        ys.append(data.y)
    if failures > M / 2:
        raise RuntimeError(f"{failures} of {M} fits failed")
    sse = np.array([f.sse for f in fits])
    order = np.argsort(sse, kind="stable")
    median = fits[order[(len(fits) - 1) // 2]]
    v_hat = v_hat_statistic([f.theta_hat for f in fits], ys)
    return RepresentativeResult(median.theta_hat, N, v_hat, sse, failures)


def large_sample_fit(
    spec: ScenarioSpec,
    N: int,
    h: int | None = None,
    fit_cfg: FitConfig | None = None,
    warm_start=None,
    local: bool = False,
) -> NetworkParams:
    """Least-squares fit on one very long copy of ``spec``; approximates theta-tilde.

    ``local=True`` only refines ``warm_start``, which keeps very long fits cheap.
    """
    h = get_family(spec.family).hidden if h is None else h
    fit_cfg = fit_cfg or FitConfig()
    data = embed_series(generate(replace(spec, n=N)), None, NetworkShape(spec.p, 0, h))
    return fit_network(data, fit_cfg, warm_start=warm_start, local=local).theta_hat


def best_approximating_theta(spec: ScenarioSpec, N: int = 2_000_000, pilot_N: int = 50_000, h: int | None = None) -> NetworkParams:
    """theta-tilde by a global pilot fit followed by a local refit on length ``N``."""
    pilot = large_sample_fit(replace(spec, seed=spec.seed + 1), pilot_N, h)
    if N <= pilot_N:
        return pilot
    if pilot.shape.h != (get_family(spec.family).hidden if h is None else h):
        return pilot
    return large_sample_fit(spec, N, h, warm_start=[pilot], local=True)


# --------------------------------------------------------------------------
# finite-sample versus limiting distribution of the estimator


def limit_spec_for(
    family: str,
    theta_tilde: NetworkParams,
    lam: float,
    rule: str = "residual",
    gamma: float = 0.0,
    horizon: int = 200,
    mc_n: int = 200_000,
    seed: int = 0,
    burn_in: int = 500,
) -> tuple[LimitLawSpec, ChangeMagnitude]:
    """Limit-law specification with model-based score samplers at ``theta_tilde``.

    ``rule`` chooses the coordinates monitored: ``residual`` (intercept),
    ``a`` (input weights) or ``omnibus`` (identity on all coordinates).  Only
    the direction of the weight matrix matters for the argmax.
    """
    pre_gen = regime_sampler(family, "pre", burn_in)
    post_gen = regime_sampler(family, "post", burn_in)
    mag = change_magnitude_D(pre_gen, post_gen, theta_tilde, lam, mc_n, seed)
    q = theta_tilde.q
    if rule == "residual":
        A = residual_matrix_A(q)
    elif rule == "a":
        sl = theta_tilde.shape.a_slice
        A = selection_matrix_A(q, range(sl.start, sl.stop))
    else:
        A = selection_matrix_A(q, range(q))
    spec = LimitLawSpec(
        d_vec=mag.d_vec,
        a=A,
        lam=lam,
        gamma=gamma,
        xi_sampler_pre=model_xi_sampler(pre_gen, theta_tilde, mag.pre_mean),
        xi_sampler_post=model_xi_sampler(post_gen, theta_tilde, mag.post_mean),
        horizon=horizon,
    )
    return spec, mag


@dataclass(frozen=True, eq=False)
class EstimatorStudy:
    finite: np.ndarray
    limit: np.ndarray
    ks: float
    saturation: float
    magnitude: ChangeMagnitude | None = None

    def summary(self) -> dict:
        return {
            "ks_distance": self.ks,
            "finite_mode": int(stats.mode(self.finite, keepdims=False).mode),
            "limit_mode": int(stats.mode(self.limit, keepdims=False).mode),
            "finite_iqr": float(np.subtract(*np.percentile(self.finite, [75, 25]))),
            "limit_iqr": float(np.subtract(*np.percentile(self.limit, [75, 25]))),
            "reps": int(self.finite.size),
            "limit_reps": int(self.limit.size),
            "horizon_saturation": self.saturation,
        }


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance (ties handled exactly)."""
    return float(stats.ks_2samp(np.asarray(a), np.asarray(b)).statistic)


def estimator_distribution_study(
    spec: ScenarioSpec,
    M: int = 1000,
    limit: LimitLawSpec | None = None,
    theta_tilde: NetworkParams | None = None,
    limit_reps: int = 10_000,
    finite: np.ndarray | None = None,
    h: int | None = None,
    fit_cfg: FitConfig | None = None,
    threads: int = 1,
) -> EstimatorStudy:
    """Compare ``m_hat - m`` at sample size ``spec.n`` with the simulated limit.

    Uses the residual weight matrix and ``gamma = 0``.  If no limit
    specification is given, ``theta_tilde`` (default: a fit on one series of
    length 100 n) determines ``D`` and the model-based score samplers.
    """
    if not spec.has_change:
        raise ValueError("estimator studies need a change (tau < 1)")
    if M < 500:
        raise ValueError("M must be >= 500")
    lam = spec.m / spec.n
    mag = None
    if limit is None:
        if theta_tilde is None:
            theta_tilde = large_sample_fit(spec, 100 * spec.n, h, fit_cfg)
        limit, mag = limit_spec_for(spec.family, theta_tilde, lam, "residual", 0.0, seed=spec.seed)
    if finite is None:
        finite = estimator_errors(spec, M, h, WeightConfig(), fit_cfg, threads)
    sample = simulate_limit_argmax(limit, limit_reps, spec.seed)
    return EstimatorStudy(np.asarray(finite), sample.draws, ks_distance(finite, sample.draws), sample.saturation, mag)


def study_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
