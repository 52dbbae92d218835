"""End-to-end test procedure: fit, covariance, weight matrix, statistic, decision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nnchange.covariance import (
    RULE_COVARIANCE,
    CovEstimate,
    pooled_covariance,
    rule_rank,
    split_covariance,
    weight_matrix_for_rule,
)
from nnchange.critical_values import DEFAULT_GRID, DEFAULT_REPS, critical_value, finite_sample_null_quantile
from nnchange.fitting import FitConfig, FitResult, RegressionDataset, fit_network
from nnchange.score_stats import TestReport, WeightConfig, WeightMatrix, argmax_statistic, score_partial_sums


@dataclass(frozen=True, eq=False)
class StatisticResult:
    statistic: float
    k_argmax: int
    a_used: WeightMatrix
    rank: int
    rule: str


def _rule_name(rule) -> str:
    return rule if isinstance(rule, str) else "file"


def compute_statistics(
    data: RegressionDataset,
    rules,
    cfg: WeightConfig | None = None,
    fit_cfg: FitConfig | None = None,
    fit: FitResult | None = None,
    cov: CovEstimate | None = None,
    warm_start=None,
    return_details: bool = False,
):
    """Statistic and argmax for several weight-matrix rules sharing one fit.

    ``rules`` items are rule names (``"omnibus"``, ``"residual"``, ``"a"``) or
    explicit :class:`WeightMatrix` objects.  Each named rule uses the
    covariance estimator listed in ``RULE_COVARIANCE`` unless ``cov`` is given.
    Returns ``{name: (stat, k)}``, or ``({name: StatisticResult}, fit, cov)``
    with ``return_details`` (``cov`` is the split estimate when one was
    computed).
    """
    cfg = cfg or WeightConfig()
    fit_cfg = fit_cfg or FitConfig()
    if fit is None:
        fit = fit_network(data, fit_cfg, warm_start=warm_start)
    theta = fit.theta_hat
    sub = data.with_h(theta.shape.h)
    path = score_partial_sums(sub, theta)
    covs = {}

    def covariance(rule):
        if cov is not None:
            return cov
        kind = RULE_COVARIANCE[rule]
        if kind not in covs:
            covs[kind] = split_covariance(sub, None, None, fit_cfg, fit=fit) if kind == "split" else pooled_covariance(path)
        return covs[kind]

    out = {}
    for rule in rules:
        name = _rule_name(rule)
        if isinstance(rule, str):
            if rule not in RULE_COVARIANCE:
                raise ValueError(f"unknown weight-matrix rule {rule!r}")
            rank = rule_rank(rule, theta)
            A = weight_matrix_for_rule(rule, covariance(rule), theta) if rank else WeightMatrix(np.zeros((theta.q, theta.q)))
        else:
            A = rule if isinstance(rule, WeightMatrix) else WeightMatrix(rule)
            rank = A.rank
        if rank == 0:
            stat, k = 0.0, 1
        else:
            stat, k = argmax_statistic(path, A, cfg)
        out[name] = StatisticResult(stat, k, A, rank, name)
    if return_details:
        return out, fit, cov if cov is not None else covs.get("split")
    return {name: (res.statistic, res.k_argmax) for name, res in out.items()}


def null_critical_value(
    rank: int,
    cfg: WeightConfig,
    level: float,
    cache_dir=None,
    grid_n: int = DEFAULT_GRID,
    reps: int = DEFAULT_REPS,
    seed: int = 0,
) -> float:
    """Critical value for significance ``level`` from the bridge limit."""
    if rank == 0:
        return float("inf")
    return critical_value(rank, cfg, 1.0 - level, cache_dir, grid_n, reps, seed)


def run_test(
    data: RegressionDataset,
    a_rule="omnibus",
    cfg: WeightConfig | None = None,
    level: float = 0.05,
    fit_cfg: FitConfig | None = None,
    fit: FitResult | None = None,
    cache_dir=None,
    cv_grid: int = DEFAULT_GRID,
    cv_reps: int = DEFAULT_REPS,
    cv_seed: int = 0,
    boot_reps: int = 200,
    boot_seed: int = 0,
) -> tuple[TestReport, FitResult]:
    """Run the full test at significance ``level``.

    The ``(eta, gamma) = (0, 1/2)`` corner is calibrated by the parametric
    bootstrap (``boot_reps`` replications); every other configuration uses the
    simulated bridge limit of the matching rank.
    """
    cfg = cfg or WeightConfig()
    fit_cfg = fit_cfg or FitConfig()
    results, fit, cov = compute_statistics(data, [a_rule], cfg, fit_cfg, fit=fit, return_details=True)
    res = results[_rule_name(a_rule)]
    if cfg.is_darling_erdos_corner:
        if not isinstance(a_rule, str):
            raise ValueError("bootstrap calibration needs a named weight-matrix rule")
        cv = finite_sample_null_quantile(fit, data, cfg, a_rule, boot_reps, boot_seed, 1.0 - level, fit_cfg)
    else:
        cv = null_critical_value(res.rank, cfg, level, cache_dir, cv_grid, cv_reps, cv_seed)
    report = TestReport(
        statistic=res.statistic,
        k_argmax=res.k_argmax,
        weight=cfg,
        a_used=res.a_used,
        critical_value=float(cv),
        rejected=bool(res.statistic > cv),
        level=level,
        n=data.n,
        a_rule=res.rule,
        rank=res.rank,
    )
    return report, fit
