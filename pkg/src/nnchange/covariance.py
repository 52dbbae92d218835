"""Score covariance estimators and the weight matrices built from them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from nnchange.errors import DimensionMismatch, NonFinite, SegmentTooShort, TooShort
from nnchange.fitting import FitConfig, FitResult, RegressionDataset, fit_network
from nnchange.nn_model import NetworkParams
from nnchange.score_stats import (
    ScorePath,
    WeightConfig,
    WeightMatrix,
    observation_scores,
    score_partial_sums,
    weighted_norm_path,
)

A_RULES = ("omnibus", "residual", "a")
#: Covariance estimator behind each rule.  The input-weight block uses the
#: full-sample scores: segment refits of weakly identified hidden units often
#: land in other basins where these scores nearly vanish, which makes the split
#: estimate of that block heavy-tailed and the test oversized.
RULE_COVARIANCE = {"omnibus": "split", "residual": "split", "a": "pooled"}


@dataclass(frozen=True, eq=False)
class CovEstimate:
    matrix: np.ndarray
    kind: str
    dof: int
    k0: int | None = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def q(self) -> int:
        return self.matrix.shape[0]


def _outer_sum(scores: np.ndarray) -> np.ndarray:
    m = scores.T @ scores
    return 0.5 * (m + m.T)


def pooled_covariance(path: ScorePath) -> CovEstimate:
    """``(n - q)^{-1} sum_t q(t) q(t)^T`` over the per-observation scores."""
    n, q = path.n, path.q
    if n <= q:
        raise TooShort(f"need n > q = {q}, got n = {n}")
    return CovEstimate(_outer_sum(path.increments) / (n - q), "pooled", n - q)


def bartlett_lrv(scores: np.ndarray, bandwidth: int, dof: int | None = None) -> np.ndarray:
    """Bartlett-kernel sum of uncentered autocovariances, divided by ``dof``."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    n = scores.shape[0]
    dof = n if dof is None else dof
    out = scores.T @ scores
    for lag in range(1, bandwidth + 1):
        gl = scores[lag:].T @ scores[:-lag]
        out = out + (1.0 - lag / (bandwidth + 1.0)) * (gl + gl.T)
    out = out / dof
    return 0.5 * (out + out.T)


def default_bandwidth(n: int) -> int:
    return int(np.floor(n ** (1.0 / 3.0)))


def long_run_covariance(path: ScorePath, bandwidth: int | None = None) -> CovEstimate:
    """Bartlett (Newey-West) estimate of the long-run score covariance.

    Uses the same ``n - q`` denominator as :func:`pooled_covariance`, so a zero
    bandwidth reproduces it.
    """
    n, q = path.n, path.q
    if n <= q:
        raise TooShort(f"need n > q = {q}, got n = {n}")
    bandwidth = default_bandwidth(n) if bandwidth is None else int(bandwidth)
    if bandwidth < 0 or bandwidth >= n / 2:
        raise ValueError(f"bandwidth must lie in [0, n/2), got {bandwidth}")
    return CovEstimate(bartlett_lrv(path.increments, bandwidth, n - q), "long_run", n - q)


def align_units(theta: NetworkParams, reference: NetworkParams) -> NetworkParams:
    """Express ``theta`` in the same unit labelling as ``reference``.

    Units with negative output weight are sign-flipped (function preserving),
    then permuted to best match the reference units (least squares over
    ``(nu_i, a_i, b_i)``).
    """
    if theta.shape != reference.shape:
        raise DimensionMismatch("cannot align networks of different shape")
    sh = theta.shape
    if sh.h == 0:
        return theta
    nu, a, b, nu0 = theta.nu.copy(), theta.a.copy(), theta.b.copy(), theta.nu0
    neg = nu < 0
    nu0 += float(nu[neg].sum())
    nu[neg], a[neg], b[neg] = -nu[neg], -a[neg], -b[neg]
    mine = np.column_stack([nu, a, b])
    ref = np.column_stack([reference.nu, reference.a, reference.b])
    cost = ((ref[:, None, :] - mine[None, :, :]) ** 2).sum(axis=2)
    _, perm = linear_sum_assignment(cost)
    vec = np.concatenate([[nu0], nu[perm], a[perm].ravel(), b[perm]])
    return NetworkParams(sh, vec)


def _segment_theta(fit: FitResult, reference: NetworkParams) -> NetworkParams:
    # the raw optimum keeps every unit even if one collapsed, so dimensions match
    theta = fit.theta_hat if fit.theta_hat.shape == reference.shape else fit.raw_theta
    if theta is None or theta.shape != reference.shape:
        # segment collapsed to the constant fit: keep the units, zero output weights
        vec = np.array(reference.vector)
        vec[reference.shape.nu_slice] = 0.0
        vec[0] = fit.theta_hat.nu0
        return NetworkParams(reference.shape, vec)
    return align_units(theta, reference)


def split_covariance(
    data: RegressionDataset,
    A_pre: WeightMatrix | None = None,
    cfg: WeightConfig | None = None,
    fit_cfg: FitConfig | None = None,
    fit: FitResult | None = None,
) -> CovEstimate:
    """Covariance estimate computed separately before and after a preliminary split.

    1. fit on the full sample (or reuse ``fit``);
    2. pooled covariance of the full-sample scores;
    3. ``k0`` maximizes ``||S(k)||`` in the norm of ``A_pre`` (default: the
       regularized inverse of the pooled covariance) with weights ``cfg``
       (default unweighted), searched over ``q + 1 <= k0 <= n - q - 1``;
    4. refit on ``1..k0`` and ``k0+1..n`` (warm-started at the full fit);
    5. sum the outer products of each segment's scores at its own fit and
       divide by ``n - q``.
    """
    cfg = cfg or WeightConfig()
    fit_cfg = fit_cfg or FitConfig()
    if fit is None:
        fit = fit_network(data, fit_cfg)
    theta = fit.theta_hat
    sub = data.with_h(theta.shape.h)
    n, q = sub.n, theta.q
    if n <= 2 * q + 1:
        raise SegmentTooShort(f"need n > 2q + 1 = {2 * q + 1} for two segments, got n = {n}")
    path = score_partial_sums(sub, theta)
    pooled = pooled_covariance(path)
    A = A_pre if A_pre is not None else inverse_psd(pooled)
    vals = weighted_norm_path(path, A, cfg)
    lo, hi = q + 1, n - q - 1
    k0 = lo + int(np.argmax(vals[lo - 1 : hi]))
    total = np.zeros((q, q))
    for start, stop in ((0, k0), (k0, n)):
        seg = sub.segment(start, stop)
        if seg.n < q + 1:
            raise SegmentTooShort(f"segment {start + 1}..{stop} is shorter than q + 1 = {q + 1}")
        seg_fit = fit_network(seg, fit_cfg, warm_start=[theta])
        seg_theta = _segment_theta(seg_fit, theta)
        total += _outer_sum(observation_scores(seg, seg_theta))
    return CovEstimate(total / (n - q), "split", n - q, k0)


def inverse_psd(c, ridge: float = 0.0) -> WeightMatrix:
    """Inverse through an eigendecomposition with eigenvalues floored.

    The floor is ``max(ridge, 1e-8 * trace / q)``.
    """
    m = c.matrix if isinstance(c, CovEstimate) else np.asarray(c, dtype=float)
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    if not np.all(np.isfinite(m)):
        raise NonFinite("covariance matrix has non-finite entries")
    m = 0.5 * (m + m.T)
    q = m.shape[0]
    evals, evecs = np.linalg.eigh(m)
    floor = max(ridge, 1e-8 * float(np.trace(m)) / q, 1e-300)
    inv = (evecs / np.maximum(evals, floor)) @ evecs.T
    return WeightMatrix(0.5 * (inv + inv.T))


def a_coordinates(theta: NetworkParams) -> np.ndarray:
    """Indices of the input-weight coordinates ``a_ij`` in the parameter vector."""
    sl = theta.shape.a_slice
    return np.arange(sl.start, sl.stop)


def weight_matrix_for_rule(rule: str, cov: CovEstimate, theta: NetworkParams) -> WeightMatrix:
    """Weight matrix that makes the null limit pivotal for the chosen coordinates.

    ``omnibus`` uses the regularized inverse of the full covariance,
    ``residual`` the intercept coordinate scaled by its inverse variance and
    ``a`` the inverse of the covariance block of the input weights.
    """
    q = theta.q
    if cov.q != q:
        raise DimensionMismatch("covariance and network dimensions differ")
    if rule == "omnibus":
        return inverse_psd(cov)
    if rule == "residual":
        a = np.zeros((q, q))
        var = float(cov.matrix[0, 0])
        a[0, 0] = 1.0 / max(var, 1e-300)
        return WeightMatrix(a)
    if rule == "a":
        idx = a_coordinates(theta)
        a = np.zeros((q, q))
        if idx.size:
            block = inverse_psd(cov.matrix[np.ix_(idx, idx)]).a
            a[np.ix_(idx, idx)] = block
        return WeightMatrix(a)
    raise ValueError(f"unknown weight-matrix rule {rule!r}; expected one of {A_RULES}")


def rule_rank(rule: str, theta: NetworkParams) -> int:
    """Rank of the weight matrix produced by ``rule`` (dimension of the limiting bridge)."""
    if rule == "omnibus":
        return theta.q
    if rule == "residual":
        return 1
    if rule == "a":
        return theta.shape.h * theta.shape.k
    raise ValueError(f"unknown weight-matrix rule {rule!r}")
