"""Change-point estimator and the simulator for its limit distribution.

The estimator is the argmax of the same weighted norm path as the test
statistic.  Around the true change ``m`` the centered estimator converges to

    argmax_s { W_s - |s| g(s) ||D||_A^2 },   s in Z,

with ``W_s`` a two-sided random walk of projected score increments, ``D`` the
scaled expected pre-change score at the best approximating parameter and
``g`` a piecewise constant drift rate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from nnchange.covariance import bartlett_lrv, default_bandwidth
from nnchange.errors import HorizonSaturationWarning
from nnchange.fitting import RegressionDataset, embed_series
from nnchange.nn_model import NetworkParams, NetworkShape
from nnchange.score_stats import (
    WeightConfig,
    WeightMatrix,
    argmax_statistic,
    observation_scores,
    quad_forms,
    score_partial_sums,
)

#: ``sampler(n_obs, rng, size)`` returns ``size`` independent stationary raw
#: paths, shape ``(size, n_obs + p)``.
RegimeSampler = Callable[..., np.ndarray]
#: ``xi_sampler(reps, K, rng)`` returns centered score increments, shape
#: ``(reps, K, q)``, consecutive in time within each replication.
XiSampler = Callable[[int, int, np.random.Generator], np.ndarray]


@dataclass(frozen=True, eq=False)
class ChangePointEstimate:
    k_hat: int
    statistic_at_k: float
    weight: WeightConfig
    a_used: WeightMatrix
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "k_hat": self.k_hat,
            "n": self.n,
            "fraction": self.k_hat / self.n if self.n else None,
            "statistic_at_k": self.statistic_at_k,
            "weight": self.weight.to_dict(),
            "a_used": self.a_used.a.tolist(),
        }


def change_point_estimate(data: RegressionDataset, theta_hat: NetworkParams, A, cfg: WeightConfig) -> ChangePointEstimate:
    """Smallest maximizer of ``w(k/n) ||S(k; theta_hat)||_A`` over ``1 <= k < n``."""
    A = A if isinstance(A, WeightMatrix) else WeightMatrix(A)
    stat, k = argmax_statistic(score_partial_sums(data, theta_hat), A, cfg)
    return ChangePointEstimate(k, stat, cfg, A, data.n)


def drift_g(s, lam: float, gamma: float):
    s = np.asarray(s)
    left = (1.0 - gamma) * (1.0 - lam) + gamma * lam
    right = gamma * (1.0 - lam) + (1.0 - gamma) * lam
    out = np.where(s < 0, left, np.where(s > 0, right, 0.0))
    return float(out) if out.ndim == 0 else out


def regime_scores(raw_paths: np.ndarray, theta: NetworkParams) -> np.ndarray:
    """Scores at ``theta`` along each raw path; shape ``(size, n_obs, q)``."""
    raw_paths = np.atleast_2d(raw_paths)
    shape = theta.shape
    size = raw_paths.shape[0]
    out = []
    for row in raw_paths:
        data = embed_series(row, None, shape)
        out.append(observation_scores(data, theta))
    return np.stack(out) if size else np.zeros((0, 0, theta.q))


@dataclass(frozen=True, eq=False)
class ChangeMagnitude:
    """Monte-Carlo estimates behind ``D``.

    ``d_vec = pre_mean / (1 - lam)``; ``d_vec_post = -post_mean / lam`` is the
    second expression for the same vector and ``identity = lam * pre_mean +
    (1 - lam) * post_mean`` should vanish at the best approximating parameter.
    """

    d_vec: np.ndarray
    d_vec_post: np.ndarray
    pre_mean: np.ndarray
    post_mean: np.ndarray
    pre_se: np.ndarray
    post_se: np.ndarray
    lam: float
    mc_n: int

    @property
    def identity(self) -> np.ndarray:
        return self.lam * self.pre_mean + (1.0 - self.lam) * self.post_mean

    @property
    def identity_se(self) -> np.ndarray:
        return np.sqrt((self.lam * self.pre_se) ** 2 + ((1.0 - self.lam) * self.post_se) ** 2)


def _mean_and_se(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = scores.shape[0]
    mean = scores.mean(axis=0)
    lrv = bartlett_lrv(scores - mean, default_bandwidth(n), n)
    return mean, np.sqrt(np.clip(np.diag(lrv), 0.0, None) / n)


def change_magnitude_D(
    pre_gen: RegimeSampler,
    post_gen: RegimeSampler,
    theta_tilde: NetworkParams,
    lam: float,
    mc_n: int = 100_000,
    seed: int = 0,
) -> ChangeMagnitude:
    """Estimate ``D`` from long stationary draws of each regime.

    Standard errors use a Bartlett long-run variance of the scores along the
    path, so they stay valid when scores are serially dependent.
    """
    if not 0.0 < lam < 1.0:
        raise ValueError("lam must lie in (0, 1)")
    if mc_n < 100_000:
        raise ValueError("mc_n must be >= 1e5")
    pre_ss, post_ss = np.random.SeedSequence(seed).spawn(2)
    pre = regime_scores(pre_gen(mc_n, np.random.default_rng(pre_ss), 1), theta_tilde)[0]
    post = regime_scores(post_gen(mc_n, np.random.default_rng(post_ss), 1), theta_tilde)[0]
    if not (np.all(np.isfinite(pre)) and np.all(np.isfinite(post))):
        raise FloatingPointError("regime sampler produced non-finite scores")
    pre_mean, pre_se = _mean_and_se(pre)
    post_mean, post_se = _mean_and_se(post)
    return ChangeMagnitude(
        d_vec=pre_mean / (1.0 - lam),
        d_vec_post=-post_mean / lam,
        pre_mean=pre_mean,
        post_mean=post_mean,
        pre_se=pre_se,
        post_se=post_se,
        lam=lam,
        mc_n=mc_n,
    )


def model_xi_sampler(regime: RegimeSampler, theta_tilde: NetworkParams, center: np.ndarray) -> XiSampler:
    """Centered scores along fresh stationary paths of one regime."""
    center = np.asarray(center, dtype=float)

    def sample(reps: int, horizon: int, rng: np.random.Generator) -> np.ndarray:
        paths = regime(horizon, rng, reps)
        return regime_scores(paths, theta_tilde) - center

    return sample


def empirical_xi_sampler(scores: np.ndarray) -> XiSampler:
    """i.i.d. resampling of centered observed scores (a discrete approximation)."""
    scores = np.asarray(scores, dtype=float)
    centered = scores - scores.mean(axis=0)

    def sample(reps: int, horizon: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, centered.shape[0], size=(reps, horizon))
        return centered[idx]

    return sample


@dataclass(frozen=True, eq=False)
class LimitLawSpec:
    d_vec: np.ndarray
    a: WeightMatrix
    lam: float
    gamma: float
    xi_sampler_pre: XiSampler = field(repr=False)
    xi_sampler_post: XiSampler = field(repr=False)
    horizon: int = 200

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lam must lie in (0, 1)")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        a = self.a if isinstance(self.a, WeightMatrix) else WeightMatrix(self.a)
        object.__setattr__(self, "a", a)
        d = np.asarray(self.d_vec, dtype=float)
        object.__setattr__(self, "d_vec", d)
        if not self.d_norm_sq > 0:
            raise ValueError("the change magnitude has zero A-norm; the limit is undefined")

    @property
    def d_norm_sq(self) -> float:
        return float(quad_forms(self.d_vec, self.a)[0])

    def scaled(self, c: float) -> "LimitLawSpec":
        return LimitLawSpec(c * self.d_vec, self.a, self.lam, self.gamma, self.xi_sampler_pre, self.xi_sampler_post, self.horizon)


@dataclass(frozen=True, eq=False)
class LimitLawSample:
    draws: np.ndarray
    spec: LimitLawSpec = field(repr=False)
    seed: int = 0
    saturation: float = 0.0

    @property
    def saturated(self) -> bool:
        return self.saturation > 0.05


def simulate_limit_argmax(spec: LimitLawSpec, reps: int = 10_000, seed: int = 0, chunk: int = 1000) -> LimitLawSample:
    """Draws of ``argmax_{|s| <= K} W_s - |s| g(s) ||D||_A^2``.

    For ``s < 0`` the walk sums the last ``|s|`` pre-change increments, for
    ``s > 0`` the first ``s`` post-change increments; ``W_0 = 0``.  Ties go to
    the smallest ``s``.  A warning is issued when more than 5% of draws sit
    on the horizon ``+-K``.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    K = spec.horizon
    u = spec.a.a @ spec.d_vec
    dn2 = spec.d_norm_sq
    s_grid = np.arange(-K, K + 1)
    drift = np.abs(s_grid) * drift_g(s_grid, spec.lam, spec.gamma) * dn2
    n_chunks = -(-reps // chunk)
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    draws = np.empty(reps, dtype=np.int64)
    for c, ss in enumerate(streams):
        m = min(chunk, reps - c * chunk)
        rng_pre, rng_post = (np.random.default_rng(s) for s in ss.spawn(2))
        pre = spec.xi_sampler_pre(m, K, rng_pre) @ u  # (m, K), time order up to the change
        post = spec.xi_sampler_post(m, K, rng_post) @ u
        left = np.cumsum(pre[:, ::-1], axis=1)[:, ::-1]  # left[:, j] sums pre[j:]; s = j - K
        right = np.cumsum(post, axis=1)
        walk = np.concatenate([left, np.zeros((m, 1)), right], axis=1)
        draws[c * chunk : c * chunk + m] = s_grid[np.argmax(walk - drift, axis=1)]
    saturation = float(np.mean(np.abs(draws) == K))
    if saturation > 0.05:
        warnings.warn(
            f"{saturation:.1%} of limit draws sit on the horizon K={K}; increase the horizon",
            HorizonSaturationWarning,
            stacklevel=2,
        )
    return LimitLawSample(draws, spec, seed, saturation)
