"""Score partial sums and the weighted score-based change-point statistic."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from nnchange.errors import AllWeightsZero, DimensionMismatch, NotPSD, TooShort
from nnchange.fitting import RegressionDataset, _check
from nnchange.nn_model import NetworkParams, eval_network, grad_network

PSD_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class ScorePath:
    """Cumulative scores; row ``k`` is ``S(k; theta)`` and row 0 is zero."""

    sums: np.ndarray
    theta: NetworkParams

    @property
    def n(self) -> int:
        return self.sums.shape[0] - 1

    @property
    def q(self) -> int:
        return self.sums.shape[1]

    @property
    def increments(self) -> np.ndarray:
        """Per-observation scores ``q(t, theta)``, shape ``(n, q)``."""
        return np.diff(self.sums, axis=0)


def observation_scores(data: RegressionDataset, theta: NetworkParams) -> np.ndarray:
    """``grad f(Y_t, theta) * (X_t - f(Y_t, theta))`` for every ``t``."""
    _check(theta, data)
    r = data.x - eval_network(theta, data.y)
    return grad_network(theta, data.y) * r[:, None]


def score_partial_sums(data: RegressionDataset, theta: NetworkParams) -> ScorePath:
    scores = observation_scores(data, theta)
    sums = np.zeros((data.n + 1, theta.q))
    np.cumsum(scores, axis=0, out=sums[1:])
    sums.setflags(write=False)
    return ScorePath(sums, theta)


@dataclass(frozen=True)
class WeightConfig:
    """Trimming ``eta`` and weighting exponent ``gamma``, both in ``[0, 1/2]``."""

    eta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.eta <= 0.5 and 0.0 <= self.gamma <= 0.5):
            raise ValueError(f"eta and gamma must lie in [0, 1/2], got ({self.eta}, {self.gamma})")

    @property
    def is_darling_erdos_corner(self) -> bool:
        return self.eta == 0.0 and self.gamma == 0.5

    def to_dict(self) -> dict:
        return {"eta": self.eta, "gamma": self.gamma}


def weight(s, cfg: WeightConfig):
    """``1{eta < s < 1 - eta} * (s (1 - s))^(-gamma)``; zero outside ``(0, 1)``."""
    s = np.asarray(s, dtype=float)
    inside = (s > cfg.eta) & (s < 1.0 - cfg.eta) & (s > 0.0) & (s < 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(inside, (s * (1.0 - s)) ** (-cfg.gamma), 0.0)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Symmetric positive semi-definite matrix ``A`` defining ``||x||_A``.

    Slightly negative eigenvalues (above ``-1e-10`` times the spectral radius)
    are clipped to zero; anything more negative raises :class:`NotPSD`.
    """

    a: np.ndarray
    rank: int = field(init=False)

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch("weight matrix must be square")
        if not np.all(np.isfinite(a)):
            raise NotPSD("weight matrix has non-finite entries")
        if not np.array_equal(a, a.T):
            if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(a).max())):
                raise NotPSD("weight matrix is not symmetric")
            a = 0.5 * (a + a.T)
        evals, evecs = np.linalg.eigh(a)
        radius = float(np.abs(evals).max()) if evals.size else 0.0
        if evals.size and evals.min() < -PSD_RTOL * radius:
            raise NotPSD(f"weight matrix has eigenvalue {evals.min():g}")
        if evals.size and evals.min() < 0:
            a = (evecs * np.clip(evals, 0.0, None)) @ evecs.T
            a = 0.5 * (a + a.T)
        tol = PSD_RTOL * radius
        a.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "rank", int(np.sum(evals > tol)) if radius > 0 else 0)

    @property
    def q(self) -> int:
        return self.a.shape[0]

    def scaled(self, c: float) -> "WeightMatrix":
        return WeightMatrix(c * self.a)

    @classmethod
    def identity(cls, q: int) -> "WeightMatrix":
        return cls(np.eye(q))


def _as_matrix(A) -> np.ndarray:
    return A.a if isinstance(A, WeightMatrix) else np.asarray(A, dtype=float)


def quad_forms(x, A) -> np.ndarray:
    """Row-wise ``x_k^T A x_k``, negative rounding clipped to zero."""
    a = _as_matrix(A)
    x = np.atleast_2d(x)
    if x.shape[1] != a.shape[0]:
        raise DimensionMismatch(f"vector dimension {x.shape[1]} does not match matrix dimension {a.shape[0]}")
    return np.maximum(np.einsum("ij,ij->i", x @ a, x), 0.0)


def a_norm(x, A) -> float:
    """``sqrt(x^T A x)`` for a symmetric PSD ``A``."""
    x = np.asarray(x, dtype=float)
    a = _as_matrix(A)
    if x.shape != (a.shape[0],):
        raise DimensionMismatch(f"vector dimension {x.shape} does not match matrix dimension {a.shape[0]}")
    val = float(x @ a @ x)
    scale = float(np.abs(a).max() * (x @ x)) if x.size else 0.0
    if val < -PSD_RTOL * max(scale, 1e-300):
        raise NotPSD(f"negative quadratic form {val:g}")
    return float(np.sqrt(max(val, 0.0)))


def residual_matrix_A(q: int) -> WeightMatrix:
    """Matrix selecting the intercept coordinate; its score is the residual."""
    if q < 1:
        raise ValueError("q must be >= 1")
    a = np.zeros((q, q))
    a[0, 0] = 1.0
    return WeightMatrix(a)


def selection_matrix_A(q: int, indices) -> WeightMatrix:
    """Projection onto the given coordinates (identity on them, zero elsewhere)."""
    a = np.zeros((q, q))
    idx = np.asarray(indices, dtype=int)
    a[idx, idx] = 1.0
    return WeightMatrix(a)


def weighted_norm_path(path: ScorePath, A, cfg: WeightConfig) -> np.ndarray:
    """``n^{-1/2} w(k/n) ||S(k)||_A`` for ``k = 1, ..., n-1``."""
    n = path.n
    k = np.arange(1, n)
    w = weight(k / n, cfg)
    norms = np.sqrt(quad_forms(path.sums[1:n], A))
    return w * norms / np.sqrt(n)


def argmax_statistic(path: ScorePath, A, cfg: WeightConfig) -> tuple[float, int]:
    """Maximum of the weighted norm path and its smallest maximizing ``k``."""
    if path.n < 3:
        raise TooShort("statistic needs n >= 3")
    k = np.arange(1, path.n)
    if not np.any(weight(k / path.n, cfg) > 0):
        raise AllWeightsZero(f"trimming eta={cfg.eta} leaves no admissible k for n={path.n}")
    vals = weighted_norm_path(path, A, cfg)
    idx = int(np.argmax(vals))
    return float(vals[idx]), idx + 1


def test_statistic(data: RegressionDataset, theta_hat: NetworkParams, A, cfg: WeightConfig) -> tuple[float, int]:
    """Weighted score statistic ``T_n(eta, gamma; A)`` and its argmax ``k``.

    ``T_n = max_{1 <= k < n} n^{-1/2} w(k/n) ||S(k; theta_hat)||_A``.
    """
    path = score_partial_sums(data, theta_hat)
    return argmax_statistic(path, A, cfg)


test_statistic.__test__ = False  # keep pytest from collecting it


@dataclass(frozen=True, eq=False)
class TestReport:
    """Outcome of one change-point test.

    ``level`` is the significance level; the critical value is the
    ``1 - level`` quantile of the null distribution.
    """

    __test__ = False

    statistic: float
    k_argmax: int
    weight: WeightConfig
    a_used: WeightMatrix
    critical_value: float
    rejected: bool
    level: float
    n: int = 0
    a_rule: str = ""
    rank: int = 0

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "k_argmax": self.k_argmax,
            "n": self.n,
            "weight": self.weight.to_dict(),
            "a_rule": self.a_rule,
            "rank": self.rank,
            "a_used": self.a_used.a.tolist(),
            "critical_value": self.critical_value,
            "rejected": self.rejected,
            "level": self.level,
        }
